#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "vffr/centerline.hpp"

namespace vffr {

struct Range {
  double min = 0.0, max = 0.0;
  double sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> d(min, max);
    return d(rng);
  }
};

struct StenosisSpec {
  int branch_id = -1;
  double start_arclength = 0.0;  // m, from the branch's first node
  double length = 0.0;           // m
  double severity_grade = 0.0;   // percent diameter reduction, [0, 99]
  std::string profile = "cosine";
};

struct GeneratorConfig {
  Range branch_length{0.030, 0.080};    // m
  Range root_radius{0.0015, 0.004};     // m
  Range taper{0.05, 0.20};              // fraction of radius lost per branch
  Range bifurcation_angle_deg{30.0, 70.0};
  Range murray_split{0.3, 0.7};         // fraction of r^3 to the first child
  int bifurcations_min = 2;
  int bifurcations_max = 4;
  double node_step = 0.0005;            // m
  double curvature_step_deg = 1.5;      // max direction drift per node step
  // stenosis sampling
  int stenoses_min = 1;
  int stenoses_max = 3;
  Range stenosis_length{0.005, 0.015};  // m
  // CAD-RADS grade bins; one is picked uniformly, then a grade inside it
  std::vector<Range> grade_bins{{1, 24}, {25, 49}, {50, 69}, {70, 99}};
};

inline void validate(const GeneratorConfig& c) {
  auto chk = [](const Range& r, const char* name) {
    if (!(r.min <= r.max)) throw std::invalid_argument(std::string("generator config: empty range ") + name);
  };
  chk(c.branch_length, "branch_length");
  chk(c.root_radius, "root_radius");
  chk(c.taper, "taper");
  chk(c.bifurcation_angle_deg, "bifurcation_angle_deg");
  chk(c.murray_split, "murray_split");
  chk(c.stenosis_length, "stenosis_length");
  if (c.bifurcations_min < 0 || c.bifurcations_min > c.bifurcations_max)
    throw std::invalid_argument("generator config: bad bifurcation count range");
  if (!(c.node_step > 0)) throw std::invalid_argument("generator config: node_step must be > 0");
  for (const auto& b : c.grade_bins) chk(b, "grade_bins");
}

namespace detail {

inline Eigen::Vector3d any_perpendicular(const Eigen::Vector3d& d) {
  Eigen::Vector3d a = std::abs(d.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  return d.cross(a).normalized();
}

inline Eigen::Vector3d rotate_about(const Eigen::Vector3d& v, const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()) * v;
}

}  // namespace detail

/// Procedural coronary-tree generator: a tapered main branch plus recursive
/// bifurcations, child radii by Murray's law r_p^3 = r_l^3 + r_r^3.
/// Pure function of (config, seed).
inline CenterlineTree generate_centerline(const GeneratorConfig& cfg, uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  CenterlineTree t;

  struct Tip {
    int attach_node;        // node the branch grows from (-1: none, root branch)
    Eigen::Vector3d pos;
    Eigen::Vector3d dir;
    double radius;          // radius at the start of this branch
  };

  const double deg = std::numbers::pi / 180.0;
  int budget = cfg.bifurcations_min +
               (cfg.bifurcations_max > cfg.bifurcations_min
                    ? static_cast<int>(rng() % uint64_t(cfg.bifurcations_max - cfg.bifurcations_min + 1))
                    : 0);

  std::deque<Tip> tips;
  tips.push_back({-1, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(), cfg.root_radius.sample(rng)});
  int next_branch = 0;

  while (!tips.empty()) {
    Tip tip = tips.front();
    tips.pop_front();
    const int bid = next_branch++;
    const double length = cfg.branch_length.sample(rng);
    const double taper = cfg.taper.sample(rng);
    const int steps = std::max(2, static_cast<int>(std::round(length / cfg.node_step)));
    const double ds = length / steps;

    Eigen::Vector3d pos = tip.pos;
    Eigen::Vector3d dir = tip.dir;
    int prev = tip.attach_node;
    int first = -1;
    for (int i = 0; i <= steps; ++i) {
      if (i > 0) {
        // gentle random drift keeps vessels from being perfectly straight
        double drift = cfg.curvature_step_deg * deg;
        std::uniform_real_distribution<double> ang(-drift, drift);
        std::uniform_real_distribution<double> az(0.0, 2.0 * std::numbers::pi);
        Eigen::Vector3d u = detail::any_perpendicular(dir);
        Eigen::Vector3d axis = detail::rotate_about(u, dir, az(rng));
        dir = detail::rotate_about(dir, axis, ang(rng)).normalized();
        pos += ds * dir;
      } else if (prev >= 0) {
        pos += ds * dir;  // child branches start one step away from the junction
      }
      double frac = double(i) / steps;
      double r = tip.radius * (1.0 - taper * frac);
      t.nodes.push_back({pos, r});
      t.branch_ids.push_back(bid);
      int id = t.node_count() - 1;
      if (first < 0) first = id;
      if (prev >= 0) t.edges.push_back({prev, id});
      prev = id;
    }

    const int end_node = prev;
    const double end_radius = t.nodes[end_node].r;
    if (budget > 0) {
      budget--;
      double f = cfg.murray_split.sample(rng);
      double rl = std::cbrt(f) * end_radius;
      double rr = std::cbrt(1.0 - f) * end_radius;
      double opening = cfg.bifurcation_angle_deg.sample(rng) * deg;
      std::uniform_real_distribution<double> az(0.0, 2.0 * std::numbers::pi);
      Eigen::Vector3d u = detail::any_perpendicular(dir);
      Eigen::Vector3d axis = detail::rotate_about(u, dir, az(rng));
      // larger child deviates less from the parent direction
      double wl = rr * rr * rr / (rl * rl * rl + rr * rr * rr);
      Eigen::Vector3d dl = detail::rotate_about(dir, axis, opening * wl).normalized();
      Eigen::Vector3d dr = detail::rotate_about(dir, axis, -opening * (1.0 - wl)).normalized();
      Eigen::Vector3d p = t.nodes[end_node].p;
      tips.push_back({end_node, p, dl, rl});
      tips.push_back({end_node, p, dr, rr});
    } else {
      t.outlets.push_back(end_node);
    }
  }

  t.root = 0;
  validate(t);
  return t;
}

/// Smooth cosine narrowing: r(s) -> r(s) * (1 - (g/100) * (1 - cos(2*pi*s/l)) / 2).
inline double stenosis_profile_factor(double s, double length, double grade) {
  return 1.0 - (grade / 100.0) * (1.0 - std::cos(2.0 * std::numbers::pi * s / length)) / 2.0;
}

/// Applies stenotic narrowings to node radii. Topology and radii outside
/// all segments are untouched.
inline CenterlineTree insert_stenoses(const CenterlineTree& tree, const std::vector<StenosisSpec>& specs) {
  auto branches = tree.branch_nodes();
  // per-branch arclength of every branch node, measured from its first node
  std::map<int, std::vector<double>> arcs;
  for (const auto& [bid, idx] : branches) {
    std::vector<double> a(idx.size(), 0.0);
    for (size_t i = 1; i < idx.size(); ++i)
      a[i] = a[i - 1] + (tree.nodes[idx[i]].p - tree.nodes[idx[i - 1]].p).norm();
    arcs[bid] = a;
  }

  for (const auto& s : specs) {
    auto it = branches.find(s.branch_id);
    if (it == branches.end())
      throw std::invalid_argument("stenosis: unknown branch id " + std::to_string(s.branch_id));
    if (s.severity_grade < 0.0 || s.severity_grade > 99.0)
      throw std::invalid_argument("stenosis: grade out of [0,99]");
    double blen = arcs[s.branch_id].back();
    if (s.start_arclength < 0.0 || s.length <= 0.0 || s.start_arclength + s.length > blen + 1e-12)
      throw std::out_of_range("stenosis: segment exceeds branch " + std::to_string(s.branch_id));
  }
  for (size_t i = 0; i < specs.size(); ++i)
    for (size_t j = i + 1; j < specs.size(); ++j) {
      const auto &a = specs[i], &b = specs[j];
      if (a.branch_id != b.branch_id) continue;
      double a0 = a.start_arclength, a1 = a0 + a.length;
      double b0 = b.start_arclength, b1 = b0 + b.length;
      if (a0 < b1 && b0 < a1)
        throw std::invalid_argument("stenosis: overlapping segments on branch " + std::to_string(a.branch_id));
    }

  CenterlineTree out = tree;
  for (const auto& s : specs) {
    const auto& idx = branches[s.branch_id];
    const auto& a = arcs[s.branch_id];
    for (size_t i = 0; i < idx.size(); ++i) {
      double local = a[i] - s.start_arclength;
      if (local < 0.0 || local > s.length) continue;
      out.nodes[idx[i]].r *= stenosis_profile_factor(local, s.length, s.severity_grade);
    }
  }
  return out;
}

/// Samples a stenosis set for a generated tree; segments never overlap and
/// always fit inside their branch.
inline std::vector<StenosisSpec> sample_stenoses(const CenterlineTree& tree, const GeneratorConfig& cfg,
                                                 uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto branches = tree.branch_nodes();
  std::vector<int> bids;
  for (const auto& [bid, idx] : branches)
    if (idx.size() >= 2) bids.push_back(bid);

  int count = cfg.stenoses_min +
              (cfg.stenoses_max > cfg.stenoses_min
                   ? static_cast<int>(rng() % uint64_t(cfg.stenoses_max - cfg.stenoses_min + 1))
                   : 0);
  std::vector<StenosisSpec> specs;
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      int bid = bids[rng() % bids.size()];
      const auto& idx = branches[bid];
      double blen = 0.0;
      for (size_t i = 1; i < idx.size(); ++i)
        blen += (tree.nodes[idx[i]].p - tree.nodes[idx[i - 1]].p).norm();
      double len = cfg.stenosis_length.sample(rng);
      if (len > 0.8 * blen) continue;
      std::uniform_real_distribution<double> pos(0.0, blen - len);
      StenosisSpec s;
      s.branch_id = bid;
      s.length = len;
      s.start_arclength = pos(rng);
      const auto& bin = cfg.grade_bins[rng() % cfg.grade_bins.size()];
      s.severity_grade = bin.sample(rng);
      bool overlap = false;
      for (const auto& o : specs)
        if (o.branch_id == bid && s.start_arclength < o.start_arclength + o.length &&
            o.start_arclength < s.start_arclength + s.length)
          overlap = true;
      if (overlap) continue;
      specs.push_back(s);
      break;
    }
  }
  return specs;
}

}  // namespace vffr
