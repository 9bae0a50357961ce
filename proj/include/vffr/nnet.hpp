#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vffr/autodiff.hpp"
#include "vffr/features.hpp"
#include "vffr/pcops.hpp"

namespace vffr {

using ad::Mat;

/// One grouping scale of a set-abstraction block.
struct ScaleConfig {
  double radius = 0.1;     // ball / capsule radius, normalized units
  double evg_half_len = 0.001;  // EVG grouping-vector half-length
  int max_k = 32;
  std::vector<int> mlp;    // shared-MLP widths
};

struct SaBlockConfig {
  int sample_count = 0;    // representative points (ignored when group_all)
  bool group_all = false;
  bool use_evg = false;
  std::vector<ScaleConfig> scales;
};

struct ModelConfig {
  std::string variant = "msg";  // "msg" | "evg"
  int f_in = 5;
  int evg_k = 64;
  std::vector<SaBlockConfig> sa;
  std::vector<std::vector<int>> fp_mlps;  // fp_mlps[j] produces level-j features
  std::vector<int> head{64, 1};
};

inline void to_json(nlohmann::json& j, const ScaleConfig& s) {
  j = {{"radius", s.radius}, {"evg_half_len", s.evg_half_len}, {"max_k", s.max_k}, {"mlp", s.mlp}};
}
inline void from_json(const nlohmann::json& j, ScaleConfig& s) {
  j.at("radius").get_to(s.radius);
  j.at("evg_half_len").get_to(s.evg_half_len);
  j.at("max_k").get_to(s.max_k);
  j.at("mlp").get_to(s.mlp);
}
inline void to_json(nlohmann::json& j, const SaBlockConfig& b) {
  j = {{"sample_count", b.sample_count}, {"group_all", b.group_all}, {"use_evg", b.use_evg}, {"scales", b.scales}};
}
inline void from_json(const nlohmann::json& j, SaBlockConfig& b) {
  j.at("sample_count").get_to(b.sample_count);
  j.at("group_all").get_to(b.group_all);
  j.at("use_evg").get_to(b.use_evg);
  j.at("scales").get_to(b.scales);
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", c.variant}, {"f_in", c.f_in}, {"evg_k", c.evg_k},
       {"sa", c.sa},           {"fp_mlps", c.fp_mlps}, {"head", c.head}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("variant").get_to(c.variant);
  j.at("f_in").get_to(c.f_in);
  j.at("evg_k").get_to(c.evg_k);
  j.at("sa").get_to(c.sa);
  j.at("fp_mlps").get_to(c.fp_mlps);
  j.at("head").get_to(c.head);
}

/// Grouping radii of Table layout: per-block {r1, r2}; the last block groups
/// all remaining points at both scales.
inline ModelConfig default_model_config(const std::string& variant, int input_points) {
  ModelConfig c;
  c.variant = variant;
  const double r1[] = {0.04, 0.04, 0.08, 0.16, 0.24, 0.6, 0.0};
  const double r2[] = {0.08, 0.08, 0.16, 0.24, 0.32, 0.8, 0.0};
  const double L1 = 0.001, L2 = 0.002;
  // geometric decay over 7 levels; desk default 4096 -> 1024,512,...,16,1
  if (input_points < 512) throw std::invalid_argument("default_model_config: needs >= 512 input points");
  int counts[7];
  counts[0] = input_points / 4;
  for (int i = 1; i < 5; ++i) counts[i] = counts[i - 1] / 2;
  counts[5] = input_points / 256;
  counts[6] = 1;
  const std::vector<std::vector<int>> widths = {
      {32, 32, 64}, {32, 32, 64}, {64, 64, 128}, {64, 64, 128},
      {64, 64, 128}, {64, 64, 128}, {64, 64, 128}};
  for (int i = 0; i < 7; ++i) {
    SaBlockConfig b;
    b.sample_count = counts[i];
    b.group_all = (i == 6);
    b.use_evg = (variant == "evg") && i > 0 && !b.group_all;
    ScaleConfig s1{r1[i], L1, 16, widths[i]};
    ScaleConfig s2{r2[i], L2, 32, widths[i]};
    b.scales = {s1, s2};
    c.sa.push_back(b);
  }
  // decoder widths mirror downward; level 0 is the full-resolution output
  c.fp_mlps = {{128}, {128}, {128}, {256}, {256}, {256}, {256}};
  c.head = {64, 1};
  return c;
}

namespace detail {

inline int sa_out_channels(const SaBlockConfig& b) {
  int c = 0;
  for (const auto& s : b.scales) c += s.mlp.back();
  return c;
}

}  // namespace detail

/// Shapes of every weight/bias matrix in tape order: SA blocks (scale-major,
/// W then b per layer), FP blocks coarsest-first, then head.
inline std::vector<std::pair<int, int>> parameter_shapes(const ModelConfig& cfg) {
  std::vector<std::pair<int, int>> shapes;
  int prev = cfg.f_in;
  std::vector<int> level_channels{cfg.f_in};
  for (const auto& b : cfg.sa) {
    for (const auto& s : b.scales) {
      int in = 3 + prev;
      for (int w : s.mlp) {
        shapes.push_back({in, w});
        shapes.push_back({1, w});
        in = w;
      }
    }
    prev = detail::sa_out_channels(b);
    level_channels.push_back(prev);
  }
  if (cfg.fp_mlps.size() != cfg.sa.size()) throw std::invalid_argument("model: fp/sa block count mismatch");
  // FP producing level j consumes the features interpolated from level j+1
  int above = level_channels.back();
  for (int j = static_cast<int>(cfg.fp_mlps.size()) - 1; j >= 0; --j) {
    int in = above + level_channels[j];
    for (int w : cfg.fp_mlps[j]) {
      shapes.push_back({in, w});
      shapes.push_back({1, w});
      in = w;
    }
    above = in;
  }
  int in = above;
  for (int w : cfg.head) {
    shapes.push_back({in, w});
    shapes.push_back({1, w});
    in = w;
  }
  if (cfg.head.back() != 1) throw std::invalid_argument("model: head must end in width 1");
  return shapes;
}

template <class S>
struct ModelParamsT {
  ModelConfig config;
  std::vector<ad::MatT<S>> tensors;
  ad::AdamStateT<S> adam;

  std::vector<ad::MatT<S>*> pointers() {
    std::vector<ad::MatT<S>*> p;
    for (auto& t : tensors) p.push_back(&t);
    return p;
  }
};
using ModelParams = ModelParamsT<double>;

template <class S = double>
inline ModelParamsT<S> init_model(const ModelConfig& cfg, uint64_t seed) {
  ModelParamsT<S> mp;
  mp.config = cfg;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto [r, c] : parameter_shapes(cfg)) {
    ad::MatT<S> t(r, c);
    if (r == 1) {
      t.setZero();  // bias
    } else {
      double std = std::sqrt(2.0 / r);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) t(i, j) = S(std * gauss(rng));
    }
    mp.tensors.push_back(std::move(t));
  }
  return mp;
}

namespace detail {

/// Permutation-covariant FPS start: the lexicographically smallest point.
inline int canonical_start(const PointSet& pts) {
  int best = 0;
  for (size_t i = 1; i < pts.size(); ++i) {
    const auto &a = pts[i], &b = pts[best];
    if (a.x() < b.x() || (a.x() == b.x() && (a.y() < b.y() || (a.y() == b.y() && a.z() < b.z()))))
      best = static_cast<int>(i);
  }
  return best;
}

template <class S>
struct ParamCursor {
  ad::TapeT<S>* tape;
  const std::vector<ad::MatT<S>>* tensors;
  std::vector<int> node_ids;
  size_t next = 0;

  int take() {
    if (next >= tensors->size()) throw std::logic_error("model: parameter cursor overrun");
    int id = tape->leaf((*tensors)[next++], true);
    node_ids.push_back(id);
    return id;
  }
};

/// Shared MLP: per-row affine + relu per layer; the final layer is linear
/// when last_linear is set.
template <class S>
inline int shared_mlp(ad::TapeT<S>& tape, ParamCursor<S>& pc, int x, size_t layers, bool last_linear) {
  for (size_t l = 0; l < layers; ++l) {
    int w = pc.take();
    int b = pc.take();
    x = tape.linear(x, w, b, !(last_linear && l + 1 == layers));
  }
  return x;
}

}  // namespace detail

/// Full forward pass on one cloud; returns the n x 1 prediction node.
/// Parameter leaves are appended to param_nodes in tape order so gradients
/// can be read back after backward().
template <class S>
inline int model_forward(ad::TapeT<S>& tape, const ModelParamsT<S>& mp, const FeaturedPointCloud& cloud,
                         std::vector<int>* param_node_ids = nullptr) {
  const ModelConfig& cfg = mp.config;
  const int n = cloud.size();
  if (n < 1) throw std::invalid_argument("forward: empty cloud");

  ad::MatT<S> feat0(n, cfg.f_in);
  for (int i = 0; i < n; ++i) {
    feat0(i, 0) = cloud.xyz[i].x();
    feat0(i, 1) = cloud.xyz[i].y();
    feat0(i, 2) = cloud.xyz[i].z();
    feat0(i, 3) = cloud.radius[i];
    feat0(i, 4) = cloud.geodesic[i];
  }

  detail::ParamCursor<S> pc{&tape, &mp.tensors, {}, 0};

  std::vector<PointSet> level_pos{cloud.xyz};
  std::vector<int> level_feat{tape.leaf(feat0, false)};

  for (const auto& blk : cfg.sa) {
    const PointSet& pos = level_pos.back();
    const int cur_n = static_cast<int>(pos.size());
    PointSet centers;
    if (blk.group_all) {
      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      for (const auto& p : pos) c += p;
      centers.push_back(c / cur_n);
    } else {
      if (cur_n < blk.sample_count) throw std::invalid_argument("forward: cloud smaller than sample count");
      auto idx = farthest_point_sampling(pos, blk.sample_count, detail::canonical_start(pos));
      for (int i : idx) centers.push_back(pos[i]);
    }

    std::vector<int> scale_outputs;
    for (const auto& sc : blk.scales) {
      std::vector<int> flat;
      int k = 0;
      if (blk.group_all) {
        k = cur_n;
        flat.resize(cur_n);
        for (int i = 0; i < cur_n; ++i) flat[i] = i;
      } else {
        NeighborLists nl;
        if (blk.use_evg) {
          EvgParams ep;
          ep.k = std::min(cfg.evg_k, cur_n);
          ep.L = sc.evg_half_len;
          ep.r = sc.radius;
          ep.max_k = sc.max_k;
          nl = evg_query(pos, centers, ep);
        } else {
          nl = ball_query(pos, centers, sc.radius, sc.max_k);
        }
        flat = nl.flat;
        k = nl.max_k;
      }
      ad::MatT<S> rel(flat.size(), 3);
      for (size_t i = 0; i < flat.size(); ++i)
        rel.row(i) = (pos[flat[i]] - centers[i / k]).transpose().template cast<S>();
      int rel_leaf = tape.leaf(rel, false);
      // first layer of [rel | gathered features] * W split so the feature
      // part is encoded once per point and gathered afterwards: far fewer
      // rows go through the wide matrix product
      int w1 = pc.take();
      int b1 = pc.take();
      int w_rel = tape.split_rows(w1, 0, 3);
      int w_feat = tape.split_rows(w1, 3, tape.value(w1).rows() - 3);
      int pre = tape.matmul(level_feat.back(), w_feat);
      int x = tape.add_relu(tape.linear(rel_leaf, w_rel, b1, false),
                            tape.gather_rows(pre, flat));
      x = detail::shared_mlp(tape, pc, x, sc.mlp.size() - 1, false);
      scale_outputs.push_back(tape.group_max(x, k));
    }
    int merged = scale_outputs[0];
    for (size_t s = 1; s < scale_outputs.size(); ++s) merged = tape.concat_cols(merged, scale_outputs[s]);
    level_pos.push_back(centers);
    level_feat.push_back(merged);
  }

  // decoder: interpolate down the level stack with skip connections
  int above = level_feat.back();
  for (int j = static_cast<int>(cfg.sa.size()) - 1; j >= 0; --j) {
    const PointSet& coarse = level_pos[j + 1];
    const PointSet& fine = level_pos[j];
    const int kk = std::min<int>(3, static_cast<int>(coarse.size()));
    std::vector<int> idx;
    std::vector<double> dist;
    knn(coarse, fine, kk, idx, dist);
    ad::MatT<S> w(fine.size(), kk);
    for (size_t i = 0; i < fine.size(); ++i) {
      double sum = 0.0;
      for (int t = 0; t < kk; ++t) {
        double wt = 1.0 / std::max(dist[i * kk + t], 1e-10);
        w(i, t) = S(wt);
        sum += wt;
      }
      w.row(i) /= S(sum);
    }
    int interp = tape.interp3(above, w, idx);
    int x = tape.concat_cols(interp, level_feat[j]);
    above = detail::shared_mlp(tape, pc, x, cfg.fp_mlps[j].size(), false);
  }

  int out = detail::shared_mlp(tape, pc, above, cfg.head.size(), true);
  if (pc.next != mp.tensors.size()) throw std::logic_error("model: unused parameters");
  if (param_node_ids) *param_node_ids = pc.node_ids;
  return out;
}

/// Uniformly random rotation (Gaussian quaternion); coordinates rotate,
/// scalar channels and labels are untouched.
inline Eigen::Matrix3d random_rotation_matrix(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::Quaterniond q(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline FeaturedPointCloud random_rotation(const FeaturedPointCloud& cloud, uint64_t seed) {
  Eigen::Matrix3d rot = random_rotation_matrix(seed);
  FeaturedPointCloud out = cloud;
  for (auto& p : out.xyz) p = rot * p;
  return out;
}

// ---- checkpoint io ----

// tensors are written as doubles regardless of the in-memory scalar, so the
// format does not depend on the training precision
template <class S>
inline void save_checkpoint(const ModelParamsT<S>& mp, const std::string& path,
                            const std::string& state_json = "{}") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write("VFFRCKP1", 8);
  auto write_str = [&](const std::string& s) {
    uint64_t len = s.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(s.data(), static_cast<std::streamsize>(len));
  };
  auto write_mats = [&](const std::vector<ad::MatT<S>>& ms) {
    uint64_t cnt = ms.size();
    f.write(reinterpret_cast<const char*>(&cnt), 8);
    for (const auto& m : ms) {
      uint64_t r = m.rows(), c = m.cols();
      f.write(reinterpret_cast<const char*>(&r), 8);
      f.write(reinterpret_cast<const char*>(&c), 8);
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          double v = m(i, j);
          f.write(reinterpret_cast<const char*>(&v), 8);
        }
    }
  };
  write_str(nlohmann::json(mp.config).dump());
  write_str(state_json);
  write_mats(mp.tensors);
  uint64_t step = static_cast<uint64_t>(mp.adam.step);
  f.write(reinterpret_cast<const char*>(&step), 8);
  write_mats(mp.adam.m);
  write_mats(mp.adam.v);
}

template <class S = double>
inline ModelParamsT<S> load_checkpoint(const std::string& path, std::string* state_json = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "VFFRCKP1") throw std::runtime_error(path + ": not a checkpoint");
  auto read_str = [&]() {
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string s(len, '\0');
    f.read(s.data(), static_cast<std::streamsize>(len));
    return s;
  };
  auto read_mats = [&]() {
    uint64_t cnt = 0;
    f.read(reinterpret_cast<char*>(&cnt), 8);
    std::vector<ad::MatT<S>> ms(cnt);
    for (auto& m : ms) {
      uint64_t r = 0, c = 0;
      f.read(reinterpret_cast<char*>(&r), 8);
      f.read(reinterpret_cast<char*>(&c), 8);
      m.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          double v = 0;
          f.read(reinterpret_cast<char*>(&v), 8);
          m(i, j) = S(v);
        }
    }
    return ms;
  };
  ModelParamsT<S> mp;
  mp.config = nlohmann::json::parse(read_str()).template get<ModelConfig>();
  std::string state = read_str();
  if (state_json) *state_json = state;
  mp.tensors = read_mats();
  uint64_t step = 0;
  f.read(reinterpret_cast<char*>(&step), 8);
  mp.adam.step = static_cast<long>(step);
  mp.adam.m = read_mats();
  mp.adam.v = read_mats();
  if (!f) throw std::runtime_error(path + ": truncated checkpoint");
  return mp;
}

}  // namespace vffr
