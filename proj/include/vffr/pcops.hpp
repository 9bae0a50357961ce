#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace vffr {

using PointSet = std::vector<Eigen::Vector3d>;

/// Fixed-size neighbor groups: max_k member indices per center, ascending by
/// distance (ties by lower index). Groups with fewer real members repeat the
/// first member; a group that matches nothing takes the single nearest point.
struct NeighborLists {
  int max_k = 0;
  std::vector<int> flat;        // center i -> flat[i*max_k .. (i+1)*max_k)
  std::vector<int> real_count;  // members before padding
  std::vector<uint8_t> fallback;  // evg only: degenerate covariance centers

  int centers() const { return static_cast<int>(real_count.size()); }
  const int* group(int i) const { return flat.data() + static_cast<size_t>(i) * max_k; }
};

/// Uniform spatial hash grid with cell size keyed to the query radius.
class HashGrid {
 public:
  HashGrid(const PointSet& points, double cell) : points_(points), cell_(cell) {
    cells_.reserve(points.size());
    for (size_t i = 0; i < points.size(); ++i) cells_[key(points[i])].push_back(static_cast<int>(i));
  }

  /// Sorted indices of all points in cells overlapping the sphere (superset
  /// of the exact result; caller filters). Distinct cells may collide to one
  /// hash bucket, so buckets are deduplicated here.
  void candidates(const Eigen::Vector3d& c, double radius, std::vector<int>& out) const {
    out.clear();
    int lo[3], hi[3];
    for (int d = 0; d < 3; ++d) {
      lo[d] = static_cast<int>(std::floor((c[d] - radius) / cell_));
      hi[d] = static_cast<int>(std::floor((c[d] + radius) / cell_));
    }
    for (int x = lo[0]; x <= hi[0]; ++x)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int z = lo[2]; z <= hi[2]; ++z) {
          auto it = cells_.find(pack(x, y, z));
          if (it != cells_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
        }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }

 private:
  static int64_t pack(int64_t x, int64_t y, int64_t z) {
    return (x * 73856093) ^ (y * 19349663) ^ (z * 83492791);
  }
  int64_t key(const Eigen::Vector3d& p) const {
    return pack(static_cast<int64_t>(std::floor(p.x() / cell_)),
                static_cast<int64_t>(std::floor(p.y() / cell_)),
                static_cast<int64_t>(std::floor(p.z() / cell_)));
  }
  const PointSet& points_;
  double cell_;
  std::unordered_map<int64_t, std::vector<int>> cells_;
};

/// Greedy farthest point sampling. First pick is start_index, every later
/// pick maximizes the min distance to the selected set; ties go to the
/// lower index.
inline std::vector<int> farthest_point_sampling(const PointSet& points, int m, int start_index) {
  const int n = static_cast<int>(points.size());
  if (m < 1 || m > n) throw std::invalid_argument("fps: m out of [1, n]");
  if (start_index < 0 || start_index >= n) throw std::invalid_argument("fps: bad start index");
  std::vector<int> picked;
  picked.reserve(m);
  std::vector<double> mind(n, std::numeric_limits<double>::max());
  int cur = start_index;
  for (int step = 0; step < m; ++step) {
    picked.push_back(cur);
    int next = -1;
    double best = -1.0;
    for (int i = 0; i < n; ++i) {
      double d = (points[i] - points[cur]).squaredNorm();
      if (d < mind[i]) mind[i] = d;
      if (mind[i] > best) {
        best = mind[i];
        next = i;
      }
    }
    cur = next;
  }
  return picked;
}

namespace detail {

inline void sort_truncate_pad(std::vector<std::pair<double, int>>& cand, int max_k, NeighborLists& out,
                              const PointSet& points, const Eigen::Vector3d& center) {
  std::sort(cand.begin(), cand.end());
  if (cand.empty()) {
    // nothing matched the predicate: fall back to the single nearest point
    int best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (size_t i = 0; i < points.size(); ++i) {
      double d = (points[i] - center).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    cand.push_back({best_d, best});
  }
  int real = std::min<int>(max_k, static_cast<int>(cand.size()));
  out.real_count.push_back(real);
  for (int k = 0; k < max_k; ++k) out.flat.push_back(cand[k < real ? k : 0].second);
}

}  // namespace detail

/// All points with distance <= radius to each center, sorted / truncated /
/// padded to max_k.
inline NeighborLists ball_query(const PointSet& points, const PointSet& centers, double radius, int max_k) {
  if (!(radius > 0)) throw std::invalid_argument("ball_query: radius must be > 0");
  if (max_k < 1) throw std::invalid_argument("ball_query: max_k must be >= 1");
  NeighborLists out;
  out.max_k = max_k;
  HashGrid grid(points, radius);
  std::vector<int> cand_idx;
  std::vector<std::pair<double, int>> cand;
  for (const auto& c : centers) {
    grid.candidates(c, radius, cand_idx);
    cand.clear();
    for (int i : cand_idx) {
      double d = (points[i] - c).norm();
      if (d <= radius) cand.push_back({d, i});
    }
    detail::sort_truncate_pad(cand, max_k, out, points, c);
  }
  return out;
}

/// Exact k nearest neighbors per query, ties by lower index.
inline void knn(const PointSet& points, const PointSet& queries, int k, std::vector<int>& indices,
                std::vector<double>& distances) {
  const int n = static_cast<int>(points.size());
  if (k < 1 || k > n) throw std::invalid_argument("knn: k out of [1, n]");
  indices.assign(queries.size() * k, -1);
  distances.assign(queries.size() * k, 0.0);
  std::vector<std::pair<double, int>> cand(n);
  for (size_t q = 0; q < queries.size(); ++q) {
    for (int i = 0; i < n; ++i) cand[i] = {(points[i] - queries[q]).squaredNorm(), i};
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int j = 0; j < k; ++j) {
      indices[q * k + j] = cand[j].second;
      distances[q * k + j] = std::sqrt(cand[j].first);
    }
  }
}

struct EvgParams {
  int k = 64;        // neighbors for the eigenvector estimate
  double L = 0.001;  // grouping-vector half-length, normalized units
  double r = 0.04;   // capsule radius, normalized units
  int max_k = 32;
};

namespace detail {

/// Top eigenvector of the 3x3 covariance. When the top eigenvalue ties with
/// the next one the eigenspace is ambiguous; the vector closest to the
/// lowest-index coordinate axis inside that eigenspace is chosen.
inline Eigen::Vector3d top_eigenvector(const Eigen::Matrix3d& cov, bool& degenerate) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const auto& vals = es.eigenvalues();  // ascending
  degenerate = vals[2] <= 1e-24;
  if (degenerate) return Eigen::Vector3d::UnitX();
  double tie_tol = 1e-9 * vals[2];
  int first_tied = 2;
  while (first_tied > 0 && vals[2] - vals[first_tied - 1] <= tie_tol) first_tied--;
  if (first_tied == 2) return es.eigenvectors().col(2);
  // project coordinate axes onto the tied eigenspace, take the first that sticks
  Eigen::Matrix3d basis = es.eigenvectors();
  for (int axis = 0; axis < 3; ++axis) {
    Eigen::Vector3d proj = Eigen::Vector3d::Zero();
    for (int c = first_tied; c <= 2; ++c) proj += basis.col(c).dot(Eigen::Vector3d::Unit(axis)) * basis.col(c);
    if (proj.norm() > 1e-9) return proj.normalized();
  }
  return basis.col(2);
}

inline double point_capsule_distance(const Eigen::Vector3d& p, const Eigen::Vector3d& c,
                                     const Eigen::Vector3d& v, double L) {
  // distance to the segment [c - L*v, c + L*v]; invariant to the sign of v
  double t = std::clamp((p - c).dot(v), -L, L);
  return (p - (c + t * v)).norm();
}

}  // namespace detail

/// Eigenvector grouping: members lie within distance r of the segment of
/// half-length L along the top eigenvector of each center's k-NN
/// neighborhood. Degenerate neighborhoods fall back to a plain ball query.
inline NeighborLists evg_query(const PointSet& points, const PointSet& centers, const EvgParams& params) {
  if (params.k < 3) throw std::invalid_argument("evg: k must be >= 3");
  if (static_cast<int>(points.size()) < params.k) throw std::invalid_argument("evg: fewer points than k");
  if (!(params.L > 0) || !(params.r > 0)) throw std::invalid_argument("evg: L and r must be > 0");

  std::vector<int> nn_idx;
  std::vector<double> nn_dist;
  knn(points, centers, params.k, nn_idx, nn_dist);

  NeighborLists out;
  out.max_k = params.max_k;
  const double reach = params.L + params.r;
  HashGrid grid(points, reach);
  std::vector<int> cand_idx;
  std::vector<std::pair<double, int>> cand;

  for (size_t ci = 0; ci < centers.size(); ++ci) {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int j = 0; j < params.k; ++j) mean += points[nn_idx[ci * params.k + j]];
    mean /= params.k;
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (int j = 0; j < params.k; ++j) {
      Eigen::Vector3d d = points[nn_idx[ci * params.k + j]] - mean;
      cov += d * d.transpose();
    }
    cov /= params.k;
    bool degenerate = false;
    Eigen::Vector3d v = detail::top_eigenvector(cov, degenerate);

    grid.candidates(centers[ci], reach, cand_idx);
    cand.clear();
    if (degenerate) {
      for (int i : cand_idx) {
        double d = (points[i] - centers[ci]).norm();
        if (d <= params.r) cand.push_back({(points[i] - centers[ci]).squaredNorm(), i});
      }
    } else {
      for (int i : cand_idx) {
        double d = detail::point_capsule_distance(points[i], centers[ci], v, params.L);
        if (d <= params.r) cand.push_back({(points[i] - centers[ci]).squaredNorm(), i});
      }
    }
    detail::sort_truncate_pad(cand, params.max_k, out, points, centers[ci]);
    out.fallback.push_back(degenerate ? 1 : 0);
  }
  return out;
}

/// Inverse-distance weighted interpolation from the 3 nearest coarse points,
/// distances guarded below by 1e-10.
inline Eigen::MatrixXd three_nn_interpolate(const PointSet& coarse_points,
                                            const Eigen::MatrixXd& coarse_features,
                                            const PointSet& fine_points) {
  if (coarse_points.size() < 3) throw std::invalid_argument("three_nn: need >= 3 coarse points");
  if (coarse_features.rows() != static_cast<Eigen::Index>(coarse_points.size()))
    throw std::invalid_argument("three_nn: feature row mismatch");
  std::vector<int> idx;
  std::vector<double> dist;
  knn(coarse_points, fine_points, 3, idx, dist);
  Eigen::MatrixXd out(fine_points.size(), coarse_features.cols());
  for (size_t i = 0; i < fine_points.size(); ++i) {
    double w[3], sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      w[j] = 1.0 / std::max(dist[i * 3 + j], 1e-10);
      sum += w[j];
    }
    out.row(i).setZero();
    for (int j = 0; j < 3; ++j) out.row(i) += (w[j] / sum) * coarse_features.row(idx[i * 3 + j]);
  }
  return out;
}

}  // namespace vffr
