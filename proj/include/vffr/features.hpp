#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>
#include <stdexcept>
#include <vector>

#include "vffr/centerline.hpp"
#include "vffr/surface.hpp"

namespace vffr {

struct NormRecord {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double scale = 1.0;  // multiply raw coordinates by this after centering
};

/// n x 5 network input: normalized coordinates plus radius and geodesic
/// channels, all in the same resized metric space.
struct FeaturedPointCloud {
  std::vector<Eigen::Vector3d> xyz;
  std::vector<double> radius;
  std::vector<double> geodesic;
  std::vector<double> label;  // optional per-point pressure drop
  NormRecord norm;
  bool subsample_passthrough = false;  // set when fewer points than requested

  int size() const { return static_cast<int>(xyz.size()); }
};

/// Strips connectivity; vertex order preserved.
inline std::vector<Eigen::Vector3d> extract_point_cloud(const SurfaceMesh& mesh) {
  return mesh.vertices;
}

/// Multi-source Dijkstra over the mesh edge graph from the inlet vertex set,
/// edge weights are Euclidean lengths.
inline std::vector<double> geodesic_from_inlet(const SurfaceMesh& mesh) {
  if (mesh.inlet_vertex_ids.empty()) throw std::invalid_argument("geodesic: empty inlet set");
  const int n = mesh.vertex_count();
  auto adj = mesh.vertex_adjacency();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  for (int s : mesh.inlet_vertex_ids) {
    dist[s] = 0.0;
    heap.push({0.0, s});
  }
  while (!heap.empty()) {
    auto [d, v] = heap.top();
    heap.pop();
    if (d > dist[v]) continue;
    for (int u : adj[v]) {
      double nd = d + (mesh.vertices[u] - mesh.vertices[v]).norm();
      if (nd < dist[u]) {
        dist[u] = nd;
        heap.push({nd, u});
      }
    }
  }
  int unreachable = static_cast<int>(std::count_if(dist.begin(), dist.end(), [](double d) {
    return !std::isfinite(d);
  }));
  if (unreachable > 0)
    throw std::runtime_error("geodesic: mesh graph disconnected, " + std::to_string(unreachable) +
                             " unreachable vertices");
  return dist;
}

inline double point_segment_distance(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                     const Eigen::Vector3d& b) {
  Eigen::Vector3d ab = b - a;
  double len2 = ab.squaredNorm();
  if (len2 == 0.0) return (p - a).norm();
  double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

/// Shortest Euclidean distance from each vertex to the centerline polyline.
inline std::vector<double> radius_feature(const SurfaceMesh& mesh, const CenterlineTree& tree) {
  if (tree.node_count() == 0) throw std::invalid_argument("radius_feature: empty tree");
  std::vector<double> out(mesh.vertex_count());
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    double best = std::numeric_limits<double>::max();
    if (tree.edges.empty()) best = (mesh.vertices[v] - tree.nodes[0].p).norm();
    for (const auto& e : tree.edges)
      best = std::min(best, point_segment_distance(mesh.vertices[v], tree.nodes[e[0]].p, tree.nodes[e[1]].p));
    out[v] = best;
  }
  return out;
}

/// Centers on the bounding-box midpoint and scales uniformly by the largest
/// extent so coordinates land in [-0.5, 0.5]^3. R and G are scaled by the
/// same factor; labels are untouched.
inline FeaturedPointCloud normalize(const std::vector<Eigen::Vector3d>& points,
                                    const std::vector<double>& radius, const std::vector<double>& geodesic,
                                    const std::vector<double>& label = {}) {
  if (points.size() < 2) throw std::invalid_argument("normalize: need at least 2 points");
  if (radius.size() != points.size() || geodesic.size() != points.size())
    throw std::invalid_argument("normalize: channel size mismatch");
  Eigen::Vector3d lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double extent = (hi - lo).maxCoeff();
  if (extent <= 0.0) throw std::invalid_argument("normalize: degenerate point set");

  FeaturedPointCloud out;
  out.norm.center = 0.5 * (lo + hi);
  out.norm.scale = 1.0 / extent;
  out.xyz.resize(points.size());
  out.radius.resize(points.size());
  out.geodesic.resize(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    out.xyz[i] = (points[i] - out.norm.center) * out.norm.scale;
    out.radius[i] = radius[i] * out.norm.scale;
    out.geodesic[i] = geodesic[i] * out.norm.scale;
  }
  out.label = label;
  return out;
}

inline Eigen::Vector3d denormalize(const Eigen::Vector3d& p, const NormRecord& n) {
  return p / n.scale + n.center;
}

/// Uniform subset without replacement, deterministic per seed. If the cloud
/// is already no larger than m it is passed through with a warning flag.
inline FeaturedPointCloud subsample(const FeaturedPointCloud& cloud, int m, uint64_t seed) {
  if (cloud.size() <= m) {
    FeaturedPointCloud out = cloud;
    out.subsample_passthrough = cloud.size() < m;
    return out;
  }
  std::vector<int> idx(cloud.size());
  for (int i = 0; i < cloud.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> d(i, cloud.size() - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  FeaturedPointCloud out;
  out.norm = cloud.norm;
  out.xyz.reserve(m);
  out.radius.reserve(m);
  out.geodesic.reserve(m);
  if (!cloud.label.empty()) out.label.reserve(m);
  for (int i = 0; i < m; ++i) {
    out.xyz.push_back(cloud.xyz[idx[i]]);
    out.radius.push_back(cloud.radius[idx[i]]);
    out.geodesic.push_back(cloud.geodesic[idx[i]]);
    if (!cloud.label.empty()) out.label.push_back(cloud.label[idx[i]]);
  }
  return out;
}

}  // namespace vffr
