#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "vffr/centerline.hpp"

namespace vffr {

/// Triangle mesh with inlet/outlet vertex markers and optional named
/// per-vertex scalar channels. Not required to be watertight; only the
/// vertex-edge graph needs to be connected.
struct SurfaceMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<int> inlet_vertex_ids;
  std::vector<std::vector<int>> outlet_vertex_ids;  // one ring per outlet
  std::map<std::string, std::vector<double>> channels;

  int vertex_count() const { return static_cast<int>(vertices.size()); }

  /// Undirected adjacency from face edges.
  std::vector<std::vector<int>> vertex_adjacency() const {
    std::vector<std::set<int>> adj(vertices.size());
    for (const auto& f : faces)
      for (int k = 0; k < 3; ++k) {
        int a = f[k], b = f[(k + 1) % 3];
        adj[a].insert(b);
        adj[b].insert(a);
      }
    std::vector<std::vector<int>> out(vertices.size());
    for (size_t i = 0; i < adj.size(); ++i) out[i].assign(adj[i].begin(), adj[i].end());
    return out;
  }
};

inline void validate(const SurfaceMesh& m) {
  const int n = m.vertex_count();
  for (const auto& f : m.faces) {
    for (int k = 0; k < 3; ++k)
      if (f[k] < 0 || f[k] >= n) throw std::invalid_argument("mesh: face index out of range");
    Eigen::Vector3d e1 = m.vertices[f[1]] - m.vertices[f[0]];
    Eigen::Vector3d e2 = m.vertices[f[2]] - m.vertices[f[0]];
    if (e1.cross(e2).norm() < 1e-12) throw std::invalid_argument("mesh: degenerate face");
  }
  if (m.inlet_vertex_ids.empty()) throw std::invalid_argument("mesh: empty inlet vertex set");
  for (const auto& [name, ch] : m.channels)
    if (static_cast<int>(ch.size()) != n)
      throw std::invalid_argument("mesh: channel '" + name + "' size mismatch");
}

namespace detail {

/// Twist-free frames along a polyline: the initial normal is parallel-
/// transported through the rotation carrying tangent i to tangent i+1.
inline std::vector<Eigen::Matrix3d> transport_frames(const std::vector<Eigen::Vector3d>& pts) {
  const size_t n = pts.size();
  std::vector<Eigen::Vector3d> tang(n);
  for (size_t i = 0; i < n; ++i) {
    if (i == 0)
      tang[i] = (pts[1] - pts[0]).normalized();
    else if (i == n - 1)
      tang[i] = (pts[n - 1] - pts[n - 2]).normalized();
    else
      tang[i] = (pts[i + 1] - pts[i - 1]).normalized();
  }
  Eigen::Vector3d u = std::abs(tang[0].x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  u = (u - u.dot(tang[0]) * tang[0]).normalized();
  std::vector<Eigen::Matrix3d> frames(n);
  for (size_t i = 0; i < n; ++i) {
    if (i > 0) {
      Eigen::Vector3d a = tang[i - 1], b = tang[i];
      Eigen::Vector3d axis = a.cross(b);
      double s = axis.norm(), c = a.dot(b);
      if (s > 1e-14) u = Eigen::AngleAxisd(std::atan2(s, c), axis / s) * u;
      u = (u - u.dot(tang[i]) * tang[i]).normalized();
    }
    Eigen::Vector3d v = tang[i].cross(u);
    Eigen::Matrix3d f;
    f.col(0) = u;
    f.col(1) = v;
    f.col(2) = tang[i];
    frames[i] = f;
  }
  return frames;
}

inline void check_self_intersection(const CenterlineTree& t) {
  auto par = t.parent_of();
  auto arc = t.arclength_from_root();
  const int n = t.node_count();
  // arclength between two nodes measured along the tree (through their
  // lowest common ancestor)
  auto path_distance = [&](int i, int j) {
    int a = i, b = j;
    while (a != b) {
      int& deeper = arc[a] >= arc[b] ? a : b;
      if (par[deeper] < 0) return std::numeric_limits<double>::infinity();
      deeper = par[deeper];
    }
    return arc[i] + arc[j] - 2.0 * arc[a];
  };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double clearance = t.nodes[i].r + t.nodes[j].r;
      double dist = (t.nodes[i].p - t.nodes[j].p).norm();
      if (dist >= clearance) continue;
      // Tubes naturally overlap along a branch and around junctions; with
      // curvature limits and opening angles >= 30 deg, legitimately
      // connected geometry keeps the straight-line distance at a sizable
      // fraction of the tree path length. A branch folding back onto the
      // tree shows a far smaller ratio.
      if (dist + 1e-9 >= 0.2 * path_distance(i, j)) continue;
      throw std::runtime_error("loft: centerline self-intersects near branch " +
                               std::to_string(t.branch_ids[i]) + " / " +
                               std::to_string(t.branch_ids[j]));
    }
}

}  // namespace detail

/// Lofts circular cross-sections of the local radius perpendicular to the
/// local tangent along every branch; child tubes are stitched to the parent
/// surface with triangles so the vertex graph is a single component.
/// ring_vertices is the number of vertices per cross-section ring.
inline SurfaceMesh loft_surface(const CenterlineTree& tree, int ring_vertices) {
  if (ring_vertices < 6) throw std::invalid_argument("loft: ring_vertices must be >= 6");
  detail::check_self_intersection(tree);

  SurfaceMesh mesh;
  const int K = ring_vertices;
  auto branches = tree.branch_nodes();
  auto par = tree.parent_of();

  std::map<int, std::pair<int, int>> branch_vertex_span;  // bid -> [first, last) vertex
  std::set<int> outlet_end_nodes(tree.outlets.begin(), tree.outlets.end());

  for (const auto& [bid, idx] : branches) {
    if (idx.size() < 2) continue;
    std::vector<Eigen::Vector3d> pts(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) pts[i] = tree.nodes[idx[i]].p;
    auto frames = detail::transport_frames(pts);

    int base = mesh.vertex_count();
    for (size_t i = 0; i < idx.size(); ++i) {
      double r = tree.nodes[idx[i]].r;
      for (int k = 0; k < K; ++k) {
        double a = 2.0 * std::numbers::pi * k / K;
        Eigen::Vector3d off = r * (std::cos(a) * frames[i].col(0) + std::sin(a) * frames[i].col(1));
        mesh.vertices.push_back(pts[i] + off);
      }
    }
    const int rings = static_cast<int>(idx.size());
    for (int i = 0; i + 1 < rings; ++i)
      for (int k = 0; k < K; ++k) {
        int a = base + i * K + k;
        int b = base + i * K + (k + 1) % K;
        int c = base + (i + 1) * K + k;
        int d = base + (i + 1) * K + (k + 1) % K;
        mesh.faces.push_back({a, b, c});
        mesh.faces.push_back({b, d, c});
      }
    branch_vertex_span[bid] = {base, mesh.vertex_count()};

    if (bid == tree.branch_ids[tree.root]) {
      for (int k = 0; k < K; ++k) mesh.inlet_vertex_ids.push_back(base + k);
    }
    if (outlet_end_nodes.count(idx.back())) {
      std::vector<int> ring;
      for (int k = 0; k < K; ++k) ring.push_back(base + (rings - 1) * K + k);
      mesh.outlet_vertex_ids.push_back(ring);
    }
  }

  // stitch each child's first ring to the nearest parent-branch vertices
  for (const auto& [bid, idx] : branches) {
    int attach = par[idx.front()];
    if (attach < 0) continue;
    int parent_bid = tree.branch_ids[attach];
    auto span = branch_vertex_span.at(parent_bid);
    auto self = branch_vertex_span.at(bid);
    for (int k = 0; k < K; ++k) {
      int c0 = self.first + k;
      int c1 = self.first + (k + 1) % K;
      int best = -1;
      double best_d = std::numeric_limits<double>::max();
      for (int v = span.first; v < span.second; ++v) {
        double d = (mesh.vertices[v] - mesh.vertices[c0]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = v;
        }
      }
      mesh.faces.push_back({c0, c1, best});
    }
  }

  return mesh;
}

}  // namespace vffr
