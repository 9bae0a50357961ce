#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "vffr/centerline.hpp"
#include "vffr/surface.hpp"
#include "vffr/vesselgen.hpp"

namespace vffr {

constexpr double kMmHgInPa = 133.322;

struct FluidModel {
  double viscosity = 3.5e-3;   // Pa*s
  double density = 1060.0;     // kg/m^3
  double loss_coefficient = 1.52;  // lumped expansion loss K_t
};

inline void validate(const FluidModel& f) {
  if (!(f.viscosity > 0) || !(f.density > 0) || f.loss_coefficient < 0)
    throw std::invalid_argument("fluid model: invalid constants");
}

/// Volumetric flow per edge, indexed like CenterlineTree::edges.
struct FlowAssignment {
  std::vector<double> edge_flow;  // m^3/s
};

/// Per-node (or per-vertex) kinematic pressure drops, m^2/s^2. Zero at the
/// inlet, non-increasing downstream.
struct PressureField {
  std::vector<double> drop;
  double inflow = 0.0;  // m^3/s tag
};

/// Splits the inflow down the tree, at each bifurcation proportionally to
/// the sum of outlet radii cubed over each child's subtree.
inline FlowAssignment split_flows(const CenterlineTree& tree, double q_in) {
  if (!(q_in > 0)) throw std::invalid_argument("split_flows: inflow must be > 0");
  validate(tree);
  const int n = tree.node_count();
  auto ch = tree.children_of();

  // sum of r^3 over outlets below (or at) each node, computed leaf-up
  std::vector<double> weight(n, 0.0);
  std::vector<int> order;
  order.reserve(n);
  std::vector<int> stack{tree.root};
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    order.push_back(v);
    for (int c : ch[v]) stack.push_back(c);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    int v = *it;
    if (ch[v].empty()) {
      weight[v] = tree.nodes[v].r * tree.nodes[v].r * tree.nodes[v].r;
    } else {
      for (int c : ch[v]) weight[v] += weight[c];
    }
  }

  std::vector<double> node_flow(n, 0.0);
  node_flow[tree.root] = q_in;
  FlowAssignment fa;
  fa.edge_flow.resize(tree.edges.size(), 0.0);
  std::map<std::pair<int, int>, size_t> edge_index;
  for (size_t e = 0; e < tree.edges.size(); ++e)
    edge_index[{tree.edges[e][0], tree.edges[e][1]}] = e;

  for (int v : order) {
    if (ch[v].empty()) continue;
    double total = weight[v];
    for (int c : ch[v]) {
      double q = node_flow[v] * (weight[c] / total);
      node_flow[c] = q;
      fa.edge_flow[edge_index[{v, c}]] = q;
    }
  }
  return fa;
}

/// Kinematic Poiseuille loss rate at radius r and flow q: 8*mu*q / (pi*r^4*rho).
inline double poiseuille_rate(double q, double r, const FluidModel& fluid) {
  double r4 = r * r * r * r;
  return 8.0 * fluid.viscosity * q / (std::numbers::pi * r4 * fluid.density);
}

/// Lumped stenosis expansion loss: K_t/2 * (A0/As - 1)^2 * (Q/A0)^2.
inline double stenosis_expansion_loss(double q, double r_base, double r_min, const FluidModel& fluid) {
  double a0 = std::numbers::pi * r_base * r_base;
  double as = std::numbers::pi * r_min * r_min;
  double ratio = a0 / as - 1.0;
  double v0 = q / a0;
  return fluid.loss_coefficient / 2.0 * ratio * ratio * v0 * v0;
}

inline double node_inflow_of(const CenterlineTree& tree, const FlowAssignment& flows, int node,
                             const std::vector<int>& par,
                             const std::map<std::pair<int, int>, size_t>& edge_index) {
  if (par[node] < 0) {
    // root: total of outgoing edges
    double q = 0.0;
    for (size_t e = 0; e < tree.edges.size(); ++e)
      if (tree.edges[e][0] == node) q += flows.edge_flow[e];
    return q;
  }
  return flows.edge_flow[edge_index.at({par[node], node})];
}

/// Stationary reduced-order solve: viscous Poiseuille losses accumulated by
/// trapezoidal integration along every edge, plus one lumped expansion loss
/// at the distal end of each stenotic segment. Drops are 0 at the root and
/// non-increasing downstream.
inline PressureField solve_pressure_drops(const CenterlineTree& tree, const FlowAssignment& flows,
                                          const FluidModel& fluid,
                                          const std::vector<StenosisSpec>& stenoses = {}) {
  validate(fluid);
  if (flows.edge_flow.size() != tree.edges.size())
    throw std::invalid_argument("solve: flow assignment does not match tree edges");
  for (int i = 0; i < tree.node_count(); ++i)
    if (!(tree.nodes[i].r > 0))
      throw std::runtime_error("solve: non-positive radius at node " + std::to_string(i));

  // extra lumped loss keyed to the node at the distal end of each stenosis
  auto branches = tree.branch_nodes();
  std::map<int, std::vector<double>> arcs;
  for (const auto& [bid, idx] : branches) {
    std::vector<double> a(idx.size(), 0.0);
    for (size_t i = 1; i < idx.size(); ++i)
      a[i] = a[i - 1] + (tree.nodes[idx[i]].p - tree.nodes[idx[i - 1]].p).norm();
    arcs[bid] = a;
  }
  auto par = tree.parent_of();
  std::map<std::pair<int, int>, size_t> edge_index;
  for (size_t e = 0; e < tree.edges.size(); ++e)
    edge_index[{tree.edges[e][0], tree.edges[e][1]}] = e;

  std::vector<double> lumped(tree.node_count(), 0.0);
  for (const auto& s : stenoses) {
    const auto& idx = branches.at(s.branch_id);
    const auto& a = arcs.at(s.branch_id);
    double end = s.start_arclength + s.length;
    int distal = idx.back();
    double r_min = std::numeric_limits<double>::max();
    double r_base = 0.0;
    for (size_t i = 0; i < idx.size(); ++i) {
      double local = a[i] - s.start_arclength;
      if (local < 0.0) {
        r_base = tree.nodes[idx[i]].r;  // last radius proximal to the segment
        continue;
      }
      if (local <= s.length) r_min = std::min(r_min, tree.nodes[idx[i]].r);
      if (a[i] >= end) {
        distal = idx[i];
        break;
      }
    }
    if (r_base == 0.0) r_base = tree.nodes[idx.front()].r;
    if (r_min == std::numeric_limits<double>::max()) r_min = r_base;
    double q = node_inflow_of(tree, flows, distal, par, edge_index);
    lumped[distal] += stenosis_expansion_loss(q, r_base, r_min, fluid);
  }

  PressureField field;
  field.drop.assign(tree.node_count(), 0.0);
  auto ch = tree.children_of();
  std::vector<int> stack{tree.root};
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    for (int c : ch[v]) {
      double q = flows.edge_flow[edge_index[{v, c}]];
      double ds = (tree.nodes[c].p - tree.nodes[v].p).norm();
      double loss = 0.5 * ds * (poiseuille_rate(q, tree.nodes[v].r, fluid) +
                                poiseuille_rate(q, tree.nodes[c].r, fluid));
      field.drop[c] = field.drop[v] - loss - lumped[c];
      stack.push_back(c);
    }
  }
  return field;
}

/// Nearest-centerline-node transfer of node drops to mesh vertices.
/// Ties go to the lower node index.
inline PressureField map_drops_to_surface(const SurfaceMesh& mesh, const CenterlineTree& tree,
                                          const PressureField& node_drops) {
  if (node_drops.drop.size() != static_cast<size_t>(tree.node_count()))
    throw std::invalid_argument("map_drops: field does not match tree");
  PressureField out;
  out.inflow = node_drops.inflow;
  out.drop.resize(mesh.vertex_count());
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    int best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (int i = 0; i < tree.node_count(); ++i) {
      double d = (mesh.vertices[v] - tree.nodes[i].p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    out.drop[v] = node_drops.drop[best];
  }
  return out;
}

struct VffrField {
  std::vector<double> vffr;
  double p_in_mmhg = 0.0;
  bool degenerate = false;  // some point reached non-positive pressure
};

/// vFFR(x) = (p_in + drop_mmHg(x)) / p_in, with the kinematic drop converted
/// through the same density used by the solver.
inline VffrField compute_vffr(const PressureField& drops, double p_in_mmhg, const FluidModel& fluid) {
  if (!(p_in_mmhg > 0)) throw std::invalid_argument("compute_vffr: p_in must be > 0");
  VffrField out;
  out.p_in_mmhg = p_in_mmhg;
  out.vffr.resize(drops.drop.size());
  for (size_t i = 0; i < drops.drop.size(); ++i) {
    double drop_mmhg = drops.drop[i] * fluid.density / kMmHgInPa;
    double v = (p_in_mmhg + drop_mmhg) / p_in_mmhg;
    out.vffr[i] = v;
    if (v <= 0.0) out.degenerate = true;
  }
  return out;
}

}  // namespace vffr
