#pragma once

#include <array>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace vffr {

struct CenterlineNode {
  Eigen::Vector3d p;
  double r = 0.0;
};

/// Rooted tree of centerline nodes with per-node radii. Edges are
/// parent -> child index pairs; every node carries the id of the branch
/// it belongs to (a branch is a maximal bifurcation-free run of nodes).
struct CenterlineTree {
  std::vector<CenterlineNode> nodes;
  std::vector<std::array<int, 2>> edges;
  int root = 0;
  std::vector<int> outlets;
  std::vector<int> branch_ids;

  int node_count() const { return static_cast<int>(nodes.size()); }

  std::vector<int> parent_of() const {
    std::vector<int> par(nodes.size(), -1);
    for (const auto& e : edges) par[e[1]] = e[0];
    return par;
  }

  std::vector<std::vector<int>> children_of() const {
    std::vector<std::vector<int>> ch(nodes.size());
    for (const auto& e : edges) ch[e[0]].push_back(e[1]);
    return ch;
  }

  /// Ordered node indices per branch id, root-to-leaf direction.
  /// The branch's upstream attachment node (which carries the parent's
  /// branch id) is not included.
  std::map<int, std::vector<int>> branch_nodes() const {
    std::map<int, std::vector<int>> out;
    auto ch = children_of();
    // walk depth-first so nodes of one branch appear in path order
    std::vector<int> stack{root};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      out[branch_ids[v]].push_back(v);
      for (auto it = ch[v].rbegin(); it != ch[v].rend(); ++it) stack.push_back(*it);
    }
    return out;
  }

  /// Arclength from the root along tree edges, per node.
  std::vector<double> arclength_from_root() const {
    std::vector<double> s(nodes.size(), 0.0);
    auto ch = children_of();
    std::vector<int> stack{root};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int c : ch[v]) {
        s[c] = s[v] + (nodes[c].p - nodes[v].p).norm();
        stack.push_back(c);
      }
    }
    return s;
  }
};

inline void validate(const CenterlineTree& t) {
  const int n = t.node_count();
  if (n == 0) throw std::invalid_argument("centerline: empty tree");
  if (t.root < 0 || t.root >= n) throw std::invalid_argument("centerline: bad root index");
  std::vector<int> indeg(n, 0);
  for (const auto& e : t.edges) {
    if (e[0] < 0 || e[0] >= n || e[1] < 0 || e[1] >= n)
      throw std::invalid_argument("centerline: edge index out of range");
    indeg[e[1]]++;
  }
  if (indeg[t.root] != 0) throw std::invalid_argument("centerline: root has a parent");
  for (int i = 0; i < n; ++i) {
    if (i != t.root && indeg[i] != 1)
      throw std::invalid_argument("centerline: node " + std::to_string(i) +
                                  " has in-degree " + std::to_string(indeg[i]));
    if (!(t.nodes[i].r > 0.0))
      throw std::invalid_argument("centerline: non-positive radius at node " + std::to_string(i));
  }
  // reachability doubles as the acyclicity check (n-1 edges, all reachable)
  if (static_cast<int>(t.edges.size()) != n - 1)
    throw std::invalid_argument("centerline: edge count != n-1");
  auto ch = t.children_of();
  std::vector<int> stack{t.root};
  int seen = 0;
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    seen++;
    for (int c : ch[v]) stack.push_back(c);
  }
  if (seen != n) throw std::invalid_argument("centerline: graph not connected");
}

inline nlohmann::json to_json(const CenterlineTree& t) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& nd : t.nodes)
    j["nodes"].push_back({{"p", {nd.p.x(), nd.p.y(), nd.p.z()}}, {"r", nd.r}});
  j["edges"] = nlohmann::json::array();
  for (const auto& e : t.edges) j["edges"].push_back({e[0], e[1]});
  j["root"] = t.root;
  j["outlets"] = t.outlets;
  j["branch_ids"] = t.branch_ids;
  return j;
}

inline CenterlineTree centerline_from_json(const nlohmann::json& j) {
  CenterlineTree t;
  for (const auto& nd : j.at("nodes")) {
    CenterlineNode n;
    n.p = Eigen::Vector3d(nd.at("p")[0], nd.at("p")[1], nd.at("p")[2]);
    n.r = nd.at("r");
    t.nodes.push_back(n);
  }
  for (const auto& e : j.at("edges")) t.edges.push_back({e[0], e[1]});
  t.root = j.at("root");
  t.outlets = j.at("outlets").get<std::vector<int>>();
  t.branch_ids = j.at("branch_ids").get<std::vector<int>>();
  return t;
}

inline void save_centerline(const CenterlineTree& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << to_json(t).dump(1);
}

inline CenterlineTree load_centerline(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  f >> j;
  return centerline_from_json(j);
}

}  // namespace vffr
