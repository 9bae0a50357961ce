#include <doctest.h>

#include <cmath>
#include <set>

#include "vffr/vesselgen.hpp"

using namespace vffr;

namespace {

GeneratorConfig desk_config() {
  GeneratorConfig c;
  return c;
}

}  // namespace

TEST_CASE("zero bifurcations gives a single unbranched path") {
  GeneratorConfig cfg = desk_config();
  cfg.bifurcations_min = cfg.bifurcations_max = 0;
  auto tree = generate_centerline(cfg, 7);
  CHECK(tree.outlets.size() == 1);
  auto ch = tree.children_of();
  for (int i = 0; i < tree.node_count(); ++i) CHECK(ch[i].size() <= 1);
  for (int b : tree.branch_ids) CHECK(b == 0);
}

TEST_CASE("murray's law holds at every bifurcation by recomputation") {
  GeneratorConfig cfg = desk_config();
  for (uint64_t seed : {1, 2, 3, 42, 1000}) {
    auto tree = generate_centerline(cfg, seed);
    auto ch = tree.children_of();
    int checked = 0;
    for (int v = 0; v < tree.node_count(); ++v) {
      if (ch[v].size() < 2) continue;
      double rp3 = std::pow(tree.nodes[v].r, 3);
      double sum = 0.0;
      for (int c : ch[v]) sum += std::pow(tree.nodes[c].r, 3);
      CHECK(std::abs(rp3 - sum) / rp3 < 1e-9);
      checked++;
    }
    CHECK(checked >= cfg.bifurcations_min);
  }
}

TEST_CASE("same config and seed reproduce the node list bit for bit") {
  GeneratorConfig cfg = desk_config();
  auto a = generate_centerline(cfg, 123);
  auto b = generate_centerline(cfg, 123);
  REQUIRE(a.node_count() == b.node_count());
  for (int i = 0; i < a.node_count(); ++i) {
    CHECK(a.nodes[i].p == b.nodes[i].p);
    CHECK(a.nodes[i].r == b.nodes[i].r);
  }
  CHECK(a.edges == b.edges);
  CHECK(a.branch_ids == b.branch_ids);
}

TEST_CASE("radii taper outside stenotic segments") {
  auto tree = generate_centerline(desk_config(), 99);
  auto par = tree.parent_of();
  auto ch = tree.children_of();
  for (int v = 0; v < tree.node_count(); ++v)
    if (par[v] >= 0) CHECK(tree.nodes[v].r <= tree.nodes[par[v]].r + 1e-15);
}

TEST_CASE("node spacing is bounded by the configured step") {
  GeneratorConfig cfg = desk_config();
  auto tree = generate_centerline(cfg, 5);
  auto par = tree.parent_of();
  for (int v = 0; v < tree.node_count(); ++v)
    if (par[v] >= 0)
      CHECK((tree.nodes[v].p - tree.nodes[par[v]].p).norm() <= cfg.node_step * 1.5);
}

TEST_CASE("invalid config is rejected") {
  GeneratorConfig cfg = desk_config();
  cfg.branch_length = {0.08, 0.03};
  CHECK_THROWS_AS(generate_centerline(cfg, 1), std::invalid_argument);
}

TEST_CASE("stenosis: grade 0 leaves the tree unchanged") {
  auto tree = generate_centerline(desk_config(), 11);
  StenosisSpec s;
  s.branch_id = 0;
  s.start_arclength = 0.005;
  s.length = 0.01;
  s.severity_grade = 0.0;
  auto out = insert_stenoses(tree, {s});
  for (int i = 0; i < tree.node_count(); ++i) CHECK(out.nodes[i].r == tree.nodes[i].r);
}

TEST_CASE("stenosis: grade 50 on 2 mm baseline narrows to 1 mm") {
  // straight synthetic branch with constant radius
  CenterlineTree tree;
  const int n = 41;
  for (int i = 0; i < n; ++i) {
    tree.nodes.push_back({{i * 0.0005, 0, 0}, 0.002});
    tree.branch_ids.push_back(0);
    if (i > 0) tree.edges.push_back({i - 1, i});
  }
  tree.root = 0;
  tree.outlets = {n - 1};

  StenosisSpec s;
  s.branch_id = 0;
  s.start_arclength = 0.005;
  s.length = 0.01;
  s.severity_grade = 50.0;
  auto out = insert_stenoses(tree, {s});
  double rmin = 1e9;
  for (const auto& nd : out.nodes) rmin = std::min(rmin, nd.r);
  CHECK(rmin == doctest::Approx(0.001).epsilon(1e-9));
  // the cosine profile formula, independently evaluated at the midpoint
  CHECK(stenosis_profile_factor(0.004, 0.008, 60.0) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(stenosis_profile_factor(0.0, 0.008, 60.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stenosis_profile_factor(0.008, 0.008, 60.0) == doctest::Approx(1.0).epsilon(1e-12));
  // locality: radii outside the segment untouched
  for (int i = 0; i < n; ++i) {
    double arc = i * 0.0005;
    if (arc < s.start_arclength || arc > s.start_arclength + s.length)
      CHECK(out.nodes[i].r == tree.nodes[i].r);
  }
}

TEST_CASE("stenosis: overlap and out-of-range rejected") {
  auto tree = generate_centerline(desk_config(), 17);
  StenosisSpec a{0, 0.005, 0.010, 40.0, "cosine"};
  StenosisSpec b{0, 0.010, 0.010, 40.0, "cosine"};
  CHECK_THROWS_AS(insert_stenoses(tree, {a, b}), std::invalid_argument);
  StenosisSpec c{0, 0.0, 10.0, 40.0, "cosine"};
  CHECK_THROWS_AS(insert_stenoses(tree, {c}), std::out_of_range);
}

TEST_CASE("sampled stenoses fit their branches") {
  GeneratorConfig cfg = desk_config();
  auto tree = generate_centerline(cfg, 31);
  auto specs = sample_stenoses(tree, cfg, 32);
  CHECK(!specs.empty());
  CHECK_NOTHROW(insert_stenoses(tree, specs));
}
