#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "vffr/pipeline.hpp"

using namespace vffr;
using ad::Mat;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("vffr_pipeline_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Tiny vessels and meshes so dataset tests stay fast.
RunConfig small_run_config(const fs::path& root, int n_samples, int n_train, int n_test) {
  RunConfig c = desk_run_config();
  c.dataset_dir = (root / "dataset").string();
  c.run_dir = (root / "run").string();
  c.n_samples = n_samples;
  c.n_train = n_train;
  c.n_val = 0;
  c.n_test = n_test;
  c.ring_vertices = 8;
  c.subsample = 512;  // tiny meshes pass through; model still needs >= 512 here
  c.epochs = 2;
  c.repetitions = 2;
  c.seed = 11;
  c.generator.branch_length = {0.010, 0.014};
  c.generator.root_radius = {0.0018, 0.0022};
  c.generator.bifurcations_min = 1;
  c.generator.bifurcations_max = 1;
  c.generator.node_step = 0.001;
  c.generator.stenoses_min = 1;
  c.generator.stenoses_max = 1;
  c.generator.stenosis_length = {0.002, 0.004};
  return c;
}

ModelConfig toy_config() {
  ModelConfig c;
  SaBlockConfig b1;
  b1.sample_count = 8;
  b1.scales = {{0.3, 0.02, 4, {8, 8}}, {0.6, 0.04, 8, {8, 8}}};
  SaBlockConfig b2;
  b2.group_all = true;
  b2.scales = {{0.0, 0.0, 0, {16, 16}}, {0.0, 0.0, 0, {16, 16}}};
  c.sa = {b1, b2};
  c.fp_mlps = {{16}, {16}};
  c.head = {8, 1};
  c.evg_k = 8;
  return c;
}

FeaturedPointCloud random_cloud(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  FeaturedPointCloud c;
  for (int i = 0; i < n; ++i) {
    c.xyz.push_back({u(rng), u(rng), u(rng)});
    c.radius.push_back(std::abs(u(rng)) + 0.01);
    c.geodesic.push_back(std::abs(u(rng)));
    c.label.push_back(u(rng));
  }
  return c;
}

}  // namespace

TEST_CASE("toml subset parses sections, types and comments") {
  auto t = TomlTable::parse(
      "top = 1\n"
      "[run]\n"
      "name = \"desk # run\"  # trailing comment\n"
      "count = 42\n"
      "rate = 0.5\n"
      "flag = true\n"
      "list = [1, 2.5, 3]\n");
  CHECK(t.get_int("top", 0) == 1);
  CHECK(t.get_string("run.name", "") == "desk # run");
  CHECK(t.get_int("run.count", 0) == 42);
  CHECK(t.get_double("run.rate", 0) == 0.5);
  CHECK(t.get_bool("run.flag", false));
  CHECK(t.get_double_array("run.list", {}) == std::vector<double>{1.0, 2.5, 3.0});
  CHECK(t.get_int("missing", 7) == 7);
  CHECK_FALSE(t.has("missing"));

  CHECK_THROWS(TomlTable::parse("a = 1\na = 2\n"));
  CHECK_THROWS(TomlTable::parse("just a line\n"));
  CHECK_THROWS(TomlTable::parse("[broken\n"));
  CHECK_THROWS_AS((void)t.get_int("run.rate", 0), std::invalid_argument);
  CHECK_THROWS_AS((void)t.get_bool("run.count", false), std::invalid_argument);
}

TEST_CASE("run config defaults and validation") {
  RunConfig c;
  CHECK(c.n_samples == 1700);
  CHECK(c.n_train == 1500);
  CHECK(c.n_val == 100);
  CHECK(c.n_test == 100);
  CHECK(c.epochs == 500);
  CHECK(c.batch_size == 8);
  CHECK(c.learning_rate == 0.001);
  CHECK(c.subsample == 20000);
  CHECK(c.repetitions == 10);
  CHECK(c.p_in_mmhg == std::vector<double>{80.0, 100.0, 120.0});
  CHECK_NOTHROW(validate(c));

  RunConfig d = desk_run_config();
  CHECK(d.n_samples == 35);
  CHECK(d.n_train == 30);
  CHECK(d.n_test == 5);
  CHECK(d.subsample == 4096);
  CHECK(d.epochs == 200);
  CHECK_NOTHROW(validate(d));

  d.n_test = 6;
  CHECK_THROWS_AS(validate(d), std::invalid_argument);
  RunConfig e;
  e.variant = "cnn";
  CHECK_THROWS_AS(validate(e), std::invalid_argument);

  auto t = TomlTable::parse(
      "[run]\ndesk = true\nvariant = \"evg\"\nseed = 9\n[train]\nepochs = 3\n");
  RunConfig f = run_config_from_toml(t);
  CHECK(f.n_samples == 35);
  CHECK(f.variant == "evg");
  CHECK(f.seed == 9);
  CHECK(f.epochs == 3);
}

TEST_CASE("chunk sizes partition exactly and stay balanced") {
  CHECK(chunk_sizes(40000, 20000) == std::vector<int>{20000, 20000});
  CHECK(chunk_sizes(5, 20) == std::vector<int>{5});
  for (int n : {1, 7, 64, 100, 4097, 12289}) {
    for (int chunk : {1, 3, 16, 4096}) {
      auto sizes = chunk_sizes(n, chunk);
      int sum = 0;
      for (int s : sizes) {
        CHECK(s <= chunk);
        CHECK(s >= 1);
        sum += s;
      }
      CHECK(sum == n);
      // balanced: sizes differ by at most one
      CHECK(*std::max_element(sizes.begin(), sizes.end()) -
                *std::min_element(sizes.begin(), sizes.end()) <=
            1);
    }
  }
}

TEST_CASE("drop metrics reproduce hand-computed values") {
  // y = [0, 2], y_hat = [1, 1], y_max = 2
  auto m = drop_metrics({1.0, 1.0}, {0.0, 2.0}, 2.0);
  CHECK(m.mae == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.nmae == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.r2 == doctest::Approx(0.0).epsilon(1e-12));  // prediction equals mean(y)

  std::vector<double> y{-1.0, -2.0, -3.5, 0.0, -0.5};
  std::vector<double> yh{-1.2, -1.7, -3.5, 0.4, -0.6};
  // hand-computed: sum |e| = 0.2+0.3+0+0.4+0.1 = 1.0; mean(y) = -1.4
  // ss_res = 0.04+0.09+0+0.16+0.01 = 0.30
  // ss_tot = 0.16+0.36+4.41+1.96+0.81 = 7.70
  double y_max = 3.5;
  auto h = drop_metrics(yh, y, y_max);
  CHECK(std::abs(h.mae - 0.2) < 1e-12);
  CHECK(std::abs(h.nmae - 0.2 / 3.5) < 1e-12);
  CHECK(std::abs(h.r2 - (1.0 - 0.30 / 7.70)) < 1e-12);

  auto perfect = drop_metrics(y, y, y_max);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.nmae == 0.0);
  CHECK(perfect.r2 == 1.0);

  CHECK_THROWS_AS(drop_metrics({1.0}, {1.0, 2.0}, 1.0), std::invalid_argument);
}

TEST_CASE("quantile interpolates and handles single elements") {
  CHECK(quantile({3.0}, 0.5) == 3.0);
  CHECK(quantile({3.0}, 0.75) == 3.0);
  CHECK(quantile({1.0, 2.0, 3.0, 4.0}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.0) == 1.0);
  CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 1.0) == 4.0);
}

TEST_CASE("reconstruct_vffr basics") {
  FluidModel fluid;
  std::vector<double> zero(10, 0.0);
  auto v = reconstruct_vffr(zero, 100.0, fluid);
  for (double x : v.vffr) CHECK(x == 1.0);

  std::vector<double> drops{-5.0, -1.0, 0.0};
  auto lo = reconstruct_vffr(drops, 80.0, fluid);
  auto hi = reconstruct_vffr(drops, 120.0, fluid);
  for (int i = 0; i < 2; ++i) CHECK(hi.vffr[i] > lo.vffr[i]);  // monotone toward 1
  CHECK(hi.vffr[2] == 1.0);
}

TEST_CASE("dataset build: manifest split, determinism, inlet boundary") {
  auto root = temp_dir("build");
  RunConfig cfg = small_run_config(root, 4, 3, 1);
  Manifest m = build_dataset(cfg);
  REQUIRE(m.samples.size() == 4);
  int train = 0, test = 0;
  for (const auto& e : m.samples) {
    if (e.split == "train") train++;
    if (e.split == "test") test++;
  }
  CHECK(train == 3);
  CHECK(test == 1);

  for (const auto& e : m.samples) {
    auto s = load_sample(cfg.dataset_dir + "/" + e.dir);
    REQUIRE_FALSE(s.meta.inlet_vertex_ids.empty());
    for (double q : dataset_inflows_ml_s()) {
      const auto& drops = s.mesh.channels.at(drop_channel_name(q));
      for (int v : s.meta.inlet_vertex_ids) CHECK(drops[v] == 0.0);
      for (double d : drops) CHECK(d <= 0.0);
    }
    CHECK(s.mesh.channels.count("radius") == 1);
    CHECK(s.mesh.channels.count("geodesic") == 1);
  }

  // byte-identical rebuild
  RunConfig cfg2 = cfg;
  cfg2.dataset_dir = (root / "dataset2").string();
  build_dataset(cfg2);
  for (const auto& e : m.samples)
    for (const char* file : {"centerline.json", "mesh.ply", "meta.json"})
      CHECK(slurp(fs::path(cfg.dataset_dir) / e.dir / file) ==
            slurp(fs::path(cfg2.dataset_dir) / e.dir / file));
  CHECK(slurp(fs::path(cfg.dataset_dir) / "manifest.json") ==
        slurp(fs::path(cfg2.dataset_dir) / "manifest.json"));

  // featured cloud carries the chosen inflow's drops as labels
  auto s0 = load_sample(cfg.dataset_dir + "/" + m.samples[0].dir);
  auto cloud = featured_cloud(s0, 5.0);
  CHECK(cloud.size() == s0.mesh.vertex_count());
  CHECK(cloud.label == s0.mesh.channels.at("drop_q5"));
  CHECK_THROWS(featured_cloud(s0, 4.0));

  fs::remove_all(root);
}

TEST_CASE("constant-output model predicts the constant through chunked inference") {
  auto mp = init_model(toy_config(), 3);
  mp.tensors[mp.tensors.size() - 2].setZero();
  mp.tensors[mp.tensors.size() - 1].setConstant(2.5);
  auto cloud = random_cloud(50, 9);
  double label_scale = 4.0;
  auto pred = infer_drops(mp, cloud, 16, 3, 77, label_scale);
  REQUIRE(pred.size() == 50);
  for (double p : pred) CHECK(p == doctest::Approx(2.5 * 4.0).epsilon(1e-12));

  auto again = infer_drops(mp, cloud, 16, 3, 77, label_scale);
  CHECK(pred == again);
  auto other_seed = infer_drops(mp, cloud, 16, 3, 78, label_scale);
  CHECK(pred == other_seed);  // constant model: partition-independent
}

TEST_CASE("inference covers every point once per repetition") {
  // a model whose prediction depends on chunk composition would differ between
  // seeds; here we only verify the partition bookkeeping via chunk_sizes plus
  // a non-constant model giving identical results for identical seeds
  auto mp = init_model(toy_config(), 5);
  auto cloud = random_cloud(40, 4);
  auto a = infer_drops(mp, cloud, 16, 10, 123, 1.0);
  auto b = infer_drops(mp, cloud, 16, 10, 123, 1.0);
  CHECK(a == b);
  auto c = infer_drops(mp, cloud, 16, 10, 124, 1.0);
  CHECK(a != c);
}

TEST_CASE("training: lr 0 freezes parameters, fixed seed fixes the loss sequence") {
  auto cfg = toy_config();
  auto mp = init_model(cfg, 21);
  std::vector<FeaturedPointCloud> train{random_cloud(32, 1), random_cloud(32, 2)};

  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 2;
  opt.subsample = 24;
  opt.learning_rate = 0.0;
  opt.seed = 5;
  opt.label_scale = label_scale_of(train);
  auto before = mp.tensors;
  train_model(mp, train, {}, opt);
  for (size_t i = 0; i < before.size(); ++i) CHECK(mp.tensors[i] == before[i]);

  opt.learning_rate = 0.01;
  auto m1 = init_model(cfg, 21);
  auto m2 = init_model(cfg, 21);
  auto l1 = train_model(m1, train, {}, opt);
  auto l2 = train_model(m2, train, {}, opt);
  CHECK(l1.train_mse == l2.train_mse);
  for (size_t i = 0; i < m1.tensors.size(); ++i) CHECK(m1.tensors[i] == m2.tensors[i]);
}

TEST_CASE("training: single sample overfit shrinks the loss") {
  auto mp = init_model(toy_config(), 2);
  std::vector<FeaturedPointCloud> train{random_cloud(32, 6)};
  TrainOptions opt;
  opt.epochs = 400;
  opt.batch_size = 1;
  opt.subsample = 32;  // full cloud each step
  opt.learning_rate = 0.01;
  opt.augment = false;
  opt.seed = 3;
  opt.label_scale = label_scale_of(train);
  auto log = train_model(mp, train, {}, opt);
  CHECK(log.train_mse.back() < 0.05 * log.train_mse.front());
  CHECK(log.best_epoch >= 0);
}

TEST_CASE("evaluate: feeding labels back gives perfect scores") {
  auto root = temp_dir("oracle");
  RunConfig cfg = small_run_config(root, 2, 1, 1);
  build_dataset(cfg);
  auto m = load_manifest(cfg.dataset_dir);

  std::vector<DatasetSample> samples;
  std::vector<int> ids;
  for (const auto& e : m.samples) {
    samples.push_back(load_sample(cfg.dataset_dir + "/" + e.dir));
    ids.push_back(e.id);
  }
  std::vector<std::vector<double>> preds;
  for (const auto& s : samples) preds.push_back(s.mesh.channels.at("drop_q3"));

  auto rep = evaluate_inflow(samples, ids, preds, 3.0, {80.0, 100.0, 120.0}, "msg");
  for (const auto& ps : rep.per_sample) {
    CHECK(ps.mae == 0.0);
    CHECK(ps.nmae == 0.0);
    CHECK(ps.r2 == 1.0);
  }
  for (const auto& [p, mae] : rep.vffr_mae) CHECK(mae == 0.0);
  int lesion_pairs = 0;
  for (const auto& [p, c] : rep.lesion_cls) {
    CHECK(c.accuracy() == 1.0);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    lesion_pairs += c.total();
  }
  CHECK(lesion_pairs == static_cast<int>(rep.lesions.size()));
  for (const auto& l : rep.lesions) CHECK(l.gt_vffr == l.pred_vffr);

  fs::remove_all(root);
}

TEST_CASE("report files: empty set and populated set") {
  auto root = temp_dir("report");
  InflowReport empty;
  empty.inflow_ml_s = 3.0;
  empty.variant = "msg";
  write_report({empty}, (root / "report").string());
  auto summary = slurp(root / "report" / "summary.md");
  CHECK(summary.find("no samples") != std::string::npos);

  // populated: reuse the oracle path
  RunConfig cfg = small_run_config(root, 2, 1, 1);
  build_dataset(cfg);
  auto m = load_manifest(cfg.dataset_dir);
  std::vector<DatasetSample> samples;
  std::vector<int> ids;
  for (const auto& e : m.samples) {
    samples.push_back(load_sample(cfg.dataset_dir + "/" + e.dir));
    ids.push_back(e.id);
  }
  std::vector<std::vector<double>> preds;
  for (const auto& s : samples) preds.push_back(s.mesh.channels.at("drop_q3"));
  auto rep = evaluate_inflow(samples, ids, preds, 3.0, {100.0}, "msg");
  write_report({rep}, (root / "report2").string());
  CHECK(fs::exists(root / "report2" / "summary.md"));
  CHECK(fs::exists(root / "report2" / "scatter_q3.csv"));
  CHECK(fs::exists(root / "report2" / "grade_errors.csv"));
  CHECK(fs::exists(root / "report2" / "metrics.json"));

  // one sample per metric -> mean == median == p75
  if (rep.per_sample.size() == 2) {
    // with two samples the aggregates still lie between min and max
    CHECK(rep.mean.mae >= std::min(rep.per_sample[0].mae, rep.per_sample[1].mae));
    CHECK(rep.mean.mae <= std::max(rep.per_sample[0].mae, rep.per_sample[1].mae));
  }
  auto scatter = slurp(root / "report2" / "scatter_q3.csv");
  size_t lines = std::count(scatter.begin(), scatter.end(), '\n');
  CHECK(lines == rep.lesions.size() + 1);  // header + one row per lesion pair

  fs::remove_all(root);
}

TEST_CASE("lesion measurement window sits distal to the stenosis") {
  auto root = temp_dir("lesion");
  RunConfig cfg = small_run_config(root, 1, 1, 0);
  build_dataset(cfg);
  auto m = load_manifest(cfg.dataset_dir);
  auto s = load_sample(cfg.dataset_dir + "/" + m.samples[0].dir);
  auto nearest = nearest_node_ids(s.tree, s.mesh);
  auto branches = s.tree.branch_nodes();
  for (const auto& sten : s.meta.stenoses) {
    auto verts = lesion_measurement_vertices(s, nearest, sten);
    REQUIRE_FALSE(verts.empty());
    const auto& idx = branches.at(sten.branch_id);
    std::vector<double> arc(idx.size(), 0.0);
    for (size_t i = 1; i < idx.size(); ++i)
      arc[i] = arc[i - 1] + (s.tree.nodes[idx[i]].p - s.tree.nodes[idx[i - 1]].p).norm();
    double w0 = sten.start_arclength + sten.length;
    for (int v : verts) {
      // the mapped node lies on the stenosed branch at or past the stenosis end
      auto pos = std::find(idx.begin(), idx.end(), nearest[v]);
      REQUIRE(pos != idx.end());
      double a = arc[std::distance(idx.begin(), pos)];
      CHECK(a >= w0 - 1e-9);
    }
  }
  fs::remove_all(root);
}

TEST_CASE("end-to-end micro run: train, evaluate, deterministic report") {
  auto root = temp_dir("e2e");
  RunConfig cfg = small_run_config(root, 3, 2, 1);
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.inflows_ml_s = {3.0};
  cfg.p_in_mmhg = {100.0};
  build_dataset(cfg);
  run_train(cfg);
  CHECK(fs::exists(checkpoint_path(cfg, 3.0)));
  CHECK(fs::exists(fs::path(cfg.run_dir) / "train_msg_q3.csv"));
  auto reports = run_evaluate(cfg);
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].per_sample.size() == 1);
  CHECK(fs::exists(fs::path(cfg.run_dir) / "report" / "metrics.json"));
  auto metrics1 = slurp(fs::path(cfg.run_dir) / "report" / "metrics.json");

  // repeat in a fresh directory: identical metrics bytes
  RunConfig cfg2 = cfg;
  cfg2.dataset_dir = (root / "dataset_b").string();
  cfg2.run_dir = (root / "run_b").string();
  build_dataset(cfg2);
  run_train(cfg2);
  run_evaluate(cfg2);
  auto metrics2 = slurp(fs::path(cfg2.run_dir) / "report" / "metrics.json");
  CHECK(metrics1 == metrics2);

  fs::remove_all(root);
}
