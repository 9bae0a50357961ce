#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "vffr/nnet.hpp"

using namespace vffr;
using ad::Mat;

namespace {

/// Small 3-level model for fast unit checks.
ModelConfig toy_config(const std::string& variant) {
  ModelConfig c;
  c.variant = variant;
  c.evg_k = 8;
  SaBlockConfig b1;
  b1.sample_count = 16;
  b1.scales = {{0.3, 0.02, 4, {8, 8}}, {0.6, 0.04, 8, {8, 8}}};
  SaBlockConfig b2;
  b2.sample_count = 4;
  b2.use_evg = (variant == "evg");
  b2.scales = {{0.5, 0.05, 4, {8, 16}}, {0.9, 0.1, 8, {8, 16}}};
  SaBlockConfig b3;
  b3.group_all = true;
  b3.scales = {{0.0, 0.0, 0, {16, 16}}, {0.0, 0.0, 0, {16, 16}}};
  c.sa = {b1, b2, b3};
  c.fp_mlps = {{16}, {16}, {16}};
  c.head = {8, 1};
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

Mat labels_of(const FeaturedPointCloud& c) {
  Mat y(c.size(), 1);
  for (int i = 0; i < c.size(); ++i) y(i, 0) = c.label[i];
  return y;
}

}  // namespace

TEST_CASE("forward output shape and determinism") {
  for (const char* variant : {"msg", "evg"}) {
    auto cfg = toy_config(variant);
    auto mp = init_model(cfg, 5);
    auto cloud = random_cloud(40, 8);
    ad::Tape t1, t2;
    int o1 = model_forward(t1, mp, cloud);
    int o2 = model_forward(t2, mp, cloud);
    CHECK(t1.value(o1).rows() == 40);
    CHECK(t1.value(o1).cols() == 1);
    CHECK(t1.value(o1) == t2.value(o2));
  }
}

TEST_CASE("permuting input points permutes outputs") {
  auto cfg = toy_config("msg");
  auto mp = init_model(cfg, 3);
  auto cloud = random_cloud(64, 17);
  ad::Tape tape;
  Mat base = tape.value(model_forward(tape, mp, cloud));

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> perm(cloud.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::shuffle(perm.begin(), perm.end(), rng);
    FeaturedPointCloud shuffled;
    for (int i : perm) {
      shuffled.xyz.push_back(cloud.xyz[i]);
      shuffled.radius.push_back(cloud.radius[i]);
      shuffled.geodesic.push_back(cloud.geodesic[i]);
    }
    ad::Tape t2;
    Mat out = t2.value(model_forward(t2, mp, shuffled));
    for (size_t i = 0; i < perm.size(); ++i)
      CHECK(std::abs(out(i, 0) - base(perm[i], 0)) < 1e-6);
  }
}

TEST_CASE("zero final layer gives all-zero output") {
  auto cfg = toy_config("msg");
  auto mp = init_model(cfg, 4);
  mp.tensors[mp.tensors.size() - 2].setZero();  // head W
  mp.tensors[mp.tensors.size() - 1].setZero();  // head b
  auto cloud = random_cloud(32, 4);
  ad::Tape tape;
  Mat out = tape.value(model_forward(tape, mp, cloud));
  CHECK((out.array() == 0.0).all());
}

TEST_CASE("msg and evg variants share parameter shapes") {
  auto a = parameter_shapes(toy_config("msg"));
  auto b = parameter_shapes(toy_config("evg"));
  CHECK(a == b);
  auto da = parameter_shapes(default_model_config("msg", 4096));
  auto db = parameter_shapes(default_model_config("evg", 4096));
  CHECK(da == db);
}

TEST_CASE("default config has a 256-wide bottleneck and f_in 5") {
  auto cfg = default_model_config("msg", 4096);
  REQUIRE(cfg.sa.size() == 7);
  REQUIRE(cfg.fp_mlps.size() == 7);
  CHECK(cfg.f_in == 5);
  int bottleneck = 0;
  for (const auto& s : cfg.sa.back().scales) bottleneck += s.mlp.back();
  CHECK(bottleneck == 256);
  CHECK(cfg.sa.back().group_all);
  // sample counts strictly decrease
  for (size_t i = 1; i + 1 < cfg.sa.size(); ++i)
    CHECK(cfg.sa[i].sample_count < cfg.sa[i - 1].sample_count);
  // EVG uses MSG in the first block only
  auto evg = default_model_config("evg", 4096);
  CHECK_FALSE(evg.sa[0].use_evg);
  for (size_t i = 1; i + 1 < evg.sa.size(); ++i) CHECK(evg.sa[i].use_evg);
}

TEST_CASE("gradients match central differences on toy models") {
  for (const char* variant : {"msg", "evg"}) {
    auto cfg = toy_config(variant);
    auto mp = init_model(cfg, 11);
    auto cloud = random_cloud(48, 21);
    Mat y = labels_of(cloud);

    ad::Tape tape;
    std::vector<int> param_ids;
    int out = model_forward(tape, mp, cloud, &param_ids);
    int loss = tape.mse(out, y);
    tape.backward(loss);

    const double h = 1e-5;
    std::mt19937_64 rng(3);
    // spot-check a sample of entries in every parameter tensor
    for (size_t t = 0; t < mp.tensors.size(); ++t) {
      int n_checks = std::min<int>(3, static_cast<int>(mp.tensors[t].size()));
      for (int chk = 0; chk < n_checks; ++chk) {
        Eigen::Index i = rng() % mp.tensors[t].rows();
        Eigen::Index j = rng() % mp.tensors[t].cols();
        double save = mp.tensors[t](i, j);
        mp.tensors[t](i, j) = save + h;
        ad::Tape tp;
        double fp = tp.value(tp.mse(model_forward(tp, mp, cloud), y))(0, 0);
        mp.tensors[t](i, j) = save - h;
        ad::Tape tm;
        double fm = tm.value(tm.mse(model_forward(tm, mp, cloud), y))(0, 0);
        mp.tensors[t](i, j) = save;
        double fd = (fp - fm) / (2 * h);
        double an = tape.gradient(param_ids[t])(i, j);
        CHECK(std::abs(fd - an) <= 1e-4 * std::max({1.0, std::abs(fd), std::abs(an)}));
      }
    }
  }
}

TEST_CASE("overfit sanity: adam on one toy cloud cuts the loss") {
  auto cfg = toy_config("msg");
  auto mp = init_model(cfg, 7);
  auto cloud = random_cloud(48, 33);
  Mat y = labels_of(cloud);

  double first = -1.0, last = -1.0;
  for (int step = 0; step < 150; ++step) {
    ad::Tape tape;
    std::vector<int> ids;
    int out = model_forward(tape, mp, cloud, &ids);
    int loss = tape.mse(out, y);
    tape.backward(loss);
    if (step == 0) first = tape.value(loss)(0, 0);
    last = tape.value(loss)(0, 0);
    std::vector<Mat> grads;
    for (int id : ids) grads.push_back(tape.gradient(id));
    ad::adam_step(mp.pointers(), grads, mp.adam, 3e-3);
  }
  CHECK(last < 0.25 * first);
}

TEST_CASE("random rotation is a seeded isometry that spares scalars") {
  Eigen::Matrix3d rot = random_rotation_matrix(42);
  CHECK((rot.transpose() * rot - Eigen::Matrix3d::Identity()).norm() < 1e-12);
  CHECK(rot.determinant() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(random_rotation_matrix(42) == rot);
  CHECK(random_rotation_matrix(43) != rot);

  auto cloud = random_cloud(30, 5);
  auto rotated = random_rotation(cloud, 42);
  for (int i = 0; i < cloud.size(); ++i) {
    CHECK(rotated.radius[i] == cloud.radius[i]);
    CHECK(rotated.geodesic[i] == cloud.geodesic[i]);
    CHECK(rotated.label[i] == cloud.label[i]);
    for (int j = i + 1; j < cloud.size(); ++j) {
      double before = (cloud.xyz[i] - cloud.xyz[j]).norm();
      double after = (rotated.xyz[i] - rotated.xyz[j]).norm();
      CHECK(std::abs(before - after) < 1e-12);
    }
  }
}

TEST_CASE("checkpoint round-trip preserves parameters, config and adam state") {
  auto cfg = toy_config("evg");
  auto mp = init_model(cfg, 19);
  // populate adam state
  auto cloud = random_cloud(40, 2);
  ad::Tape tape;
  std::vector<int> ids;
  int out = model_forward(tape, mp, cloud, &ids);
  tape.backward(tape.mse(out, labels_of(cloud)));
  std::vector<Mat> grads;
  for (int id : ids) grads.push_back(tape.gradient(id));
  ad::adam_step(mp.pointers(), grads, mp.adam);

  auto path = std::filesystem::temp_directory_path() / "vffr_test_ckpt.bin";
  save_checkpoint(mp, path.string(), "{\"epoch\":3}");
  std::string state;
  auto back = load_checkpoint(path.string(), &state);
  CHECK(state == "{\"epoch\":3}");
  CHECK(back.config.variant == "evg");
  CHECK(back.adam.step == 1);
  REQUIRE(back.tensors.size() == mp.tensors.size());
  for (size_t i = 0; i < mp.tensors.size(); ++i) {
    CHECK(back.tensors[i] == mp.tensors[i]);
    CHECK(back.adam.m[i] == mp.adam.m[i]);
    CHECK(back.adam.v[i] == mp.adam.v[i]);
  }
  std::filesystem::remove(path);
}
