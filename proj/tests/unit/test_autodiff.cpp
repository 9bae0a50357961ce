#include <doctest.h>

#include <random>

#include "vffr/autodiff.hpp"

using namespace vffr;
using ad::Mat;

TEST_CASE("gradient of x^2 at x = 3 is 6") {
  ad::Tape tape;
  Mat x(1, 1);
  x << 3.0;
  int xi = tape.leaf(x, true);
  int sq = tape.matmul(xi, xi);
  tape.backward(sq);
  CHECK(tape.gradient(xi)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("mse value and gradient") {
  ad::Tape tape;
  Mat pred(3, 1), target(3, 1);
  pred << 1, 2, 3;
  target << 0, 2, 5;
  int p = tape.leaf(pred, true);
  int loss = tape.mse(p, target);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx((1.0 + 0.0 + 4.0) / 3.0).epsilon(1e-15));
  tape.backward(loss);
  CHECK(tape.gradient(p)(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(tape.gradient(p)(1, 0) == 0.0);
  CHECK(tape.gradient(p)(2, 0) == doctest::Approx(-4.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("unused parameters get zero gradient") {
  ad::Tape tape;
  Mat a(1, 1), b(1, 1);
  a << 2.0;
  b << 5.0;
  int ai = tape.leaf(a, true);
  int bi = tape.leaf(b, true);
  int loss = tape.mse(ai, Mat::Zero(1, 1));
  tape.backward(loss);
  CHECK(tape.gradient(bi)(0, 0) == 0.0);
}

TEST_CASE("finite differences validate a composite graph") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat x(6, 4), w1(7, 5), b1(1, 5), w2(5, 2), b2(1, 2);
  for (auto* m : {&x, &w1, &b1, &w2, &b2})
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = g(rng);
  Mat target = Mat::Ones(3, 2);
  std::vector<int> gather_idx = {0, 2, 4, 1, 3, 5, 0, 1, 2};  // 9 rows = 3 groups of 3
  Mat wts(3, 3);
  wts << 0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6;
  std::vector<int> widx = {0, 1, 2, 1, 2, 0, 2, 0, 1};

  auto run = [&](const Mat& w1v, const Mat& b1v, const Mat& w2v, const Mat& b2v, ad::Tape& tape,
                 int* w1_id = nullptr) {
    int xi = tape.leaf(x, false);
    int rel = tape.leaf(Mat::Constant(6, 3, 0.25), false);
    int cc = tape.concat_cols(rel, xi);  // 6 x 7
    int id_w1 = tape.leaf(w1v, true);
    if (w1_id) *w1_id = id_w1;
    int h = tape.relu(tape.add_bias(tape.matmul(cc, id_w1), tape.leaf(b1v, true)));  // 6 x 5
    int gathered = tape.gather_rows(h, gather_idx);                                  // 9 x 5
    int pooled = tape.group_max(gathered, 3);                                        // 3 x 5
    int interp = tape.interp3(pooled, wts, widx);                                    // 3 x 5
    int out = tape.add_bias(tape.matmul(interp, tape.leaf(w2v, true)), tape.leaf(b2v, true));
    return tape.mse(out, target);
  };

  ad::Tape tape;
  int w1_id = -1;
  int loss = run(w1, b1, w2, b2, tape, &w1_id);
  tape.backward(loss);

  const double h = 1e-5;
  int checked = 0;
  for (Eigen::Index i = 0; i < w1.rows(); ++i)
    for (Eigen::Index j = 0; j < w1.cols(); ++j) {
      Mat wp = w1, wm = w1;
      wp(i, j) += h;
      wm(i, j) -= h;
      ad::Tape tp, tm;
      double fp = tp.value(run(wp, b1, w2, b2, tp))(0, 0);
      double fm = tm.value(run(wm, b1, w2, b2, tm))(0, 0);
      double fd = (fp - fm) / (2 * h);
      double an = tape.gradient(w1_id)(i, j);
      CHECK(std::abs(fd - an) <= 1e-4 * std::max({1.0, std::abs(fd), std::abs(an)}));
      checked++;
    }
  CHECK(checked == 35);
}

TEST_CASE("adam: first-step magnitude, zero gradient, elementwise independence") {
  Mat theta = Mat::Zero(1, 2);
  Mat grad(1, 2);
  grad << 1.0, 1.0;
  ad::AdamState st;
  ad::adam_step({&theta}, {grad}, st);
  double expected = -0.001 * (1.0 / (1.0 + 1e-8));
  CHECK(theta(0, 0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(theta(0, 0) == theta(0, 1));  // identical histories update identically

  Mat untouched = Mat::Constant(2, 2, 0.7);
  ad::AdamState st2;
  ad::adam_step({&untouched}, {Mat::Zero(2, 2)}, st2);
  CHECK((untouched.array() == 0.7).all());
}
