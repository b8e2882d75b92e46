#include <cmath>
#include <vector>

#include "doctest.h"
#include "adam.hpp"
#include "ops.hpp"
#include "rng.hpp"

using namespace ssvep;
using namespace ssvep::nn;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("conv1d identity kernel") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 4}, {1, 2, 3, 4}));
  Var w = tp.leaf(Tensor::from({1, 1, 1}, {1}));
  Var b = tp.leaf(Tensor::from({1}, {0}));
  Var y = conv1d(x, w, b, Pad::same);
  CHECK(y.val().shape == Shape{1, 1, 4});
  for (int i = 0; i < 4; ++i) CHECK(y.val().data[i] == doctest::Approx(i + 1.0));
}

TEST_CASE("conv1d hand convolution with zero pads") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 3}, {1, 1, 1}));
  Var w = tp.leaf(Tensor::from({1, 1, 3}, {1, 1, 1}));
  Var y = conv1d(x, w, Var(), Pad::same);
  CHECK(y.val().data[0] == doctest::Approx(2.0));
  CHECK(y.val().data[1] == doctest::Approx(3.0));
  CHECK(y.val().data[2] == doctest::Approx(2.0));
}

TEST_CASE("conv1d same-padding shape law") {
  Rng rng(7);
  Tape tp;
  Var x = tp.leaf(random_tensor({2, 3, 250}, rng));
  Var w = tp.leaf(random_tensor({5, 3, 32}, rng));
  Var b = tp.leaf(Tensor::zeros({5}));
  Var y = conv1d(x, w, b, Pad::same, 1);
  CHECK(y.val().shape == Shape{2, 5, 250});
}

TEST_CASE("conv1d channel mismatch raises") {
  Rng rng(7);
  Tape tp;
  Var x = tp.leaf(random_tensor({1, 3, 10}, rng));
  Var w = tp.leaf(random_tensor({2, 4, 3}, rng));
  CHECK_THROWS_AS(conv1d(x, w, Var(), Pad::same), Error);
}

TEST_CASE("conv1d cross-correlation convention (no kernel flip)") {
  // asymmetric kernel distinguishes correlation from convolution
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 3}, {1, 0, 0}));
  Var w = tp.leaf(Tensor::from({1, 1, 3}, {1, 2, 3}));
  Var y = conv1d(x, w, Var(), Pad::same);
  // y[t] = sum_j w[j] * xpad[t + j], pad left 1
  CHECK(y.val().data[0] == doctest::Approx(2.0));
  CHECK(y.val().data[1] == doctest::Approx(1.0));
  CHECK(y.val().data[2] == doctest::Approx(0.0));
}

TEST_CASE("maxpool1d window maxima with right-aligned pad") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 4}, {1, 3, 2, 4}));
  Var y = maxpool1d(x, 2, 1, Pad::same);
  CHECK(y.val().shape == Shape{1, 1, 4});
  CHECK(y.val().data == std::vector<double>{3, 3, 4, 4});
}

TEST_CASE("maxpool1d constant input stays constant") {
  Tape tp;
  Var x = tp.leaf(Tensor::full({2, 3, 9}, 0.7));
  Var y = maxpool1d(x, 2, 1, Pad::same);
  for (double v : y.val().data) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("maxpool1d monotone input shifts, last element repeated") {
  Tape tp;
  std::vector<double> inc(10);
  for (int i = 0; i < 10; ++i) inc[static_cast<std::size_t>(i)] = i * 0.5;
  Var x = tp.leaf(Tensor({1, 1, 10}, inc));
  Var y = maxpool1d(x, 2, 1, Pad::same);
  for (int i = 0; i < 9; ++i)
    CHECK(y.val().data[static_cast<std::size_t>(i)] == doctest::Approx(inc[static_cast<std::size_t>(i + 1)]));
  CHECK(y.val().data[9] == doctest::Approx(inc[9]));
}

TEST_CASE("dense identity") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 3}, {1, 2, 3}));
  Var w = tp.leaf(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Var b = tp.leaf(Tensor::zeros({3}));
  Var y = dense(x, w, b);
  CHECK(y.val().data == x.val().data);
}

TEST_CASE("dense arithmetic") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 2}, {1, 2}));
  Var w = tp.leaf(Tensor::from({1, 2}, {1, 1}));
  Var b = tp.leaf(Tensor::from({1}, {1}));
  Var y = dense(x, w, b);
  CHECK(y.val().data[0] == doctest::Approx(4.0));
}

TEST_CASE("dense shape law") {
  Rng rng(11);
  Tape tp;
  Var x = tp.leaf(random_tensor({7, 5}, rng));
  Var w = tp.leaf(random_tensor({4, 5}, rng));
  Var b = tp.leaf(random_tensor({4}, rng));
  CHECK(dense(x, w, b).val().shape == Shape{7, 4});
}

TEST_CASE("batchnorm1d train normalizes per channel") {
  Rng rng(3);
  Tape tp;
  Var x = tp.leaf(random_tensor({4, 3, 25}, rng, -5.0, 9.0));
  Var gamma = tp.leaf(Tensor::full({3}, 1.0));
  Var beta = tp.leaf(Tensor::zeros({3}));
  Tensor rm = Tensor::zeros({3});
  Tensor rv = Tensor::full({3}, 1.0);
  Var y = batchnorm1d(x, gamma, beta, rm, rv, true, 0.1, 1e-9);
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    int n = 0;
    for (int b = 0; b < 4; ++b)
      for (int t = 0; t < 25; ++t) {
        mean += y.val().data[static_cast<std::size_t>((b * 3 + c) * 25 + t)];
        ++n;
      }
    mean /= n;
    for (int b = 0; b < 4; ++b)
      for (int t = 0; t < 25; ++t) {
        double d = y.val().data[static_cast<std::size_t>((b * 3 + c) * 25 + t)] - mean;
        var += d * d;
      }
    var /= n;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("batchnorm1d constant channel gives beta") {
  Tape tp;
  Var x = tp.leaf(Tensor::full({2, 2, 8}, 3.25));
  Var gamma = tp.leaf(Tensor::full({2}, 2.0));
  Var beta = tp.leaf(Tensor::from({2}, {0.5, -1.5}));
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  Var y = batchnorm1d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 2; ++c)
      for (int t = 0; t < 8; ++t)
        CHECK(y.val().data[static_cast<std::size_t>((b * 2 + c) * 8 + t)] ==
              doctest::Approx(beta.val().data[static_cast<std::size_t>(c)]).epsilon(1e-9));
}

TEST_CASE("batchnorm1d eval uses running stats") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 2}, {2.0, 5.0}));
  Var gamma = tp.leaf(Tensor::from({1}, {1.5}));
  Var beta = tp.leaf(Tensor::from({1}, {-0.25}));
  Tensor rm({1}, {1.0});
  Tensor rv({1}, {4.0});
  const double eps = 1e-5;
  Var y = batchnorm1d(x, gamma, beta, rm, rv, false, 0.1, eps);
  for (int t = 0; t < 2; ++t) {
    const double xv = x.val().data[static_cast<std::size_t>(t)];
    const double expect = (xv - 1.0) / std::sqrt(4.0 + eps) * 1.5 - 0.25;
    CHECK(y.val().data[static_cast<std::size_t>(t)] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("batchnorm1d degenerate train input raises") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 2, 1}, {1.0, 2.0}));
  Var gamma = tp.leaf(Tensor::full({2}, 1.0));
  Var beta = tp.leaf(Tensor::zeros({2}));
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  CHECK_THROWS_AS(batchnorm1d(x, gamma, beta, rm, rv, true), Error);
}

TEST_CASE("batchnorm1d updates running stats by EMA") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 1, 4}, {1, 2, 3, 4}));
  Var gamma = tp.leaf(Tensor::full({1}, 1.0));
  Var beta = tp.leaf(Tensor::zeros({1}));
  Tensor rm({1}, {0.0});
  Tensor rv({1}, {1.0});
  batchnorm1d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
  CHECK(rm.data[0] == doctest::Approx(0.1 * 2.5));
  CHECK(rv.data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));
}

TEST_CASE("layernorm zero mean rows") {
  Rng rng(5);
  Tape tp;
  Var x = tp.leaf(random_tensor({3, 4, 8}, rng));
  Var gamma = tp.leaf(Tensor::full({8}, 1.0));
  Var beta = tp.leaf(Tensor::zeros({8}));
  Var y = layernorm(x, gamma, beta, 1e-9);
  for (int r = 0; r < 12; ++r) {
    double mean = 0;
    for (int j = 0; j < 8; ++j) mean += y.val().data[static_cast<std::size_t>(r * 8 + j)];
    CHECK(std::abs(mean / 8.0) < 1e-9);
  }
}

TEST_CASE("layernorm [1,3] row") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({1, 2}, {1, 3}));
  Var gamma = tp.leaf(Tensor::full({2}, 1.0));
  Var beta = tp.leaf(Tensor::zeros({2}));
  Var y = layernorm(x, gamma, beta, 1e-12);
  CHECK(y.val().data[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y.val().data[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layernorm shift invariance") {
  Rng rng(6);
  Tape tp;
  Tensor base = random_tensor({2, 6}, rng);
  Tensor shifted = base;
  for (double& v : shifted.data) v += 17.5;
  Var g1 = tp.leaf(random_tensor({6}, rng, 0.5, 1.5));
  Var b1 = tp.leaf(random_tensor({6}, rng));
  Var y1 = layernorm(tp.leaf(base), g1, b1, 1e-9);
  Var y2 = layernorm(tp.leaf(shifted), g1, b1, 1e-9);
  for (std::size_t i = 0; i < y1.val().data.size(); ++i)
    CHECK(y1.val().data[i] == doctest::Approx(y2.val().data[i]).epsilon(1e-9));
}

TEST_CASE("elu values") {
  Tape tp;
  Var x = tp.leaf(Tensor::from({3}, {0.0, 2.0, -1.0}));
  Var y = elu(x);
  CHECK(y.val().data[0] == doctest::Approx(0.0));
  CHECK(y.val().data[1] == doctest::Approx(2.0));
  CHECK(y.val().data[2] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-12));
}

TEST_CASE("elu monotone on a grid") {
  Tape tp;
  std::vector<double> grid;
  for (int i = -40; i <= 40; ++i) grid.push_back(i * 0.1);
  Var x = tp.leaf(Tensor({static_cast<std::int64_t>(grid.size())}, grid));
  Var y = elu(x);
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(y.val().data[i] > y.val().data[i - 1]);
}

TEST_CASE("dropout eval and p=0 are the exact identity") {
  Rng rng(9);
  Tape tp;
  Tensor in = random_tensor({4, 7}, rng);
  Var x = tp.leaf(in);
  Rng r1 = rng.split("d1");
  CHECK(dropout(x, 0.5, false, r1).val().data == in.data);
  CHECK(dropout(x, 0.0, true, r1).val().data == in.data);
}

TEST_CASE("dropout keeps the mean at p=0.5") {
  Rng rng(10);
  Tape tp;
  Var x = tp.leaf(Tensor::full({100000}, 1.0));
  Var y = dropout(x, 0.5, true, rng);
  double mean = 0;
  for (double v : y.val().data) mean += v;
  mean /= 1e5;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("dropout rejects p outside [0,1)") {
  Rng rng(1);
  Tape tp;
  Var x = tp.leaf(Tensor::full({4}, 1.0));
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), Error);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), Error);
}

TEST_CASE("softmax uniform pair") {
  Tape tp;
  Var y = softmax(tp.leaf(Tensor::from({2}, {0, 0})));
  CHECK(y.val().data[0] == doctest::Approx(0.5));
  CHECK(y.val().data[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax shift invariance") {
  Rng rng(12);
  Tape tp;
  Tensor base = random_tensor({3, 5}, rng);
  Tensor shifted = base;
  for (double& v : shifted.data) v += 123.0;
  Var y1 = softmax(tp.leaf(base));
  Var y2 = softmax(tp.leaf(shifted));
  for (std::size_t i = 0; i < y1.val().data.size(); ++i)
    CHECK(std::abs(y1.val().data[i] - y2.val().data[i]) < 1e-12);
}

TEST_CASE("softmax closed form [ln 2, 0]") {
  Tape tp;
  Var y = softmax(tp.leaf(Tensor::from({2}, {std::log(2.0), 0.0})));
  CHECK(std::abs(y.val().data[0] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(y.val().data[1] - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(13);
  Tape tp;
  Var y = softmax(tp.leaf(random_tensor({6, 9}, rng, -30, 30)));
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += y.val().data[static_cast<std::size_t>(r * 9 + j)];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("attention single token") {
  Tape tp;
  Tensor eye2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Var x = tp.leaf(Tensor::from({1, 1, 2}, {0.3, -1.2}));
  Var wq = tp.leaf(eye2), wk = tp.leaf(eye2), wv = tp.leaf(eye2), wo = tp.leaf(eye2);
  std::vector<Var> attn;
  Var y = multi_head_attention(x, wq, wk, wv, wo, 1, &attn);
  REQUIRE(attn.size() == 1);
  CHECK(attn[0].val().shape == Shape{1, 1, 1});
  CHECK(attn[0].val().data[0] == doctest::Approx(1.0));
  CHECK(y.val().data[0] == doctest::Approx(0.3));
  CHECK(y.val().data[1] == doctest::Approx(-1.2));
}

TEST_CASE("attention uniform weights for identical keys") {
  Tape tp;
  Tensor eye2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor xval = Tensor::zeros({1, 4, 2});
  for (int t = 0; t < 4; ++t) {
    xval.data[static_cast<std::size_t>(t * 2)] = 0.8;
    xval.data[static_cast<std::size_t>(t * 2 + 1)] = -0.4;
  }
  Var x = tp.leaf(xval);
  Var wq = tp.leaf(eye2), wk = tp.leaf(eye2), wv = tp.leaf(eye2), wo = tp.leaf(eye2);
  std::vector<Var> attn;
  multi_head_attention(x, wq, wk, wv, wo, 2, &attn);
  for (double v : attn[0].val().data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("attention two-token hand trace") {
  Tape tp;
  Tensor eye2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Var x = tp.leaf(Tensor::from({1, 2, 2}, {1, 0, 0, 1}));
  Var wq = tp.leaf(eye2), wk = tp.leaf(eye2), wv = tp.leaf(eye2), wo = tp.leaf(eye2);
  std::vector<Var> attn;
  Var y = multi_head_attention(x, wq, wk, wv, wo, 1, &attn);
  // scores = x.x^T / sqrt(2) = [[s, 0], [0, s]] with s = 1/sqrt(2)
  const double s = 1.0 / std::sqrt(2.0);
  const double hi = std::exp(s) / (std::exp(s) + 1.0);
  const double lo = 1.0 - hi;
  CHECK(attn[0].val().data[0] == doctest::Approx(hi).epsilon(1e-12));
  CHECK(attn[0].val().data[1] == doctest::Approx(lo).epsilon(1e-12));
  // out row 0 = hi * v0 + lo * v1 = [hi, lo]
  CHECK(y.val().data[0] == doctest::Approx(hi).epsilon(1e-12));
  CHECK(y.val().data[1] == doctest::Approx(lo).epsilon(1e-12));
  CHECK(y.val().data[2] == doctest::Approx(lo).epsilon(1e-12));
  CHECK(y.val().data[3] == doctest::Approx(hi).epsilon(1e-12));
}

TEST_CASE("attention rejects indivisible head count") {
  Rng rng(2);
  Tape tp;
  Var x = tp.leaf(random_tensor({1, 3, 6}, rng));
  Var w = tp.leaf(random_tensor({6, 6}, rng));
  CHECK_THROWS_AS(multi_head_attention(x, w, w, w, w, 4), Error);
}

TEST_CASE("cross entropy uniform logits") {
  Tape tp;
  Var logits = tp.leaf(Tensor::zeros({2, 40}));
  Var loss = cross_entropy(logits, {3, 17});
  CHECK(loss.item() == doctest::Approx(std::log(40.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy huge correct logit") {
  Tape tp;
  Tensor t = Tensor::zeros({1, 5});
  t.data[2] = 200.0;
  Var loss = cross_entropy(tp.leaf(t), {2});
  CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross entropy two-class closed form") {
  Tape tp;
  Var loss = cross_entropy(tp.leaf(Tensor::from({1, 2}, {1, 0})), {0});
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("cross entropy with L2 term") {
  Tape tp;
  Var logits = tp.leaf(Tensor::zeros({1, 4}));
  Var w = tp.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  Var loss = cross_entropy_loss(logits, {0}, {w}, 0.01);
  CHECK(loss.item() == doctest::Approx(std::log(4.0) + 0.01 * 30.0).epsilon(1e-12));
}

TEST_CASE("backward of sum is all ones") {
  Rng rng(20);
  Tape tp;
  Var x = tp.leaf(random_tensor({3, 4}, rng));
  tp.backward(vsum(x));
  for (double g : x.grad().data) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of sum of squares is 2x") {
  Rng rng(21);
  Tape tp;
  Tensor in = random_tensor({5}, rng);
  Var x = tp.leaf(in);
  tp.backward(sum_squares(x));
  for (int i = 0; i < 5; ++i)
    CHECK(x.grad().data[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0 * in.data[static_cast<std::size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("untouched leaves have zero gradient") {
  Rng rng(22);
  Tape tp;
  Var x = tp.leaf(random_tensor({3}, rng));
  Var unused = tp.leaf(random_tensor({4}, rng));
  tp.backward(vsum(x));
  for (double g : unused.grad().data) CHECK(g == 0.0);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  AdamState st;
  Tensor p = Tensor::from({3}, {1, -2, 3});
  Tensor g = Tensor::zeros({3});
  Tensor before = p;
  adam_step(st, {&p}, {&g}, 0.1);
  CHECK(p.data == before.data);
  CHECK(st.step == 1);
}

TEST_CASE("adam first step magnitude is about lr") {
  AdamState st;
  Tensor p = Tensor::from({1}, {0.0});
  Tensor g = Tensor::from({1}, {1.0});
  adam_step(st, {&p}, {&g}, 0.1);
  CHECK(p.data[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam step counter increments by one") {
  AdamState st;
  Tensor p = Tensor::from({2}, {1, 2});
  Tensor g = Tensor::from({2}, {0.5, -0.5});
  adam_step(st, {&p}, {&g}, 0.01);
  CHECK(st.step == 1);
  adam_step(st, {&p}, {&g}, 0.01);
  CHECK(st.step == 2);
}

TEST_CASE("same-padding ops preserve time length") {
  Rng rng(30);
  for (int k : {1, 2, 3, 5, 8, 11, 16, 32}) {
    Tape tp;
    Var x = tp.leaf(random_tensor({1, 2, 37}, rng));
    Var w = tp.leaf(random_tensor({3, 2, k}, rng));
    CHECK(conv1d(x, w, Var(), Pad::same).val().shape[2] == 37);
    CHECK(maxpool1d(x, k, 1, Pad::same).val().shape[2] == 37);
  }
}

TEST_CASE("identical seeds give bit-identical forward, backward, update") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tape tp;
    Var x = tp.leaf(random_tensor({2, 3, 16}, rng));
    Var w = tp.leaf(random_tensor({4, 3, 5}, rng));
    Var y = conv1d(x, w, Var(), Pad::same);
    Rng drop = rng.split("drop");
    y = dropout(elu(y), 0.25, true, drop);
    Var loss = sum_squares(y);
    tp.backward(loss);
    Tensor wt = w.val();
    AdamState st;
    Tensor grad = w.grad();
    adam_step(st, {&wt}, {&grad}, 1e-3);
    std::vector<double> out = {loss.item()};
    out.insert(out.end(), wt.data.begin(), wt.data.end());
    return out;
  };
  CHECK(run(99) == run(99));
}

TEST_SUITE_END();
