#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "kinjoint/autograd.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/tensor.hpp"

using namespace kinjoint;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor t({2, 3}, 0.5);
  CHECK(t.numel() == 6);
  CHECK(t.shape() == Shape{2, 3});
  CHECK_THROWS(Tensor::from_data({2, 3}, {1.0, 2.0}));
  CHECK_THROWS(Tensor({0, 3}));
  CHECK_THROWS(Tensor(Shape{}));
  Tensor s = Tensor::scalar(4.0);
  CHECK(s.item() == 4.0);
  CHECK_THROWS(t.item());
}

TEST_CASE("relu definition") {
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor y = relu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
}

TEST_CASE("add identity and broadcasting") {
  Rng rng(1);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor y = add(x, Tensor::zeros_like(x));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  Tensor bias = Tensor::from_data({5}, {1, 2, 3, 4, 5});
  Tensor z = add(x, bias);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c) CHECK(z[r * 5 + c] == x[r * 5 + c] + (c + 1));

  CHECK_THROWS_WITH_AS(add(x, Tensor({3, 5})),
                       doctest::Contains("add"), std::runtime_error);
}

TEST_CASE("conv2d sliding window hand case") {
  // all-ones 3x3 input, all-ones 2x2 kernel, stride 1, no padding -> all 4
  Tensor x({1, 1, 3, 3}, 1.0);
  Tensor k({1, 1, 2, 2}, 1.0);
  Tensor y = conv2d(x, k);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (std::int64_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(4.0));
}

TEST_CASE("conv2d enumerated oracle with stride and padding") {
  // brute-force sliding window on a small random case
  Rng rng(7);
  const int N = 2, C = 3, H = 5, W = 6, F = 4, KH = 3, KW = 2;
  const int stride = 2, pad = 1;
  Tensor x = random_tensor({N, C, H, W}, rng);
  Tensor k = random_tensor({F, C, KH, KW}, rng);
  Tensor b = random_tensor({F}, rng);
  Tensor y = conv2d(x, k, b, stride, pad);
  const int HO = (H + 2 * pad - KH) / stride + 1;
  const int WO = (W + 2 * pad - KW) / stride + 1;
  REQUIRE(y.shape() == Shape{N, F, HO, WO});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < HO; ++oh)
        for (int ow = 0; ow < WO; ++ow) {
          double acc = b[f];
          for (int c = 0; c < C; ++c)
            for (int kh = 0; kh < KH; ++kh)
              for (int kw = 0; kw < KW; ++kw) {
                const int ih = oh * stride + kh - pad;
                const int iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((n * C + c) * H + ih) * W + iw] *
                       k[((f * C + c) * KH + kh) * KW + kw];
              }
          CHECK(y[((n * F + f) * HO + oh) * WO + ow] == doctest::Approx(acc));
        }
}

TEST_CASE("conv2d shape errors name the op and shapes") {
  Tensor x({1, 3, 4, 4});
  Tensor k({2, 4, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(x, k), doctest::Contains("conv2d"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(conv2d(x, k), doctest::Contains("[1,3,4,4]"),
                       std::runtime_error);
}

TEST_CASE("matmul and maxpool basics") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  CHECK(c[0] == doctest::Approx(58));
  CHECK(c[1] == doctest::Approx(64));
  CHECK(c[2] == doctest::Approx(139));
  CHECK(c[3] == doctest::Approx(154));
  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("matmul"),
                       std::runtime_error);

  Tensor x = Tensor::from_data({1, 1, 2, 4}, {1, 5, 2, 0, 3, 1, 4, 8});
  Tensor p = maxpool2d(x, 2);
  CHECK(p.shape() == Shape{1, 1, 1, 2});
  CHECK(p[0] == 5.0);
  CHECK(p[1] == 8.0);
}

TEST_CASE("flatten, concat, slice") {
  Tensor x = Tensor::from_data({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor f = flatten(x);
  CHECK(f.shape() == Shape{2, 4});

  Tensor a = Tensor::from_data({2, 1}, {1, 2});
  Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c[0] == 1);
  CHECK(c[1] == 3);
  CHECK(c[2] == 4);
  CHECK(c[3] == 2);
  CHECK(c[4] == 5);
  CHECK(c[5] == 6);

  Tensor s = slice(c, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s[0] == 3);
  CHECK(s[2] == 5);
  CHECK_THROWS(slice(c, 1, 2, 2));
}

TEST_CASE("upsample2x nearest") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = upsample2x(x);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y[0] == 1);
  CHECK(y[1] == 1);
  CHECK(y[4] == 1);
  CHECK(y[5] == 1);
  CHECK(y[2] == 2);
  CHECK(y[15] == 4);
}

TEST_CASE("softmax symmetry and reference values") {
  Tensor a = Tensor::from_data({2}, {0.0, 0.0});
  Tensor sa = softmax(a, 0);
  CHECK(sa[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sa[1] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor ones = Tensor({5}, 1.0);
  Tensor so = softmax(ones, 0);
  for (int i = 0; i < 5; ++i) CHECK(so[i] == doctest::Approx(0.2).epsilon(1e-12));

  Tensor v = Tensor::from_data({5}, {0.2, 0.1, 0.8, 0.3, 0.4});
  Tensor sv = softmax(v, 0);
  const double expect[5] = {0.1652, 0.1495, 0.3010, 0.1826, 0.2018};
  for (int i = 0; i < 5; ++i) CHECK(std::abs(sv[i] - expect[i]) < 1e-4);
}

TEST_CASE("softmax properties: sums to one, argmax preserved, stability") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor({7}, rng, -50.0, 50.0);
    Tensor s = softmax(x, 0);
    double sum = 0.0;
    int argmax_x = 0, argmax_s = 0;
    for (int i = 0; i < 7; ++i) {
      sum += s[i];
      CHECK(s[i] >= 0.0);
      if (x[i] > x[argmax_x]) argmax_x = i;
      if (s[i] > s[argmax_s]) argmax_s = i;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK(argmax_x == argmax_s);
  }
  // extreme logits stay finite thanks to max subtraction
  Tensor big = Tensor::from_data({3}, {1000.0, 999.0, -1000.0});
  Tensor sb = softmax(big, 0);
  for (int i = 0; i < 3; ++i) CHECK(std::isfinite(sb[i]));

  Tensor bad = Tensor::from_data({2}, {std::nan(""), 0.0});
  CHECK_THROWS_WITH_AS(softmax(bad, 0), doctest::Contains("NaN"),
                       std::runtime_error);
}

TEST_CASE("softmax along a middle axis matches per-slice softmax") {
  Rng rng(13);
  Tensor x = random_tensor({2, 4, 3}, rng);
  Tensor s = softmax(x, 1);
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i) {
      double sum = 0.0;
      for (int a = 0; a < 4; ++a) sum += s[(o * 4 + a) * 3 + i];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("weighted cross entropy values") {
  // one-hot at the true class -> exactly zero
  Tensor onehot = Tensor::from_data({4}, {0, 0, 1, 0});
  CHECK(weighted_cross_entropy(onehot, 2, {1, 2, 3, 4}).item() == 0.0);

  Tensor p = Tensor::from_data({2}, {0.3, 0.7});
  const double got = weighted_cross_entropy(p, 1, {0.25, 8}).item();
  CHECK(std::abs(got - 8.0 * (-std::log(0.7))) < 1e-12);
  CHECK(std::abs(got - 2.8534) < 1e-3);

  Tensor half = Tensor::from_data({2}, {0.5, 0.5});
  CHECK(std::abs(weighted_cross_entropy(half, 0, {1, 1}).item() -
                 std::log(2.0)) < 1e-4);

  CHECK_THROWS_WITH_AS(weighted_cross_entropy(p, 2, {1, 1}),
                       doctest::Contains("out of range"), std::runtime_error);
  CHECK_THROWS(weighted_cross_entropy(p, -1, {1, 1}));
}

TEST_CASE("weighted cross entropy is nonnegative, zero only at certainty") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor logits = random_tensor({5}, rng, -6.0, 6.0);
    Tensor probs = softmax(logits, 0);
    const int y = rng.index(5);
    std::vector<double> w(5);
    for (double& v : w) v = rng.uniform(0.1, 4.0);
    const double loss = weighted_cross_entropy(probs, y, w).item();
    CHECK(loss >= 0.0);
    if (loss == 0.0) CHECK(probs[y] >= 1.0 - 1e-12);
  }
  // exact zero at certainty
  Tensor sure = Tensor::from_data({3}, {0.0, 1.0, 0.0});
  CHECK(weighted_cross_entropy(sure, 1, {3, 3, 3}).item() == 0.0);
  // clamped log keeps the loss finite at zero probability
  Tensor zero = Tensor::from_data({2}, {1.0, 0.0});
  CHECK(std::isfinite(weighted_cross_entropy(zero, 1, {1, 1}).item()));
  // all-equal weights reduce to plain cross entropy
  Tensor p = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
  CHECK(weighted_cross_entropy(p, 2, {1, 1, 1, 1}).item() ==
        doctest::Approx(-std::log(0.3)));
}

TEST_CASE("forward_op dispatcher covers the op set") {
  Tensor x = Tensor::from_data({2, 2}, {1, -2, 3, -4});
  CHECK(forward_op(OpKind::Relu, {x})[1] == 0.0);
  CHECK(forward_op(OpKind::Add, {x, x})[0] == 2.0);
  CHECK(forward_op(OpKind::Mul, {x, x})[1] == 4.0);
  CHECK(forward_op(OpKind::Exp, {Tensor::scalar(0.0)}).item() == 1.0);
  CHECK(forward_op(OpKind::Log, {Tensor::scalar(1.0)}).item() == 0.0);
  CHECK(forward_op(OpKind::Sigmoid, {Tensor::scalar(0.0)}).item() ==
        doctest::Approx(0.5));
  CHECK(forward_op(OpKind::Matmul, {x, x}).shape() == Shape{2, 2});
  Tensor img({1, 1, 4, 4}, 1.0);
  Tensor ker({1, 1, 2, 2}, 1.0);
  OpAttrs attrs;
  attrs.stride = 2;
  CHECK(forward_op(OpKind::Conv2d, {img, ker}, attrs).shape() ==
        Shape{1, 1, 2, 2});
  attrs.kernel = 2;
  CHECK(forward_op(OpKind::MaxPool2d, {img}, attrs).shape() ==
        Shape{1, 1, 2, 2});
  CHECK(forward_op(OpKind::Flatten, {img}).shape() == Shape{1, 16});
  OpAttrs cat_attrs;
  cat_attrs.axis = 0;
  CHECK(forward_op(OpKind::Concat, {x, x}, cat_attrs).shape() == Shape{4, 2});
  CHECK_THROWS(forward_op(OpKind::Add, {x}));
}

TEST_CASE("log rejects nonpositive input") {
  CHECK_THROWS_WITH_AS(log(Tensor::scalar(0.0)), doctest::Contains("log"),
                       std::runtime_error);
  CHECK_THROWS(log(Tensor::scalar(-1.0)));
}

TEST_CASE("forward replay determinism") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor k1 = random_tensor({4, 3, 3, 3}, rng);
    Tensor k2 = random_tensor({4, 4, 3, 3}, rng);
    Tensor h = relu(conv2d(x, k1, 1, 1));
    Tensor y = sigmoid(conv2d(h, k2, 1, 1));
    return y;
  };
  Tensor a = run(99), b = run(99);
  REQUIRE(a.numel() == b.numel());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.numel()) == 0);
}
