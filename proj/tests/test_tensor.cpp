#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "protoshap/rng.hpp"
#include "protoshap/tensor.hpp"

using namespace protoshap;

TEST_CASE("tensor shape checks") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1}, {1.0}), std::invalid_argument);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
}

TEST_CASE("conv2d shifts a top-left impulse to the center with padding 1") {
  Tensor input = Tensor::zeros({3, 3, 1});
  input.at(0, 0, 0) = 1.0;
  Tensor kernel = Tensor::zeros({3, 3, 1, 1});
  kernel.at4(0, 0, 0, 0) = 1.0;
  const Tensor out = conv2d(input, kernel, {}, 1, 1);
  REQUIRE(out.shape == std::vector<int>{3, 3, 1});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(out.at(i, j, 0) == (i == 1 && j == 1 ? 1.0 : 0.0));
}

TEST_CASE("conv2d annihilates with an all-zero kernel") {
  Rng rng(11);
  Tensor input = Tensor::zeros({4, 5, 2});
  for (double& v : input.data) v = rng.uniform(-2.0, 2.0);
  const Tensor out = conv2d(input, Tensor::zeros({3, 3, 2, 3}), {0.0, 0.0, 0.0}, 1, 0);
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("conv2d on a 1x1 input is a scalar affine") {
  const Tensor input({1, 1, 1}, {3.0});
  const Tensor kernel({1, 1, 1, 1}, {2.0});
  const Tensor out = conv2d(input, kernel, {0.5}, 1, 0);
  CHECK(out.data[0] == 2.0 * 3.0 + 0.5);
}

TEST_CASE("conv2d rejects mismatched shapes with both named") {
  const Tensor input = Tensor::zeros({3, 3, 2});
  const Tensor kernel = Tensor::zeros({3, 3, 1, 1});
  CHECK_THROWS_WITH(conv2d(input, kernel, {}, 1, 0),
                    Catch::Matchers::ContainsSubstring("[3x3x2]") &&
                        Catch::Matchers::ContainsSubstring("[3x3x1x1]"));
  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 2, 1}), Tensor::zeros({3, 3, 1, 1}), {}, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d with a 1x1 kernel equals a per-pixel affine") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
    const int cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
    Tensor input = Tensor::zeros({h, w, cin});
    for (double& v : input.data) v = rng.uniform(-1.0, 1.0);
    Tensor kernel = Tensor::zeros({1, 1, cin, cout});
    for (double& v : kernel.data) v = rng.uniform(-1.0, 1.0);
    std::vector<double> bias(static_cast<std::size_t>(cout));
    for (double& v : bias) v = rng.uniform(-1.0, 1.0);
    // weights[f][c] = kernel[0][0][c][f]
    Tensor weights = Tensor::zeros({cout, cin});
    for (int c = 0; c < cin; ++c)
      for (int f = 0; f < cout; ++f)
        weights.data[static_cast<std::size_t>(f * cin + c)] = kernel.at4(0, 0, c, f);

    const Tensor out = conv2d(input, kernel, bias, 1, 0);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        std::vector<double> px(static_cast<std::size_t>(cin));
        for (int c = 0; c < cin; ++c) px[static_cast<std::size_t>(c)] = input.at(i, j, c);
        const Tensor y = affine(Tensor{{cin}, px}, weights, bias);
        for (int f = 0; f < cout; ++f) CHECK(out.at(i, j, f) == y.data[static_cast<std::size_t>(f)]);
      }
    }
  }
}

TEST_CASE("conv2d is linear in its input") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::zeros({5, 5, 2});
    Tensor y = Tensor::zeros({5, 5, 2});
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : y.data) v = rng.uniform(-1.0, 1.0);
    Tensor kernel = Tensor::zeros({3, 3, 2, 2});
    for (double& v : kernel.data) v = rng.uniform(-1.0, 1.0);
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);

    Tensor mix = x;
    for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];
    const Tensor lhs = conv2d(mix, kernel, {}, 2, 1);
    const Tensor cx = conv2d(x, kernel, {}, 2, 1);
    const Tensor cy = conv2d(y, kernel, {}, 2, 1);
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
      CHECK_THAT(lhs.data[i], Catch::Matchers::WithinAbs(a * cx.data[i] + b * cy.data[i], 1e-10));
  }
}

TEST_CASE("affine identity and hand-computed cases") {
  const Tensor x({3}, {1.5, -2.0, 0.25});
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  CHECK(affine(x, eye, {}).data == x.data);

  const Tensor ones({4}, {1, 1, 1, 1});
  const Tensor w1 = Tensor::full({2, 4}, 1.0);
  for (double v : affine(ones, w1, {}).data) CHECK(v == 4.0);

  // [[1,2],[3,4]] * [1,1] = [3,7]
  const Tensor w2({2, 2}, {1, 2, 3, 4});
  const Tensor y = affine(Tensor{{2}, {1, 1}}, w2, {});
  CHECK(y.data[0] == 3.0);
  CHECK(y.data[1] == 7.0);

  CHECK_THROWS_AS(affine(x, w2, {}), std::invalid_argument);
}

TEST_CASE("relu1 clamps to the unit interval") {
  const Tensor t({3}, {-0.5, 0.5, 2.0});
  const Tensor out = relu1(t);
  CHECK(out.data == std::vector<double>{0.0, 0.5, 1.0});
}

TEST_CASE("relu basics") {
  const Tensor t({3}, {-1.0, 0.0, 3.2});
  CHECK(relu(t).data == std::vector<double>{0.0, 0.0, 3.2});
}

TEST_CASE("relu1 equals relu capped at one") {
  Rng rng(23);
  Tensor t = Tensor::zeros({64});
  for (double& v : t.data) v = rng.uniform(-3.0, 3.0);
  const Tensor a = relu1(t);
  const Tensor b = relu(t);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    CHECK(a.data[i] == std::min(b.data[i], 1.0));
}

TEST_CASE("log_softmax matches direct evaluation and stays stable") {
  const std::vector<double> sym = log_softmax({0.0, 0.0});
  CHECK_THAT(sym[0], Catch::Matchers::WithinAbs(-std::log(2.0), 1e-15));
  CHECK_THAT(sym[1], Catch::Matchers::WithinAbs(-std::log(2.0), 1e-15));

  CHECK(log_softmax({42.0})[0] == 0.0);

  const std::vector<double> two = log_softmax({1.0, 0.0});
  const double expected0 = -std::log1p(std::exp(-1.0));
  CHECK_THAT(two[0], Catch::Matchers::WithinAbs(expected0, 1e-14));
  CHECK_THAT(two[1], Catch::Matchers::WithinAbs(-1.0 + expected0, 1e-14));

  CHECK_THROWS_AS(log_softmax({}), std::invalid_argument);
}

TEST_CASE("log_softmax is shift invariant and normalized") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(1, 6);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = rng.uniform(-50.0, 50.0);
    const double c = rng.uniform(-100.0, 100.0);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;

    const std::vector<double> a = log_softmax(v);
    const std::vector<double> b = log_softmax(shifted);
    double mass = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK_THAT(a[i], Catch::Matchers::WithinAbs(b[i], 1e-12));
      mass += std::exp(a[i]);
    }
    CHECK_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}
