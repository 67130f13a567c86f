#include <cmath>

#include "canonxai/error.hpp"
#include "canonxai/kernels.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace canonxai;

TEST_CASE("tensor construction checks extents") {
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.reshaped({6}).shape() == Shape{6});
  CHECK_THROWS_AS(t.reshaped({5}), DimensionError);
}

TEST_CASE("linear_forward") {
  SUBCASE("identity") {
    Tensor w({2, 2}, {1, 0, 0, 1});
    auto y = linear_forward(Tensor::vector({3, -1}), w, Tensor::vector({0, 0}));
    CHECK(y == Tensor::vector({3, -1}));
  }
  SUBCASE("hand dot product") {
    auto y = linear_forward(Tensor::vector({1, 1}), Tensor({1, 2}, {1, 3}), Tensor::vector({0}));
    CHECK(y == Tensor::vector({4}));
  }
  SUBCASE("random vs naive loop") {
    std::mt19937_64 rng(1);
    auto w = testing::random_tensor({8, 5}, rng);
    auto b = testing::random_tensor({8}, rng);
    auto x = testing::random_tensor({5}, rng);
    auto y = linear_forward(x, w, b);
    for (std::size_t i = 0; i < 8; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < 5; ++j) acc += double(w.at(i, j)) * double(x[j]);
      acc += b[i];
      CHECK(y[i] == static_cast<float>(acc));
    }
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      linear_forward(Tensor::vector({1, 2, 3}), Tensor({1, 2}, {1, 3}), Tensor());
      FAIL("expected throw");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[3]") != std::string::npos);
      CHECK(msg.find("[1x2]") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d_forward") {
  SUBCASE("1x1 identity kernel") {
    std::mt19937_64 rng(2);
    auto x = testing::random_tensor({1, 4, 4}, rng);
    auto y = conv2d_forward(x, Tensor({1, 1, 1, 1}, {1}), BiasTerm{}, {}, PadSpec{});
    CHECK(y == x);
  }
  SUBCASE("ones kernel with zero pad") {
    Tensor x({1, 3, 3}, {2, 3, 4, 3, 4, 5, 4, 5, 6});
    auto y = conv2d_forward(x, Tensor::filled({1, 1, 2, 2}, 1), BiasTerm{}, {}, PadSpec::uniform(1));
    CHECK(y == Tensor({1, 4, 4}, {2, 5, 7, 4, 5, 12, 16, 9, 7, 16, 20, 11, 4, 9, 11, 6}));
  }
  SUBCASE("random vs quadruple loop") {
    std::mt19937_64 rng(3);
    auto x = testing::random_tensor({2, 5, 5}, rng);
    auto k = testing::random_tensor({3, 2, 3, 3}, rng);
    auto b = testing::random_tensor({3}, rng);
    const PadSpec pad{1, 0, 1, 2, 0.25f, {}};
    const Stride2 st{2, 1};
    auto y = conv2d_forward(x, k, BiasTerm::per_channel(b), st, pad);
    const std::size_t ph = 5 + 1, pw = 5 + 3;
    REQUIRE(y.shape() == Shape{3, (ph - 3) / 2 + 1, (pw - 3) / 1 + 1});
    auto xp = [&](std::size_t c, long i, long j) -> double {
      i -= 1;
      j -= 1;
      if (i < 0 || j < 0 || i >= 5 || j >= 5) return 0.25;
      return x.at(c, i, j);
    };
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < y.dim(1); ++i)
        for (std::size_t j = 0; j < y.dim(2); ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t u = 0; u < 3; ++u)
              for (std::size_t v = 0; v < 3; ++v)
                acc += double(k[((o * 2 + c) * 3 + u) * 3 + v]) * xp(c, long(i * 2 + u), long(j + v));
          acc += b[o];
          CHECK(y.at(o, i, j) == static_cast<float>(acc));
        }
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), BiasTerm{}, {}, PadSpec{}),
                    DimensionError);
  }
  SUBCASE("constant input, interior positions see sum of kernel") {
    std::mt19937_64 rng(4);
    auto k = testing::random_tensor({1, 1, 3, 3}, rng);
    double ks = 0;
    for (float v : k.data()) ks += v;
    auto y = conv2d_forward(Tensor::filled({1, 6, 6}, 2.0f), k, BiasTerm{}, {}, PadSpec::uniform(1));
    for (std::size_t i = 1; i < 5; ++i)
      for (std::size_t j = 1; j < 5; ++j) CHECK(y.at(0, i, j) == doctest::Approx(ks * 2.0).epsilon(1e-6));
  }
}

TEST_CASE("batchnorm_forward") {
  auto id = BatchNormParams::identity(1);
  auto x = Tensor({1, 1, 3}, {-1, 0, 2});
  CHECK(batchnorm_forward(x, id) == x);
  auto plus1 = id;
  plus1.bias = {1};
  CHECK(batchnorm_forward(x, plus1) == Tensor({1, 1, 3}, {0, 1, 3}));

  std::mt19937_64 rng(5);
  auto p = testing::random_bn(3, rng);
  auto xr = testing::random_tensor({3, 4, 4}, rng);
  auto y = batchnorm_forward(xr, p);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) {
      const double v = double(p.weight[c]) * (double(xr[c * 16 + i]) - double(p.mean[c])) /
                           std::sqrt(double(p.var[c]) + double(p.eps)) +
                       double(p.bias[c]);
      // evaluated around the float zero crossing, so within a few ulp
      CHECK(std::abs(double(y[c * 16 + i]) - v) <= 1e-6 * (1.0 + std::abs(v)));
    }

  auto bad = id;
  bad.var = {-1};
  CHECK_THROWS_AS(batchnorm_forward(x, bad), ParameterError);
}

TEST_CASE("thresh_relu_forward") {
  auto p = BatchNormParams::identity(1);
  SUBCASE("reduces to relu") {
    auto x = Tensor({1, 1, 5}, {-2, -0.5, 0, 0.5, 3});
    CHECK(thresh_relu_forward(x, p) == relu_forward(x));
  }
  SUBCASE("positive scale, shifted threshold") {
    p.bias = {1};
    CHECK(thresh_relu_threshold(p)[0] == -1.0f);
    auto x = Tensor({1, 1, 2}, {-2, 0.5});
    auto t = thresh_relu_forward(x, p);
    CHECK(t == Tensor({1, 1, 2}, {-1, 0.5}));
    CHECK(batchnorm_forward(t, p) == relu_forward(batchnorm_forward(x, p)));
  }
  SUBCASE("negative scale flips the pass branch") {
    p.weight = {-1};
    p.bias = {1};
    CHECK(thresh_relu_threshold(p)[0] == 1.0f);
    auto x = Tensor({1, 1, 2}, {2, 0});
    auto t = thresh_relu_forward(x, p);
    CHECK(t == Tensor({1, 1, 2}, {1, 0}));
    CHECK(batchnorm_forward(t, p) == relu_forward(batchnorm_forward(x, p)));
  }
  SUBCASE("exact on a grid through the threshold, random parameters") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
      auto q = testing::random_bn(2, rng);  // channel 0 positive w, channel 1 negative
      const auto z = thresh_relu_threshold(q);
      Tensor x({2, 1, 103});
      for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < 101; ++i) x.at(c, 0, i) = -5.0f + 0.1f * float(i);
        x.at(c, 0, 101) = z[c];
        x.at(c, 0, 102) = std::nextafter(z[c], 10.0f);
      }
      const auto lhs = batchnorm_forward(thresh_relu_forward(x, q), q);
      const auto rhs = relu_forward(batchnorm_forward(x, q));
      CHECK(max_abs_diff(lhs, rhs) == 0.0);
    }
  }
  SUBCASE("degenerate channel") {
    p = BatchNormParams::identity(2);
    p.weight = {1, 0};
    try {
      thresh_relu_forward(Tensor::vector({1, 1}), p);
      FAIL("expected throw");
    } catch (const DegenerateChannelError& e) {
      CHECK(e.channel() == 1);
    }
  }
}

TEST_CASE("kernels are pure") {
  std::mt19937_64 rng(6);
  auto x = testing::random_tensor({2, 6, 6}, rng);
  auto k = testing::random_tensor({2, 2, 3, 3}, rng);
  auto a = conv2d_forward(x, k, BiasTerm{}, {}, PadSpec::uniform(1));
  auto b = conv2d_forward(x, k, BiasTerm{}, {}, PadSpec::uniform(1));
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("pooling") {
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  CHECK(max_pool2d(x, 2, 2, {2, 2}) == Tensor({1, 1, 1}, {4}));
  CHECK(avg_pool2d(x, 2, 2, {2, 2}) == Tensor({1, 1, 1}, {2.5}));
  CHECK(global_avg_pool(x) == Tensor::vector({2.5}));
}
