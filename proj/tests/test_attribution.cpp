#include <cmath>
#include <numeric>

#include "canonxai/attribution.hpp"
#include "canonxai/canonize.hpp"
#include "canonxai/error.hpp"
#include "canonxai/fixtures.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace canonxai;

namespace {

LayerNode one_linear(std::vector<float> w) {
  const std::size_t n = w.size();
  return make_linear("fc", "x", Tensor({1, n}, std::move(w)), Tensor::vector({0.0f}));
}

double sum(const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0); }

// conv(1->2, 3x3, pad 1) -> relu -> flatten -> fc(32->3)
ModelGraph small_net(std::mt19937_64& rng) {
  ModelGraph g;
  g.add_node(make_input("x", {1, 4, 4}));
  g.add_node(make_conv2d("conv", "x", testing::random_tensor({2, 1, 3, 3}, rng), testing::random_tensor({2}, rng),
                         {1, 1}, PadSpec::uniform(1, 0.0f)));
  g.add_node(make_simple("relu", LayerKind::ReLU, {"conv"}));
  g.add_node(make_simple("flat", LayerKind::Flatten, {"relu"}));
  g.add_node(make_linear("fc", "flat", testing::random_tensor({3, 32}, rng), testing::random_tensor({3}, rng)));
  g.set_input("x");
  g.set_output("fc");
  return g;
}

using Matrix = std::vector<std::vector<double>>;

// Epsilon rule on an explicit weight matrix, all in double.
std::vector<double> eps_dense(const Matrix& w, const std::vector<double>& b, const std::vector<double>& a,
                              const std::vector<double>& r, double eps) {
  std::vector<double> out(a.size(), 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    double z = b[k];
    for (std::size_t j = 0; j < a.size(); ++j) z += a[j] * w[k][j];
    z += z >= 0 ? eps : -eps;
    for (std::size_t j = 0; j < a.size(); ++j) out[j] += a[j] * w[k][j] / z * r[k];
  }
  return out;
}

}  // namespace

TEST_CASE("rule examples on a single linear layer") {
  const auto a = Tensor::vector({1, 1});
  const auto r = Tensor::vector({4});
  SUBCASE("epsilon splits by contribution") {
    auto out = lrp_backward_linear(one_linear({1, 3}), a, r, RuleSpec::make_epsilon(1e-9));
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out[1] == doctest::Approx(3.0).epsilon(1e-6));
  }
  SUBCASE("gamma equals epsilon on positive weights and inputs") {
    const auto x = Tensor::vector({0.5f, 2.0f, 1.25f});
    const auto node = one_linear({0.3f, 1.1f, 0.7f});
    const auto ref = lrp_backward_linear(node, x, r, RuleSpec::make_epsilon());
    for (double gamma : {0.0, 0.25, 1.0, 10.0, 1e6}) {
      const auto out = lrp_backward_linear(node, x, r, RuleSpec::make_gamma(gamma));
      CHECK(max_abs_diff(out, ref) <= 1e-6);
    }
  }
  SUBCASE("alpha1beta0 drops negative contributions") {
    auto out = lrp_backward_linear(one_linear({2, -1}), a, Tensor::vector({1}), RuleSpec::make_alpha_beta(1, 0));
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == 0.0f);
  }
  SUBCASE("alpha2beta1") {
    // positive share 2 * 1, negative share -1 * 1
    auto out = lrp_backward_linear(one_linear({2, -1}), a, Tensor::vector({1}), RuleSpec::make_alpha_beta(2, 1));
    CHECK(out[0] == doctest::Approx(2.0));
    CHECK(out[1] == doctest::Approx(-1.0));
  }
  SUBCASE("zero denominator counts but does not throw") {
    LrpDiagnostics diag;
    auto out = lrp_backward_linear(one_linear({-1, -1}), a, Tensor::vector({1}), RuleSpec::make_alpha_beta(1, 0), &diag);
    CHECK(out[0] == 0.0f);
    CHECK(out[1] == 0.0f);
    CHECK(diag.zero_denominators == 1);
  }
  SUBCASE("box rule with bounds") {
    // x=(0.5,0.5), w=(1,-1), l=0, h=1: terms 0.5 and -0.5+1=0.5
    auto out = lrp_backward_linear(one_linear({1, -1}), Tensor::vector({0.5f, 0.5f}), Tensor::vector({2}),
                                   RuleSpec::make_box(0.0, 1.0));
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == doctest::Approx(1.0));
  }
}

TEST_CASE("rule validation") {
  CHECK_THROWS_AS(RuleSpec::make_epsilon(0.0).validate(), ParameterError);
  CHECK_THROWS_AS(RuleSpec::make_gamma(-1.0).validate(), ParameterError);
  CHECK_THROWS_AS(RuleSpec::make_alpha_beta(2.0, 0.0).validate(), ParameterError);
  CHECK_THROWS_AS(RuleSpec::make_box(1.0, 0.0).validate(), ParameterError);
  CHECK_NOTHROW(RuleSpec::make_alpha_beta(2.0, 1.0).validate());
}

TEST_CASE("passthrough nodes") {
  std::mt19937_64 rng(3);
  SUBCASE("relu is bitwise identity") {
    const auto x = testing::random_tensor({2, 3, 3}, rng);
    const auto r = testing::random_tensor({2, 3, 3}, rng);
    const auto out = lrp_backward_passthrough(make_simple("r", LayerKind::ReLU, {"x"}), {&x}, r);
    REQUIRE(out.size() == 1);
    CHECK(bitwise_equal(out[0], r));
  }
  SUBCASE("concat splits by slice") {
    const auto a = Tensor::vector({1, 2});
    const auto b = Tensor::vector({3, 4, 5});
    const auto r = Tensor::vector({10, 20, 30, 40, 50});
    const auto out = lrp_backward_passthrough(make_concat("c", {"a", "b"}, {2, 3}), {&a, &b}, r);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == Tensor::vector({10, 20}));
    CHECK(out[1] == Tensor::vector({30, 40, 50}));
  }
  SUBCASE("maxpool winner takes all") {
    const Tensor x({1, 2, 2}, {1, 2, 3, 4});
    const Tensor r({1, 1, 1}, {10});
    const auto out = lrp_backward_passthrough(make_pool("p", LayerKind::MaxPool, "x", 2, 2, {2, 2}), {&x}, r);
    CHECK(out[0] == Tensor({1, 2, 2}, {0, 0, 0, 10}));
  }
  SUBCASE("add splits by addend") {
    const auto a = Tensor::vector({1, -1});
    const auto b = Tensor::vector({3, 3});
    const auto r = Tensor::vector({8, 4});
    const auto out = lrp_backward_passthrough(make_simple("s", LayerKind::Add, {"a", "b"}), {&a, &b}, r);
    CHECK(out[0][0] == doctest::Approx(2.0));
    CHECK(out[1][0] == doctest::Approx(6.0));
    CHECK(out[0][1] == doctest::Approx(-2.0));
    CHECK(out[1][1] == doctest::Approx(6.0));
  }
}

TEST_CASE("attribute") {
  std::mt19937_64 rng(11);
  SUBCASE("single linear layer conserves the logit") {
    ModelGraph g;
    g.add_node(make_input("x", {5}));
    g.add_node(make_linear("fc", "x", testing::random_tensor({3, 5}, rng), {}));
    g.set_input("x");
    g.set_output("fc");
    const auto x = testing::random_tensor({5}, rng);
    const auto logits = forward(g, x).output;
    for (std::size_t t = 0; t < 3; ++t) {
      const double s = sum(attribute(g, x, t, composite_epsilon()));
      CHECK(std::abs(s - logits[t]) <= 1e-4 * std::abs(logits[t]) + 1e-7);
    }
  }
  SUBCASE("matches a dense-matrix oracle") {
    const auto g = small_net(rng);
    const auto x = testing::random_tensor({1, 4, 4}, rng);
    // unroll the convolution into a 32 x 16 matrix
    const auto& cw = g.node("conv").param("weight");
    const auto& cb = g.node("conv").param("bias");
    Matrix w1(32, std::vector<double>(16, 0.0));
    std::vector<double> b1(32);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          const std::size_t row = (o * 4 + i) * 4 + j;
          b1[row] = cb[o];
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = static_cast<int>(i) + di, jj = static_cast<int>(j) + dj;
              if (ii < 0 || jj < 0 || ii >= 4 || jj >= 4) continue;
              w1[row][static_cast<std::size_t>(ii * 4 + jj)] =
                  cw[o * 9 + static_cast<std::size_t>((di + 1) * 3 + dj + 1)];
            }
        }
    const auto& fw = g.node("fc").param("weight");
    const auto& fb = g.node("fc").param("bias");
    Matrix w2(3, std::vector<double>(32));
    std::vector<double> b2(3);
    for (std::size_t k = 0; k < 3; ++k) {
      b2[k] = fb[k];
      for (std::size_t j = 0; j < 32; ++j) w2[k][j] = fw.at(k, j);
    }
    std::vector<double> a0(x.data().begin(), x.data().end()), a1(32);
    for (std::size_t r = 0; r < 32; ++r) {
      double z = b1[r];
      for (std::size_t j = 0; j < 16; ++j) z += w1[r][j] * a0[j];
      a1[r] = std::max(0.0, z);
    }
    for (std::size_t t = 0; t < 3; ++t) {
      double logit = b2[t];
      for (std::size_t j = 0; j < 32; ++j) logit += w2[t][j] * a1[j];
      std::vector<double> r2(3, 0.0);
      r2[t] = logit;
      const auto r1 = eps_dense(w2, b2, a1, r2, kDefaultLrpEpsilon);
      const auto r0 = eps_dense(w1, b1, a0, r1, kDefaultLrpEpsilon);
      const auto got = attribute(g, x, t, composite_epsilon());
      double scale = 0.0, diff = 0.0;
      for (std::size_t i = 0; i < 16; ++i) {
        scale = std::max(scale, std::abs(r0[i]));
        diff = std::max(diff, std::abs(r0[i] - got[i]));
      }
      CHECK(diff <= 1e-5 * scale);
    }
  }
  SUBCASE("gamma zero equals epsilon on a fixture") {
    const auto fx = build_fixture("vgg_like", 7);
    const auto x = testing::random_tensor({3, 12, 12}, rng, 0.0f, 1.0f);
    const auto a = attribute(fx.graph, x, 2, composite_gamma({}, 0.0));
    const auto b = attribute(fx.graph, x, 2, composite_epsilon());
    CHECK(max_abs_diff(a, b) <= 1e-6);
  }
  SUBCASE("target out of range") {
    const auto fx = build_fixture("vgg_like", 7);
    CHECK_THROWS_AS(attribute(fx.graph, Tensor({3, 12, 12}), 5, composite_epsilon()), ParameterError);
  }
}

TEST_CASE("scaling the classifier leaves the normalized heatmap unchanged") {
  std::mt19937_64 rng(5);
  auto fx = build_fixture("vgg_like", 3);
  const auto x = testing::random_tensor({3, 12, 12}, rng, 0.0f, 1.0f);
  const auto ref = pool_channels(attribute(fx.graph, x, 1, composite_eps_plus()), PoolMethod::Sum);
  for (auto& v : fx.graph.node("fc2").params.at("weight").data()) v *= 4.0f;
  for (auto& v : fx.graph.node("fc2").params.at("bias").data()) v *= 4.0f;
  const auto scaled = pool_channels(attribute(fx.graph, x, 1, composite_eps_plus()), PoolMethod::Sum);
  CHECK(max_abs_diff(normalize_heatmap(scaled), normalize_heatmap(ref)) <= 1e-6);
}

TEST_CASE("gradient saliency") {
  std::mt19937_64 rng(17);
  SUBCASE("linear graph gives the weight row") {
    ModelGraph g;
    g.add_node(make_input("x", {4}));
    const auto w = testing::random_tensor({2, 4}, rng);
    g.add_node(make_linear("fc", "x", w, Tensor::vector({0.1f, 0.2f})));
    g.set_input("x");
    g.set_output("fc");
    const auto s = gradient_saliency(g, testing::random_tensor({4}, rng), 1);
    for (std::size_t j = 0; j < 4; ++j) CHECK(s[j] == w.at(1, j));
  }
  for (const auto& name : fixture_names()) {
    CAPTURE(name);
    const auto fx = build_fixture(name, 7);
    const auto shape = fx.graph.input_shape();
    auto x = testing::random_tensor(shape, rng, 0.0f, 1.0f);
    const auto s = gradient_saliency(fx.graph, x, 0);
    const auto canon = canonize_graph(fx.graph).graph;
    CHECK(max_abs_diff(gradient_saliency(canon, x, 0), s) <= 1e-5);
    std::uniform_int_distribution<std::size_t> pick(0, x.numel() - 1);
    for (int t = 0; t < 10; ++t) {
      const std::size_t i = pick(rng);
      const float keep = x[i];
      const double h = 1e-3;
      x[i] = static_cast<float>(keep + h);
      const double up = forward(fx.graph, x).output[0];
      x[i] = static_cast<float>(keep - h);
      const double down = forward(fx.graph, x).output[0];
      x[i] = keep;
      CHECK(std::abs((up - down) / (2 * h) - s[i]) <= 1e-2);
    }
  }
}

TEST_CASE("pooling and normalization") {
  const Tensor r({3, 1, 1}, {1, -2, 3});
  CHECK(pool_channels(r, PoolMethod::Sum)[0] == 2.0f);
  CHECK(pool_channels(r, PoolMethod::PosL2NormSq)[0] == 10.0f);
  CHECK(pool_channels(r, PoolMethod::MaxNorm)[0] == 3.0f);
  const Tensor neg({2, 1, 1}, {1, -5});
  CHECK(pool_channels(neg, PoolMethod::MaxNorm)[0] == 5.0f);
  for (auto m : {PoolMethod::Sum, PoolMethod::PosL2NormSq, PoolMethod::MaxNorm}) {
    CHECK(pool_channels(Tensor({2, 2, 2}), m) == Tensor({2, 2}));
    CHECK(parse_pool_method(to_string(m)) == m);
  }
  const Tensor single({1, 2, 2}, {1, -2, 3, 4});
  CHECK(pool_channels(single, PoolMethod::Sum) == Tensor({2, 2}, {1, -2, 3, 4}));
  CHECK_THROWS_AS(parse_pool_method("l1"), ParameterError);

  CHECK(normalize_heatmap(Tensor::filled({2, 3}, -2.5f)) == Tensor::filled({2, 3}, -1.0f));
  CHECK(normalize_heatmap(Tensor({2, 3})) == Tensor({2, 3}));
  std::mt19937_64 rng(9);
  const auto n = normalize_heatmap(testing::random_tensor({8, 8}, rng, -3.0f, 5.0f));
  double m2 = 0.0;
  for (float v : n.data()) m2 += double(v) * v;
  CHECK(m2 / 64.0 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("composites") {
  const auto fx = build_fixture("vgg_like", 7);
  const auto custom = composite_custom().resolve(fx.graph);
  CHECK(custom.at("conv1").kind == RuleSpec::Kind::Box);
  CHECK(custom.at("conv2").kind == RuleSpec::Kind::AlphaBeta);
  CHECK(custom.at("fc1").kind == RuleSpec::Kind::AlphaBeta);
  const auto epsplus = composite_eps_plus().resolve(fx.graph);
  CHECK(epsplus.at("conv3").kind == RuleSpec::Kind::AlphaBeta);
  CHECK(epsplus.at("fc2").kind == RuleSpec::Kind::Epsilon);
  const auto a2b1 = composite_a2b1().resolve(fx.graph);
  CHECK(a2b1.at("conv1").alpha == 2.0);
  CHECK(a2b1.at("conv1").beta == 1.0);
  const auto gamma = composite_gamma({{"low", 0.25}, {"mid", 10.0}}, 0.5).resolve(fx.graph);
  CHECK(gamma.at("conv1").gamma == 0.25);
  CHECK(gamma.at("conv2").gamma == 10.0);
  CHECK(gamma.at("conv3").gamma == 0.5);
  for (const auto& name : builtin_composite_names()) CHECK(builtin_composite(name).name == name);
  CHECK_THROWS_AS(builtin_composite("nope"), ParameterError);
}
