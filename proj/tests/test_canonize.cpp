#include <cmath>

#include "canonxai/canonize.hpp"
#include "canonxai/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace canonxai;

namespace {

BatchNormParams scalar_bn(float w, float b, float mu, float var, float eps) {
  BatchNormParams p;
  p.weight = {w};
  p.bias = {b};
  p.mean = {mu};
  p.var = {var};
  p.eps = eps;
  return p;
}

Tensor apply(const LayerNode& n, const Tensor& x) { return evaluate_node(n, {&x}); }

}  // namespace

TEST_CASE("fuse_linear_then_bn") {
  SUBCASE("identity leaves node unchanged") {
    auto lin = make_linear("fc", "x", Tensor({2, 2}, {1, 2, 3, 4}), Tensor::vector({0.5, -1}));
    CHECK(fuse_linear_then_bn(lin, BatchNormParams::identity(2)) == lin);
  }
  SUBCASE("scalar hand example") {
    auto lin = make_linear("fc", "x", Tensor({1, 1}, {2}), Tensor::vector({1}));
    auto bn = scalar_bn(4, 0.5f, 1, 3, 1);
    auto f = fuse_linear_then_bn(lin, bn);
    CHECK(f.param("weight")[0] == 4.0f);
    CHECK(f.param("bias")[0] == 0.5f);
    for (float v : {-1.0f, 0.0f, 2.0f}) {
      auto x = Tensor::vector({v});
      CHECK(apply(f, x) == batchnorm_forward(apply(lin, x), bn));
    }
  }
  SUBCASE("random conv then bn") {
    std::mt19937_64 rng(21);
    auto conv = make_conv2d("c", "x", testing::random_tensor({3, 2, 3, 3}, rng, -0.5f, 0.5f),
                            testing::random_tensor({3}, rng), {}, PadSpec::uniform(1));
    auto bn = testing::random_bn(3, rng);
    auto f = fuse_linear_then_bn(conv, bn);
    double dev = 0;
    for (int i = 0; i < 50; ++i) {
      auto x = testing::random_tensor({2, 6, 6}, rng);
      dev = std::max(dev, max_abs_diff(apply(f, x), batchnorm_forward(apply(conv, x), bn)));
    }
    CHECK(dev <= 1e-5);
  }
  SUBCASE("channel mismatch") {
    auto lin = make_linear("fc", "x", Tensor({2, 2}), Tensor());
    CHECK_THROWS_AS(fuse_linear_then_bn(lin, BatchNormParams::identity(3)), DimensionError);
  }
}

TEST_CASE("fuse_bn_then_linear") {
  SUBCASE("padded conv worked example") {
    auto bn = BatchNormParams::identity(1);
    bn.bias = {1};
    auto conv = make_conv2d("c", "x", Tensor::filled({1, 1, 2, 2}, 1), Tensor(), {}, PadSpec::uniform(1));
    auto f = fuse_bn_then_linear(bn, conv, {1, 3, 3});
    REQUIRE(f.has_param("bias_map"));
    CHECK(f.param("bias_map") == Tensor({1, 4, 4}, {1, 2, 2, 1, 2, 4, 4, 2, 2, 4, 4, 2, 1, 2, 2, 1}));
    Tensor x({1, 3, 3}, {1, 2, 3, 2, 3, 4, 3, 4, 5});
    CHECK(apply(f, x) == Tensor({1, 4, 4}, {2, 5, 7, 4, 5, 12, 16, 9, 7, 16, 20, 11, 4, 9, 11, 6}));
  }
  SUBCASE("identity keeps scalar bias") {
    std::mt19937_64 rng(22);
    auto conv = make_conv2d("c", "x", testing::random_tensor({2, 2, 3, 3}, rng), testing::random_tensor({2}, rng),
                            {}, PadSpec::uniform(1));
    auto f = fuse_bn_then_linear(BatchNormParams::identity(2), conv, {2, 4, 4});
    CHECK(f == conv);
    CHECK(!f.has_param("bias_map"));
  }
  SUBCASE("random unpadded linear") {
    std::mt19937_64 rng(23);
    auto lin = make_linear("fc", "x", testing::random_tensor({4, 6}, rng), testing::random_tensor({4}, rng));
    auto bn = testing::random_bn(6, rng);
    auto f = fuse_bn_then_linear(bn, lin, {6});
    for (int i = 0; i < 50; ++i) {
      auto x = testing::random_tensor({6}, rng);
      CHECK(testing::max_rel_dev(apply(lin, batchnorm_forward(x, bn)), apply(f, x)) <= 1e-5);
    }
  }
  SUBCASE("padded conv with nonzero pad value and stride") {
    std::mt19937_64 rng(24);
    auto conv = make_conv2d("c", "x", testing::random_tensor({3, 2, 3, 3}, rng), testing::random_tensor({3}, rng),
                            {2, 1}, PadSpec{1, 2, 0, 1, 0.7f, {}});
    auto bn = testing::random_bn(2, rng);
    auto f = fuse_bn_then_linear(bn, conv, {2, 6, 5});
    CHECK(f.param("pad_value").numel() == 2);
    for (int i = 0; i < 20; ++i) {
      auto x = testing::random_tensor({2, 6, 5}, rng);
      CHECK(testing::max_rel_dev(apply(conv, batchnorm_forward(x, bn)), apply(f, x)) <= 1e-5);
    }
  }
  SUBCASE("nonzero pad with degenerate channel") {
    auto conv = make_conv2d("c", "x", Tensor::filled({1, 1, 2, 2}, 1), Tensor(), {}, PadSpec::uniform(1, 1.0f));
    auto bn = BatchNormParams::identity(1);
    bn.weight = {0};
    CHECK_THROWS_AS(fuse_bn_then_linear(bn, conv, {1, 3, 3}), DegenerateChannelError);
  }
}

TEST_CASE("swap_bn_relu") {
  SUBCASE("zero bias gives threshold = mean") {
    auto s = swap_bn_relu(scalar_bn(2, 0, 0.3f, 1.5f, 1e-5f));
    CHECK(s.threshold[0] == 0.3f);
  }
  SUBCASE("pointwise equivalence on a grid") {
    auto check_grid = [](const BatchNormParams& p) {
      auto s = swap_bn_relu(p);
      const std::size_t C = p.channels();
      Tensor x({C, 1, 101});
      for (std::size_t c = 0; c < C; ++c)
        for (int i = 0; i <= 100; ++i) x.at(c, 0, i) = -5.0f + 0.1f * float(i);
      auto lhs = batchnorm_forward(thresh_relu_forward(x, s.threshold, s.direction), s.bn);
      auto rhs = relu_forward(batchnorm_forward(x, p));
      return max_abs_diff(lhs, rhs);
    };
    auto p = scalar_bn(1, 1, 0, 1, 0);
    CHECK(swap_bn_relu(p).threshold[0] == -1.0f);
    CHECK(check_grid(p) == 0.0);
    BatchNormParams mixed;
    mixed.weight = {2, -3};
    mixed.bias = {0.5f, 1.5f};
    mixed.mean = {0, 0};
    mixed.var = {1, 1};
    mixed.eps = 0;
    CHECK(check_grid(mixed) == 0.0);
  }
  SUBCASE("degenerate") { CHECK_THROWS_AS(swap_bn_relu(scalar_bn(0, 1, 0, 1, 0)), DegenerateChannelError); }
}

TEST_CASE("fuse_bn_concat_linear") {
  std::mt19937_64 rng(25);
  auto composed = [](const BatchNormParams& bn, const std::vector<SliceRange>& slices, const LayerNode& lin,
                     Tensor x) {
    for (const auto& s : slices)
      for (std::size_t c = 0; c < s.width(); ++c) {
        const double v = double(bn.weight[c]) * (double(x[s.begin + c]) - bn.mean[c]) / bn.denom(c) + bn.bias[c];
        x[s.begin + c] = float(v);
      }
    return evaluate_node(lin, {&x});
  };
  SUBCASE("whole input slice equals plain fusion") {
    auto lin = make_linear("fc", "x", testing::random_tensor({3, 5}, rng), testing::random_tensor({3}, rng));
    auto bn = testing::random_bn(5, rng);
    CHECK(fuse_bn_concat_linear(bn, {{0, 5}}, lin) == fuse_bn_then_linear(bn, lin, {5}));
  }
  SUBCASE("relation network layout") {
    auto lin = make_linear("fc", "x", testing::random_tensor({32, 180}, rng, -0.5f, 0.5f),
                           testing::random_tensor({32}, rng));
    auto bn = testing::random_bn(24, rng);
    std::vector<SliceRange> sl{{0, 24}, {26, 50}};
    auto f = fuse_bn_concat_linear(bn, sl, lin);
    for (int i = 0; i < 20; ++i) {
      auto x = testing::random_tensor({180}, rng);
      CHECK(testing::max_rel_dev(composed(bn, sl, lin, x), apply(f, x)) <= 1e-5);
    }
    // columns outside the slices are untouched
    for (std::size_t r = 0; r < 32; ++r) CHECK(f.param("weight").at(r, 24) == lin.param("weight").at(r, 24));
  }
  SUBCASE("three random slices") {
    auto lin = make_linear("fc", "x", testing::random_tensor({6, 40}, rng), Tensor());
    auto bn = testing::random_bn(7, rng);
    std::vector<SliceRange> sl{{30, 37}, {2, 9}, {15, 22}};
    auto f = fuse_bn_concat_linear(bn, sl, lin);
    for (int i = 0; i < 20; ++i) {
      auto x = testing::random_tensor({40}, rng);
      CHECK(testing::max_rel_dev(composed(bn, sl, lin, x), apply(f, x)) <= 1e-5);
    }
  }
  SUBCASE("bad layouts") {
    auto lin = make_linear("fc", "x", Tensor({2, 10}), Tensor());
    auto bn = BatchNormParams::identity(3);
    CHECK_THROWS_AS(fuse_bn_concat_linear(bn, {{0, 3}, {2, 5}}, lin), ParameterError);
    CHECK_THROWS_AS(fuse_bn_concat_linear(bn, {{8, 11}}, lin), DimensionError);
    CHECK_THROWS_AS(fuse_bn_concat_linear(bn, {{0, 4}}, lin), DimensionError);
  }
}

TEST_CASE("canonize_graph on hand graphs") {
  std::mt19937_64 rng(26);
  SUBCASE("no batchnorm: unchanged, empty report") {
    ModelGraph g;
    g.add_node(make_input("x", {3}));
    g.add_node(make_linear("fc", "x", testing::random_tensor({2, 3}, rng), Tensor()));
    g.set_output("fc");
    auto r = canonize_graph(g);
    CHECK(r.graph == g);
    CHECK(r.report.fusions.empty());
    CHECK(r.report.unmatched.empty());
  }
  SUBCASE("bn as graph output after a relu stays and is reported") {
    ModelGraph g;
    g.add_node(make_input("x", {3}));
    g.add_node(make_simple("r", LayerKind::ReLU, {"x"}));
    g.add_node(make_batchnorm("bn", "r", testing::random_bn(3, rng)));
    g.set_output("bn");
    auto r = canonize_graph(g);
    CHECK(r.graph == g);
    REQUIRE(r.report.unmatched.size() == 1);
    CHECK(r.report.unmatched[0].bn_id == "bn");
  }
  SUBCASE("maxpool blocks the pool pattern") {
    ModelGraph g;
    g.add_node(make_input("x", {2, 4, 4}));
    g.add_node(make_simple("r0", LayerKind::ReLU, {"x"}));
    g.add_node(make_batchnorm("bn", "r0", testing::random_bn(2, rng)));
    g.add_node(make_simple("r", LayerKind::ReLU, {"bn"}));
    g.add_node(make_pool("mp", LayerKind::MaxPool, "r", 2, 2, {2, 2}));
    g.add_node(make_conv2d("c", "mp", testing::random_tensor({1, 2, 1, 1}, rng), Tensor(), {}, PadSpec{}));
    g.set_output("c");
    auto r = canonize_graph(g);
    CHECK(r.graph.count_kind(LayerKind::BatchNorm) == 1);
  }
  SUBCASE("bn-relu-avgpool-conv chain") {
    ModelGraph g;
    g.add_node(make_input("x", {2, 4, 4}));
    g.add_node(make_simple("r0", LayerKind::ReLU, {"x"}));
    g.add_node(make_batchnorm("bn", "r0", testing::random_bn(2, rng)));
    g.add_node(make_simple("r", LayerKind::ReLU, {"bn"}));
    g.add_node(make_pool("ap", LayerKind::AvgPool, "r", 2, 2, {2, 2}));
    g.add_node(make_conv2d("c", "ap", testing::random_tensor({3, 2, 1, 1}, rng), testing::random_tensor({3}, rng),
                           {}, PadSpec{}));
    g.set_output("c");
    auto r = canonize_graph(g);
    CHECK(r.graph.count_kind(LayerKind::BatchNorm) == 0);
    CHECK(r.report.thresh_relu_inserted == 1);
    CHECK(validate_graph(r.graph).empty());
    for (int i = 0; i < 20; ++i) {
      auto x = testing::random_tensor({2, 4, 4}, rng, -2, 2);
      CHECK(testing::max_rel_dev(forward(g, x).output, forward(r.graph, x).output) <= 1e-5);
    }
    CHECK(canonize_graph(r.graph).graph == r.graph);
  }
}
