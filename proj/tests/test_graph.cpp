#include <algorithm>

#include "canonxai/error.hpp"
#include "canonxai/graph.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace canonxai;

namespace {

ModelGraph single_linear() {
  ModelGraph g;
  g.add_node(make_input("x", {2}));
  g.add_node(make_linear("fc", "x", Tensor({2, 2}, {1, 0, 0, 1}), Tensor::vector({0, 0})));
  g.set_output("fc");
  return g;
}

ModelGraph parse(const SerializedModel& s) { return parse_model(s.manifest, s.blob); }

// Concat -> BN -> ReLU -> Conv, as in a dense block.
ModelGraph dense_block(std::mt19937_64& rng) {
  ModelGraph g;
  g.add_node(make_input("x", {2, 5, 5}));
  g.add_node(make_conv2d("c1", "x", testing::random_tensor({3, 2, 3, 3}, rng), testing::random_tensor({3}, rng),
                         {}, PadSpec::uniform(1)));
  g.add_node(make_concat("cat", {"x", "c1"}, {2, 3}));
  g.add_node(make_batchnorm("bn", "cat", testing::random_bn(5, rng)));
  g.add_node(make_simple("relu", LayerKind::ReLU, {"bn"}));
  g.add_node(make_conv2d("c2", "relu", testing::random_tensor({4, 5, 3, 3}, rng),
                         testing::random_tensor({4}, rng), {}, PadSpec::uniform(1)));
  g.set_output("c2");
  return g;
}

}  // namespace

TEST_CASE("forward on small graphs") {
  CHECK(forward(single_linear(), Tensor::vector({3, -1})).output == Tensor::vector({3, -1}));

  ModelGraph g;
  g.add_node(make_input("x", {1}));
  g.add_node(make_linear("fc", "x", Tensor({1, 1}, {2}), Tensor::vector({1})));
  g.add_node(make_simple("r", LayerKind::ReLU, {"fc"}));
  g.set_output("r");
  CHECK(forward(g, Tensor::vector({-3})).output == Tensor::vector({0}));
  CHECK_THROWS_AS(forward(g, Tensor::vector({1, 2})), NodeError);
}

TEST_CASE("dense block forward matches hand composition") {
  std::mt19937_64 rng(11);
  auto g = dense_block(rng);
  auto x = testing::random_tensor({2, 5, 5}, rng);
  const auto& c1 = g.node("c1");
  auto y1 = conv2d_forward(x, c1.param("weight"), conv_bias(c1), {}, PadSpec::uniform(1));
  Tensor cat({5, 5, 5});
  std::copy(x.data().begin(), x.data().end(), cat.data().begin());
  std::copy(y1.data().begin(), y1.data().end(), cat.data().begin() + 50);
  auto r = relu_forward(batchnorm_forward(cat, batchnorm_params(g.node("bn"))));
  const auto& c2 = g.node("c2");
  auto expect = conv2d_forward(r, c2.param("weight"), conv_bias(c2), {}, PadSpec::uniform(1));
  auto rec = forward(g, x, true);
  CHECK(bitwise_equal(rec.output, expect));
  CHECK(bitwise_equal(forward(g, x, false).output, rec.output));
  CHECK(rec.activations->size() == g.size());
  CHECK(concat_widths(g.node("cat")) == std::vector<std::size_t>{2, 3});
}

TEST_CASE("serialization round trip") {
  SUBCASE("single linear is byte identical") {
    auto s1 = save_model(single_linear());
    auto g = parse(s1);
    CHECK(g == single_linear());
    auto s2 = save_model(g);
    CHECK(s1.manifest == s2.manifest);
    CHECK(s1.blob == s2.blob);
  }
  SUBCASE("parameter-free graph") {
    ModelGraph g;
    g.add_node(make_input("x", {3}));
    g.add_node(make_simple("r", LayerKind::ReLU, {"x"}));
    g.set_output("r");
    CHECK(parse(save_model(g)) == g);
  }
  SUBCASE("dense block preserves forward bitwise") {
    std::mt19937_64 rng(12);
    auto g = dense_block(rng);
    auto g2 = parse(save_model(g));
    CHECK(g2 == g);
    for (int i = 0; i < 5; ++i) {
      auto x = testing::random_tensor({2, 5, 5}, rng);
      CHECK(bitwise_equal(forward(g, x).output, forward(g2, x).output));
    }
  }
}

TEST_CASE("load errors") {
  auto s = save_model(single_linear());
  SUBCASE("dangling node reference names the id") {
    auto m = s.manifest;
    auto pos = m.find("\"x\"\n");
    REQUIRE(pos != std::string::npos);
    m.replace(pos, 3, "\"conv9\"");
    try {
      parse_model(m, s.blob);
      FAIL("expected throw");
    } catch (const DanglingReferenceError& e) {
      CHECK(e.node_id() == "conv9");
    }
  }
  SUBCASE("blob out of range") {
    auto blob = s.blob;
    blob.resize(4);
    CHECK_THROWS_AS(parse_model(s.manifest, blob), BlobRangeError);
  }
  SUBCASE("not json") { CHECK_THROWS_AS(parse_model("{nope", s.blob), ParseError); }
  SUBCASE("cycle") {
    ModelGraph g;
    g.add_node(make_input("x", {2}));
    g.add_node(make_simple("a", LayerKind::Add, {"x", "b"}));
    g.add_node(make_simple("b", LayerKind::ReLU, {"a"}));
    g.set_output("b");
    auto ser = save_model(g);
    CHECK_THROWS_AS(parse(ser), CycleError);
  }
}

TEST_CASE("validate_graph") {
  std::mt19937_64 rng(13);
  CHECK(validate_graph(dense_block(rng)).empty());

  SUBCASE("batchnorm channel mismatch") {
    ModelGraph g;
    g.add_node(make_input("x", {3, 4, 4}));
    g.add_node(make_batchnorm("bn", "x", testing::random_bn(2, rng)));
    g.set_output("bn");
    auto v = validate_graph(g);
    REQUIRE(v.size() == 1);
    CHECK(v[0].node_ids.front() == "bn");
  }
  SUBCASE("cycle lists both ids") {
    ModelGraph g;
    g.add_node(make_input("x", {2}));
    g.add_node(make_simple("a", LayerKind::Add, {"x", "b"}));
    g.add_node(make_simple("b", LayerKind::ReLU, {"a"}));
    g.set_output("b");
    auto v = validate_graph(g);
    REQUIRE(!v.empty());
    auto cyc = std::find_if(v.begin(), v.end(), [](auto& x) { return x.kind == Violation::Kind::Cycle; });
    REQUIRE(cyc != v.end());
    CHECK(std::count(cyc->node_ids.begin(), cyc->node_ids.end(), "a") == 1);
    CHECK(std::count(cyc->node_ids.begin(), cyc->node_ids.end(), "b") == 1);
  }
}

TEST_CASE("default blob path") {
  CHECK(default_blob_path("dir/model.json") == "dir/model.bin");
  CHECK(default_blob_path("a.b/model") == "a.b/model.bin");
}
