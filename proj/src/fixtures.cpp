#include "canonxai/fixtures.hpp"

#include <cmath>
#include <cstdio>

#include "canonxai/error.hpp"
#include "canonxai/rng.hpp"

namespace canonxai {

namespace {

class Builder {
 public:
  Builder(std::uint64_t seed, const FixtureOptions& opt) : rng_(seed), opt_(opt) {}

  Tensor weights(const Shape& shape) {
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<float>(rng_.uniform(-0.5, 0.5));
    return t;
  }

  Tensor bias(std::size_t n) { return opt_.bias_free ? Tensor() : weights({n}); }

  BatchNormParams bn(std::size_t channels) {
    BatchNormParams p;
    p.eps = 1e-5f;
    for (std::size_t c = 0; c < channels; ++c) {
      const float sign = rng_.uniform() < 0.5 ? -1.0f : 1.0f;
      p.weight.push_back(sign * static_cast<float>(rng_.uniform(0.5, 1.5)));
      p.mean.push_back(static_cast<float>(rng_.uniform(-0.5, 0.5)));
      p.var.push_back(static_cast<float>(rng_.uniform(0.5, 2.0)));
      p.bias.push_back(static_cast<float>(rng_.uniform(-0.5, 0.5)));
    }
    if (opt_.bias_free) make_shift_free(p);
    return p;
  }

  static void make_shift_free(BatchNormParams& p) {
    for (std::size_t c = 0; c < p.channels(); ++c)
      p.bias[c] = static_cast<float>(static_cast<double>(p.weight[c]) * p.mean[c] / p.denom(c));
  }

  LayerNode conv(std::string id, std::string in, std::size_t ci, std::size_t co, std::size_t k, std::size_t pad,
                 std::string group, std::size_t stride = 1) {
    return make_conv2d(std::move(id), std::move(in), weights({co, ci, k, k}), bias(co), {stride, stride},
                       PadSpec::uniform(pad), std::move(group));
  }

  LayerNode linear(std::string id, std::string in, std::size_t n, std::size_t m, std::string group) {
    return make_linear(std::move(id), std::move(in), weights({m, n}), bias(m), std::move(group));
  }

  Rng& rng() { return rng_; }
  const FixtureOptions& options() const { return opt_; }

 private:
  Rng rng_;
  FixtureOptions opt_;
};

LayerNode relu(std::string id, std::string in) { return make_simple(std::move(id), LayerKind::ReLU, {std::move(in)}); }

// (Conv -> BN -> ReLU) x 3 with a max pool, then a two-layer classifier.
ModelGraph vgg_like(Builder& b) {
  ModelGraph g;
  g.add_node(make_input("input", {3, 12, 12}));
  g.add_node(b.conv("conv1", "input", 3, 4, 3, 1, "low"));
  g.add_node(make_batchnorm("bn1", "conv1", b.bn(4), "low"));
  g.add_node(relu("relu1", "bn1"));
  g.add_node(b.conv("conv2", "relu1", 4, 6, 3, 1, "mid"));
  g.add_node(make_batchnorm("bn2", "conv2", b.bn(6), "mid"));
  g.add_node(relu("relu2", "bn2"));
  g.add_node(make_pool("pool2", LayerKind::MaxPool, "relu2", 2, 2, {2, 2}));
  g.add_node(b.conv("conv3", "pool2", 6, 8, 3, 1, "high"));
  g.add_node(make_batchnorm("bn3", "conv3", b.bn(8), "high"));
  g.add_node(relu("relu3", "bn3"));
  g.add_node(make_simple("flatten", LayerKind::Flatten, {"relu3"}));
  g.add_node(b.linear("fc1", "flatten", 8 * 6 * 6, 16, "classifier"));
  g.add_node(relu("relu4", "fc1"));
  g.add_node(b.linear("fc2", "relu4", 16, 5, "classifier"));
  g.set_output("fc2");
  return g;
}

// Residual block with an identity skip joined by Add.
ModelGraph resnet_like(Builder& b) {
  ModelGraph g;
  g.add_node(make_input("input", {3, 8, 8}));
  g.add_node(b.conv("conv0", "input", 3, 4, 3, 1, "low"));
  g.add_node(make_batchnorm("bn0", "conv0", b.bn(4), "low"));
  g.add_node(relu("relu0", "bn0"));
  g.add_node(b.conv("conv1", "relu0", 4, 4, 3, 1, "mid"));
  g.add_node(make_batchnorm("bn1", "conv1", b.bn(4), "mid"));
  g.add_node(relu("relu1", "bn1"));
  g.add_node(b.conv("conv2", "relu1", 4, 4, 3, 1, "mid"));
  g.add_node(make_batchnorm("bn2", "conv2", b.bn(4), "mid"));
  g.add_node(make_simple("add", LayerKind::Add, {"bn2", "relu0"}));
  g.add_node(relu("relu2", "add"));
  g.add_node(b.conv("conv3", "relu2", 4, 6, 3, 1, "high", 2));
  g.add_node(make_batchnorm("bn3", "conv3", b.bn(6), "high"));
  g.add_node(relu("relu3", "bn3"));
  g.add_node(make_simple("gap", LayerKind::GlobalAvgPool, {"relu3"}));
  g.add_node(b.linear("fc", "gap", 6, 5, "classifier"));
  g.set_output("fc");
  return g;
}

// Stem, two dense layers (Concat -> BN -> ReLU -> Conv), a transition
// (BN -> ReLU -> AvgPool -> Conv), one more dense layer and the
// BN -> ReLU -> GlobalAvgPool -> Linear head.
ModelGraph densenet_like(Builder& b) {
  ModelGraph g;
  g.add_node(make_input("input", {3, 8, 8}));
  g.add_node(b.conv("conv0", "input", 3, 4, 3, 1, "low"));
  g.add_node(make_batchnorm("bn0", "conv0", b.bn(4), "low"));
  g.add_node(relu("relu0", "bn0"));

  g.add_node(make_batchnorm("block1.bn", "relu0", b.bn(4), "mid"));
  g.add_node(relu("block1.relu", "block1.bn"));
  g.add_node(b.conv("block1.conv", "block1.relu", 4, 4, 3, 1, "mid"));
  g.add_node(make_concat("block1.cat", {"relu0", "block1.conv"}, {4, 4}));

  g.add_node(make_batchnorm("block2.bn", "block1.cat", b.bn(8), "mid"));
  g.add_node(relu("block2.relu", "block2.bn"));
  g.add_node(b.conv("block2.conv", "block2.relu", 8, 4, 3, 1, "mid"));
  g.add_node(make_concat("block2.cat", {"block1.cat", "block2.conv"}, {8, 4}));

  g.add_node(make_batchnorm("trans.bn", "block2.cat", b.bn(12), "high"));
  g.add_node(relu("trans.relu", "trans.bn"));
  g.add_node(make_pool("trans.pool", LayerKind::AvgPool, "trans.relu", 2, 2, {2, 2}));
  g.add_node(b.conv("trans.conv", "trans.pool", 12, 6, 1, 0, "high"));

  g.add_node(make_batchnorm("block3.bn", "trans.conv", b.bn(6), "high"));
  g.add_node(relu("block3.relu", "block3.bn"));
  g.add_node(b.conv("block3.conv", "block3.relu", 6, 4, 3, 1, "high"));
  g.add_node(make_concat("block3.cat", {"trans.conv", "block3.conv"}, {6, 4}));

  g.add_node(make_batchnorm("final.bn", "block3.cat", b.bn(10), "classifier"));
  g.add_node(relu("final.relu", "final.bn"));
  g.add_node(make_simple("gap", LayerKind::GlobalAvgPool, {"final.relu"}));
  g.add_node(b.linear("fc", "gap", 10, 5, "classifier"));
  g.set_output("fc");
  return g;
}

// Convolutional encoder feeding a relation head whose input concatenates
// two normalized object vectors, two coordinate pairs and a question code.
ModelGraph rn_like(Builder& b) {
  ModelGraph g;
  g.add_node(make_input("input", {3, 6, 6}));
  g.add_node(b.conv("enc.conv1", "input", 3, 4, 3, 1, "low"));
  g.add_node(relu("enc.relu1", "enc.conv1"));
  g.add_node(make_batchnorm("enc.bn", "enc.relu1", b.bn(4), "low"));
  g.add_node(b.conv("enc.conv2", "enc.bn", 4, 8, 3, 1, "mid", 2));
  g.add_node(relu("enc.relu2", "enc.conv2"));
  g.add_node(make_simple("enc.flat", LayerKind::Flatten, {"enc.relu2"}));

  const BatchNormParams object_bn = b.bn(24);
  g.add_node(b.linear("obj1.fc", "enc.flat", 72, 24, "high"));
  g.add_node(relu("obj1.relu", "obj1.fc"));
  g.add_node(make_batchnorm("obj1.bn", "obj1.relu", object_bn, "high"));
  g.add_node(b.linear("coord1", "enc.flat", 72, 2, "high"));
  g.add_node(b.linear("obj2.fc", "enc.flat", 72, 24, "high"));
  g.add_node(relu("obj2.relu", "obj2.fc"));
  g.add_node(make_batchnorm("obj2.bn", "obj2.relu", object_bn, "high"));
  g.add_node(b.linear("coord2", "enc.flat", 72, 2, "high"));
  g.add_node(b.linear("question.fc", "enc.flat", 72, 128, "high"));
  g.add_node(relu("question.relu", "question.fc"));

  g.add_node(make_concat("pair", {"obj1.bn", "coord1", "obj2.bn", "coord2", "question.relu"},
                         {std::begin(kRelationHeadWidths), std::end(kRelationHeadWidths)}));
  g.add_node(b.linear("g.fc", "pair", 180, 32, "classifier"));
  g.add_node(relu("g.relu", "g.fc"));
  g.add_node(b.linear("f.fc", "g.relu", 32, 4, "classifier"));
  g.set_output("f.fc");
  return g;
}

// A BN whose output feeds both a ReLU -> Conv branch and a plain Conv;
// no rewrite covers it.
ModelGraph fanout_bn(Builder& b) {
  ModelGraph g;
  g.add_node(make_input("input", {3, 6, 6}));
  g.add_node(b.conv("conv0", "input", 3, 4, 3, 1, "low"));
  g.add_node(relu("relu0", "conv0"));
  g.add_node(make_batchnorm("bn", "relu0", b.bn(4), "mid"));
  g.add_node(relu("relu1", "bn"));
  g.add_node(b.conv("conv1", "relu1", 4, 4, 3, 1, "mid"));
  g.add_node(b.conv("conv2", "bn", 4, 4, 1, 0, "mid"));
  g.add_node(make_simple("add", LayerKind::Add, {"conv1", "conv2"}));
  g.add_node(relu("relu2", "add"));
  g.add_node(make_simple("gap", LayerKind::GlobalAvgPool, {"relu2"}));
  g.add_node(b.linear("fc", "gap", 4, 3, "classifier"));
  g.set_output("fc");
  return g;
}

// --- corner detector -----------------------------------------------------------

constexpr std::size_t kCornerSize = 16;
constexpr std::size_t kCornerChannels = 4;
constexpr std::size_t kSquare = 4;
constexpr std::size_t kCornerSamples = 20;

// Kernel close to a centred delta on `source`, with small mixed-sign taps.
Tensor near_delta(Builder& b, std::size_t co, std::size_t ci, std::size_t k) {
  Tensor w({co, ci, k, k});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t t = 0; t < k * k; ++t) {
        const bool centre = t == (k * k) / 2 && (ci == 1 || c == o);
        const double jitter = b.rng().uniform(-0.08, 0.08);
        w[(o * ci + c) * k * k + t] = static_cast<float>((centre ? 1.0 : 0.0) + jitter);
      }
  return w;
}

// BN with positive scale, non-trivial statistics and a folded offset of
// -0.1 on even channels (0.05 on odd ones), so the canonized network
// carries small negative biases.
BatchNormParams corner_bn(Builder& b, std::size_t channels) {
  BatchNormParams p;
  p.eps = 1e-5f;
  for (std::size_t c = 0; c < channels; ++c) {
    p.weight.push_back(static_cast<float>(b.rng().uniform(0.8, 1.2)));
    p.mean.push_back(static_cast<float>(b.rng().uniform(0.0, 0.1)));
    p.var.push_back(static_cast<float>(b.rng().uniform(0.5, 2.0)));
    p.bias.push_back(0.0f);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    const double target = c % 2 == 0 ? -0.1 : 0.05;
    p.bias[c] = static_cast<float>(target + static_cast<double>(p.weight[c]) * p.mean[c] / p.denom(c));
  }
  if (b.options().bias_free) Builder::make_shift_free(p);
  return p;
}

ModelGraph corner_detector(Builder& b) {
  const std::size_t C = kCornerChannels;
  ModelGraph g;
  g.add_node(make_input("input", {1, kCornerSize, kCornerSize}));
  g.add_node(make_conv2d("conv1", "input", near_delta(b, C, 1, 3), Tensor(), {}, PadSpec::uniform(1), "low"));
  g.add_node(make_batchnorm("bn1", "conv1", corner_bn(b, C), "low"));
  g.add_node(relu("relu1", "bn1"));
  g.add_node(make_pool("pool1", LayerKind::AvgPool, "relu1", 2, 2, {2, 2}));
  g.add_node(make_conv2d("conv2", "pool1", near_delta(b, C, C, 3), Tensor(), {}, PadSpec::uniform(1), "mid"));
  g.add_node(make_batchnorm("bn2", "conv2", corner_bn(b, C), "mid"));
  g.add_node(relu("relu2", "bn2"));
  g.add_node(make_conv2d("conv3", "relu2", near_delta(b, C, C, 1), Tensor(), {}, PadSpec{}, "high"));
  g.add_node(make_batchnorm("bn3", "conv3", corner_bn(b, C), "high"));
  g.add_node(relu("relu3", "bn3"));
  g.add_node(make_pool("pool2", LayerKind::AvgPool, "relu3", 4, 4, {4, 4}));
  g.add_node(make_simple("flatten", LayerKind::Flatten, {"pool2"}));
  // Feature index c*4 + quadrant; logit q rewards its own quadrant.
  Tensor w({4, C * 4});
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < 4; ++f) w.at(q, c * 4 + f) = f == q ? 1.0f : -1.0f / 3.0f;
  g.add_node(make_linear("fc", "flatten", std::move(w), Tensor(), "classifier"));
  g.set_output("fc");
  return g;
}

std::vector<Sample> corner_dataset(Builder& b) {
  std::vector<Sample> out;
  const std::size_t half = kCornerSize / 2;
  for (std::size_t i = 0; i < kCornerSamples; ++i) {
    const std::size_t quadrant = i % 4;
    Sample s;
    char id[16];
    std::snprintf(id, sizeof id, "s%02zu", i);
    s.id = id;
    s.label = quadrant;
    s.image = Tensor({1, kCornerSize, kCornerSize});
    for (auto& v : s.image.data()) v = static_cast<float>(b.rng().uniform(0.0, 0.2));
    // keep the square clear of the quadrant borders
    const std::size_t top = (quadrant / 2) * half + 1 + b.rng().index(half - kSquare - 1);
    const std::size_t left = (quadrant % 2) * half + 1 + b.rng().index(half - kSquare - 1);
    Tensor mask({kCornerSize, kCornerSize});
    for (std::size_t r = top; r < top + kSquare; ++r)
      for (std::size_t c = left; c < left + kSquare; ++c) {
        s.image.at(0, r, c) = static_cast<float>(b.rng().uniform(0.8, 1.0));
        mask.at(r, c) = 1.0f;
      }
    s.mask = std::move(mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<std::string> fixture_names() {
  return {"vgg_like", "resnet_like", "densenet_like", "rn_like", "corner_detector", "fanout_bn"};
}

Fixture build_fixture(std::string_view name, std::uint64_t seed, const FixtureOptions& options) {
  Builder b(seed, options);
  Fixture f;
  f.name = std::string(name);
  if (name == "vgg_like") f.graph = vgg_like(b);
  else if (name == "resnet_like") f.graph = resnet_like(b);
  else if (name == "densenet_like") f.graph = densenet_like(b);
  else if (name == "rn_like") f.graph = rn_like(b);
  else if (name == "fanout_bn") f.graph = fanout_bn(b);
  else if (name == "corner_detector") {
    f.graph = corner_detector(b);
    f.dataset = corner_dataset(b);
  } else {
    throw ParameterError("unknown fixture '" + std::string(name) + "'");
  }
  return f;
}

}  // namespace canonxai
