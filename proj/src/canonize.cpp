#include "canonxai/canonize.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "canonxai/error.hpp"
#include "json.hpp"

namespace canonxai {

namespace {

constexpr std::array<std::pair<Pass, std::string_view>, 5> kPassNames{{
    {Pass::LinearThenBn, "linear-bn"},
    {Pass::BnThenLinear, "bn-linear"},
    {Pass::BnReluLinear, "bn-relu-linear"},
    {Pass::BnReluPoolLinear, "bn-relu-pool-linear"},
    {Pass::BnConcatLinear, "bn-concat-linear"},
}};

bool is_linear(const LayerNode& n) {
  return n.kind == LayerKind::Linear || n.kind == LayerKind::Conv2d;
}

/// Output-channel count and elements per output channel of a Linear/Conv weight.
std::pair<std::size_t, std::size_t> rows_of(const Tensor& w) {
  return {w.dim(0), w.numel() / w.dim(0)};
}

bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

Tensor to_tensor(const Shape& shape, const std::vector<double>& v) {
  std::vector<float> f(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
  return Tensor(shape, std::move(f));
}

}  // namespace

std::string_view to_string(Pass pass) {
  for (const auto& [p, name] : kPassNames)
    if (p == pass) return name;
  return "unknown";
}

std::optional<Pass> parse_pass(std::string_view name) {
  for (const auto& [p, n] : kPassNames)
    if (n == name) return p;
  return std::nullopt;
}

std::vector<Pass> default_passes() {
  return {Pass::LinearThenBn, Pass::BnThenLinear, Pass::BnReluLinear, Pass::BnReluPoolLinear,
          Pass::BnConcatLinear};
}

std::string FusionReport::to_json() const {
  nlohmann::json j;
  j["passes"] = passes;
  nlohmann::json f = nlohmann::json::array();
  for (const auto& r : fusions) {
    f.push_back({{"pass", r.pass}, {"removed_bn", r.removed_bn}, {"absorbing_node", r.absorbing_node}});
  }
  j["fusions"] = f;
  j["thresh_relu_inserted"] = thresh_relu_inserted;
  j["bias_maps_materialized"] = bias_maps_materialized;
  nlohmann::json u = nlohmann::json::array();
  for (const auto& r : unmatched) u.push_back({{"bn_id", r.bn_id}, {"reason", r.reason}});
  j["unmatched"] = u;
  return j.dump(2) + "\n";
}

LayerNode fuse_linear_then_bn(const LayerNode& linear, const BatchNormParams& bn) {
  if (!is_linear(linear)) {
    throw ParameterError(linear.id + ": Linear->BN fusion needs a Linear or Conv2d node");
  }
  bn.validate();
  const Tensor& w = linear.param("weight");
  const auto [rows, per_row] = rows_of(w);
  if (rows != bn.channels()) {
    throw DimensionError(linear.id + ": " + std::to_string(rows) + " output channels vs " +
                         std::to_string(bn.channels()) + " batchnorm channels");
  }
  LayerNode out = linear;
  Tensor nw(w.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double sc = bn.scale(r);
    for (std::size_t k = 0; k < per_row; ++k) {
      nw[r * per_row + k] = static_cast<float>(sc * static_cast<double>(w[r * per_row + k]));
    }
  }
  out.params["weight"] = std::move(nw);

  if (linear.has_param("bias_map")) {
    const Tensor& map = linear.param("bias_map");
    const std::size_t plane = map.numel() / rows;
    Tensor nm(map.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double sc = bn.scale(r);
      for (std::size_t p = 0; p < plane; ++p) {
        const double b = map[r * plane + p];
        nm[r * plane + p] = static_cast<float>(sc * (b - bn.mean[r]) + bn.bias[r]);
      }
    }
    out.params["bias_map"] = std::move(nm);
    return out;
  }

  std::vector<double> nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double bl = linear.has_param("bias") ? static_cast<double>(linear.param("bias")[r]) : 0.0;
    nb[r] = bn.scale(r) * (bl - static_cast<double>(bn.mean[r])) + static_cast<double>(bn.bias[r]);
  }
  if (linear.has_param("bias") || !all_zero(nb)) out.params["bias"] = to_tensor({rows}, nb);
  return out;
}

LayerNode fuse_bn_then_linear(const BatchNormParams& bn, const LayerNode& linear,
                              const Shape& input_shape) {
  if (!is_linear(linear)) {
    throw ParameterError(linear.id + ": BN->Linear fusion needs a Linear or Conv2d node");
  }
  bn.validate();
  const Tensor& w = linear.param("weight");
  const std::size_t in_channels = w.dim(1);
  if (in_channels != bn.channels() || input_shape.empty() || input_shape[0] != in_channels) {
    throw DimensionError(linear.id + ": " + std::to_string(in_channels) + " input channels vs " +
                         std::to_string(bn.channels()) + " batchnorm channels");
  }
  const std::size_t rows = w.dim(0);
  const std::size_t taps = w.numel() / (rows * in_channels);  // kh*kw, or 1 for Linear

  std::vector<double> shift(in_channels);
  for (std::size_t c = 0; c < in_channels; ++c) shift[c] = bn.shift(c);

  LayerNode out = linear;
  Tensor nw(w.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < in_channels; ++c) {
      const double sc = bn.scale(c);
      for (std::size_t t = 0; t < taps; ++t) {
        const std::size_t idx = (r * in_channels + c) * taps + t;
        nw[idx] = static_cast<float>(sc * static_cast<double>(w[idx]));
      }
    }
  out.params["weight"] = std::move(nw);

  if (linear.kind == LayerKind::Conv2d) {
    PadSpec pad = conv_pad(linear);
    if (!pad.all_values_zero()) {
      std::vector<float> scaled(in_channels);
      for (std::size_t c = 0; c < in_channels; ++c) {
        if (std::abs(static_cast<double>(bn.weight[c])) <= kDegenerateScaleTolerance) {
          throw DegenerateChannelError(
              linear.id + ": nonzero pad value cannot be rescaled for degenerate batchnorm channel " +
                  std::to_string(c),
              c);
        }
        scaled[c] = static_cast<float>(static_cast<double>(pad.value_for(c)) / bn.scale(c));
      }
      out.params["pad_value"] = Tensor::vector(std::move(scaled));
    }
    if (!all_zero(shift)) {
      if (pad.any()) {
        // Spatially varying bias: the BN offset only covers the unpadded area.
        Tensor offset(input_shape);
        const std::size_t plane = offset.numel() / in_channels;
        for (std::size_t c = 0; c < in_channels; ++c)
          for (std::size_t p = 0; p < plane; ++p) offset[c * plane + p] = static_cast<float>(shift[c]);
        PadSpec zero_pad = pad;
        zero_pad.value = 0.0f;
        zero_pad.channel_values.clear();
        const Tensor contribution = conv2d_forward(offset, w, BiasTerm{}, node_stride(linear), zero_pad);
        Tensor map(contribution.shape());
        const std::size_t oplane = map.numel() / rows;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t p = 0; p < oplane; ++p) {
            double b = contribution[r * oplane + p];
            if (linear.has_param("bias_map")) b += linear.param("bias_map")[r * oplane + p];
            else if (linear.has_param("bias")) b += linear.param("bias")[r];
            map[r * oplane + p] = static_cast<float>(b);
          }
        out.params.erase("bias");
        out.params["bias_map"] = std::move(map);
        return out;
      }
      std::vector<double> delta(rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < in_channels; ++c)
          for (std::size_t t = 0; t < taps; ++t)
            delta[r] += static_cast<double>(w[(r * in_channels + c) * taps + t]) * shift[c];
      if (linear.has_param("bias_map")) {
        Tensor map = linear.param("bias_map");
        const std::size_t oplane = map.numel() / rows;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t p = 0; p < oplane; ++p)
            map[r * oplane + p] = static_cast<float>(map[r * oplane + p] + delta[r]);
        out.params["bias_map"] = std::move(map);
      } else {
        for (std::size_t r = 0; r < rows; ++r)
          if (linear.has_param("bias")) delta[r] += linear.param("bias")[r];
        out.params["bias"] = to_tensor({rows}, delta);
      }
    }
    return out;
  }

  // Linear: b_new = W * shift + b_L
  if (!all_zero(shift)) {
    std::vector<double> nb(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < in_channels; ++c) nb[r] += static_cast<double>(w[r * in_channels + c]) * shift[c];
      if (linear.has_param("bias")) nb[r] += linear.param("bias")[r];
    }
    out.params["bias"] = to_tensor({rows}, nb);
  }
  return out;
}

BnReluSwap swap_bn_relu(const BatchNormParams& bn) {
  BnReluSwap s;
  s.threshold = thresh_relu_threshold(bn);
  s.direction.resize(bn.channels());
  for (std::size_t c = 0; c < bn.channels(); ++c) s.direction[c] = bn.weight[c] > 0.0f ? 1.0f : -1.0f;
  s.bn = bn;
  return s;
}

LayerNode fuse_bn_concat_linear(const BatchNormParams& bn, const std::vector<SliceRange>& slices,
                                const LayerNode& linear) {
  if (linear.kind != LayerKind::Linear) {
    throw ParameterError(linear.id + ": slice fusion needs a Linear node");
  }
  bn.validate();
  const Tensor& w = linear.param("weight");
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (slices.empty()) throw ParameterError(linear.id + ": no slices given");
  std::vector<SliceRange> sorted = slices;
  std::sort(sorted.begin(), sorted.end(), [](auto a, auto b) { return a.begin < b.begin; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& s = sorted[i];
    if (s.end <= s.begin || s.end > cols) {
      throw DimensionError(linear.id + ": slice [" + std::to_string(s.begin) + ", " + std::to_string(s.end) +
                           ") outside input extent " + std::to_string(cols));
    }
    if (s.width() != bn.channels()) {
      throw DimensionError(linear.id + ": slice width " + std::to_string(s.width()) + " vs " +
                           std::to_string(bn.channels()) + " batchnorm channels");
    }
    if (i > 0 && sorted[i - 1].end > s.begin) {
      throw ParameterError(linear.id + ": slices overlap at column " + std::to_string(s.begin));
    }
  }

  LayerNode out = linear;
  Tensor nw = w;
  std::vector<double> nb(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (linear.has_param("bias")) nb[r] = linear.param("bias")[r];
    for (const auto& s : sorted) {
      for (std::size_t c = 0; c < s.width(); ++c) {
        const std::size_t col = s.begin + c;
        const double orig = w[r * cols + col];
        nw[r * cols + col] = static_cast<float>(bn.scale(c) * orig);
        nb[r] += orig * bn.shift(c);
      }
    }
  }
  out.params["weight"] = std::move(nw);
  out.params["bias"] = to_tensor({rows}, nb);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

class Rewriter {
 public:
  Rewriter(ModelGraph g, FusionReport& report) : g_(std::move(g)), report_(report) {}

  ModelGraph take() { return std::move(g_); }

  void run(Pass pass) {
    blocked_.clear();
    for (;;) {
      bool changed = false;
      for (const auto& id : g_.topological_order()) {
        if (g_.node(id).kind != LayerKind::BatchNorm || blocked_.count(id)) continue;
        if (apply(pass, id)) {
          changed = true;
          break;
        }
      }
      if (!changed) return;
    }
  }

  void report_leftovers() {
    for (const auto& id : g_.topological_order()) {
      const auto& n = g_.node(id);
      if (n.kind != LayerKind::BatchNorm) continue;
      std::string reason;
      if (auto it = failures_.find(id); it != failures_.end()) {
        reason = it->second;
      } else if (id == g_.output_id()) {
        reason = "graph output";
      } else if (const auto cons = g_.distinct_consumers(id); cons.size() > 1) {
        reason = "output fans out to " + std::to_string(cons.size()) + " consumers";
      } else {
        reason = "no fusible neighbour";
      }
      report_.unmatched.push_back({id, reason});
    }
  }

 private:
  /// The unique consumer of `id` reached by exactly one edge, if any.
  std::optional<std::string> sole_consumer(const std::string& id) const {
    if (id == g_.output_id()) return std::nullopt;
    const auto edges = g_.consumers(id);
    if (edges.size() != 1) return std::nullopt;
    return edges.front();
  }

  std::string fresh_id(const std::string& base) const {
    std::string id = base;
    for (int k = 2; g_.contains(id); ++k) id = base + "_" + std::to_string(k);
    return id;
  }

  void record(Pass pass, const std::string& bn, const std::string& into) {
    report_.fusions.push_back({std::string(to_string(pass)), bn, into});
  }

  bool apply(Pass pass, const std::string& bn_id) {
    try {
      switch (pass) {
        case Pass::LinearThenBn: return linear_then_bn(bn_id);
        case Pass::BnThenLinear: return bn_then_linear(bn_id);
        case Pass::BnReluLinear: return bn_relu_linear(bn_id, false);
        case Pass::BnReluPoolLinear: return bn_relu_linear(bn_id, true);
        case Pass::BnConcatLinear: return bn_concat_linear(bn_id);
      }
    } catch (const DegenerateChannelError& e) {
      blocked_.insert(bn_id);
      failures_[bn_id] = std::string("degenerate channel: ") + e.what();
    }
    return false;
  }

  bool linear_then_bn(const std::string& bn_id) {
    const LayerNode& bn = g_.node(bn_id);
    const std::string producer = bn.inputs.front();
    if (!is_linear(g_.node(producer))) return false;
    if (sole_consumer(producer) != bn_id) return false;
    LayerNode fused = fuse_linear_then_bn(g_.node(producer), batchnorm_params(bn));
    g_.node(producer) = std::move(fused);
    g_.redirect(bn_id, producer);
    g_.remove_node(bn_id);
    record(Pass::LinearThenBn, bn_id, producer);
    return true;
  }

  bool bn_then_linear(const std::string& bn_id) {
    const auto consumer = sole_consumer(bn_id);
    if (!consumer || !is_linear(g_.node(*consumer))) return false;
    const auto shapes = g_.infer_shapes();
    const LayerNode& bn = g_.node(bn_id);
    LayerNode fused = fuse_bn_then_linear(batchnorm_params(bn), g_.node(*consumer), shapes.at(bn_id));
    note_bias_map(g_.node(*consumer), fused);
    const std::string upstream = bn.inputs.front();
    g_.node(*consumer) = std::move(fused);
    g_.redirect(bn_id, upstream);
    g_.remove_node(bn_id);
    record(Pass::BnThenLinear, bn_id, *consumer);
    return true;
  }

  // BN -> ReLU [-> AvgPool | GlobalAvgPool] -> Linear/Conv
  bool bn_relu_linear(const std::string& bn_id, bool through_pool) {
    const auto relu = sole_consumer(bn_id);
    if (!relu || g_.node(*relu).kind != LayerKind::ReLU) return false;
    auto next = sole_consumer(*relu);
    if (!next) return false;
    std::optional<std::string> pool;
    if (through_pool) {
      const auto kind = g_.node(*next).kind;
      if (kind != LayerKind::AvgPool && kind != LayerKind::GlobalAvgPool) return false;
      pool = next;
      next = sole_consumer(*pool);
      if (!next) return false;
    }
    const LayerNode& target = g_.node(*next);
    if (!is_linear(target)) return false;
    if (pool && g_.node(*pool).kind == LayerKind::GlobalAvgPool && target.kind != LayerKind::Linear) {
      return false;
    }

    const LayerNode& bn = g_.node(bn_id);
    const BatchNormParams params = batchnorm_params(bn);
    const BnReluSwap swap = swap_bn_relu(params);
    const auto shapes = g_.infer_shapes();
    // The per-channel affine BN commutes with average pooling, so it is
    // folded into the linear layer at the pooled resolution.
    const Shape& linear_input = shapes.at(pool ? *pool : *relu);
    LayerNode fused = fuse_bn_then_linear(swap.bn, target, linear_input);
    note_bias_map(target, fused);

    LayerNode thresh = make_thresh_relu(fresh_id(bn_id + "_thresh"), bn.inputs.front(), swap.threshold,
                                        swap.direction, bn.group);
    const std::string thresh_id = thresh.id;
    const std::string relu_id = *relu;
    const std::string target_id = *next;
    g_.node(target_id) = std::move(fused);
    g_.insert_before(bn_id, std::move(thresh));
    g_.redirect(relu_id, thresh_id);
    g_.remove_node(relu_id);
    g_.remove_node(bn_id);
    ++report_.thresh_relu_inserted;
    record(through_pool ? Pass::BnReluPoolLinear : Pass::BnReluLinear, bn_id, target_id);
    return true;
  }

  bool bn_concat_linear(const std::string& bn_id) {
    if (bn_id == g_.output_id()) return false;
    const auto cons = g_.distinct_consumers(bn_id);
    if (cons.size() != 1) return false;
    const LayerNode& concat = g_.node(cons.front());
    if (concat.kind != LayerKind::Concat) return false;
    const auto linear_id = sole_consumer(concat.id);
    if (!linear_id || g_.node(*linear_id).kind != LayerKind::Linear) return false;
    const auto shapes = g_.infer_shapes();
    if (shapes.at(concat.id).size() != 1) return false;

    const auto widths = concat_widths(concat);
    std::vector<SliceRange> slices;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < concat.inputs.size(); ++i) {
      if (concat.inputs[i] == bn_id) slices.push_back({offset, offset + widths[i]});
      offset += widths[i];
    }
    const LayerNode& bn = g_.node(bn_id);
    LayerNode fused = fuse_bn_concat_linear(batchnorm_params(bn), slices, g_.node(*linear_id));
    const std::string upstream = bn.inputs.front();
    const std::string concat_id = concat.id;
    g_.node(*linear_id) = std::move(fused);
    for (auto& in : g_.node(concat_id).inputs)
      if (in == bn_id) in = upstream;
    g_.remove_node(bn_id);
    record(Pass::BnConcatLinear, bn_id, *linear_id);
    return true;
  }

  void note_bias_map(const LayerNode& before, const LayerNode& after) {
    if (!before.has_param("bias_map") && after.has_param("bias_map")) ++report_.bias_maps_materialized;
  }

  ModelGraph g_;
  FusionReport& report_;
  std::set<std::string> blocked_;
  std::map<std::string, std::string> failures_;
};

}  // namespace

CanonizeResult canonize_graph(const ModelGraph& graph, const std::vector<Pass>& passes) {
  const auto violations = validate_graph(graph);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw InvalidGraphError("cannot canonize invalid graph: " + v.message,
                            v.node_ids.empty() ? "" : v.node_ids.front());
  }
  CanonizeResult result;
  for (auto p : passes) result.report.passes.emplace_back(to_string(p));
  Rewriter rw(graph, result.report);
  for (auto p : passes) rw.run(p);
  rw.report_leftovers();
  result.graph = rw.take();
  return result;
}

}  // namespace canonxai
