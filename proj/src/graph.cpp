#include "canonxai/graph.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <set>

#include "canonxai/error.hpp"

namespace canonxai {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 12> kKindNames{{
    {LayerKind::Input, "Input"},
    {LayerKind::Linear, "Linear"},
    {LayerKind::Conv2d, "Conv2d"},
    {LayerKind::BatchNorm, "BatchNorm"},
    {LayerKind::ReLU, "ReLU"},
    {LayerKind::ThreshReLU, "ThreshReLU"},
    {LayerKind::AvgPool, "AvgPool"},
    {LayerKind::MaxPool, "MaxPool"},
    {LayerKind::Flatten, "Flatten"},
    {LayerKind::Concat, "Concat"},
    {LayerKind::Add, "Add"},
    {LayerKind::GlobalAvgPool, "GlobalAvgPool"},
}};

std::size_t to_size(std::int64_t v, const LayerNode& node, const char* what) {
  if (v < 0) throw InvalidGraphError(node.id + ": negative " + what, node.id);
  return static_cast<std::size_t>(v);
}

/// Thrown by shape inference so validate_graph can classify the failure.
class ShapeIssue : public InvalidGraphError {
 public:
  ShapeIssue(Violation::Kind kind, const std::string& what, const std::string& node)
      : InvalidGraphError(what, node), kind_(kind) {}
  Violation::Kind kind() const { return kind_; }

 private:
  Violation::Kind kind_;
};

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "Unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  return std::nullopt;
}

const Tensor& LayerNode::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) {
    throw InvalidGraphError(id + ": missing parameter '" + name + "'", id);
  }
  return it->second;
}

const std::vector<std::int64_t>& LayerNode::attr(const std::string& name) const {
  auto it = attrs.find(name);
  if (it == attrs.end()) throw InvalidGraphError(id + ": missing attribute '" + name + "'", id);
  return it->second;
}

BatchNormParams batchnorm_params(const LayerNode& node) {
  BatchNormParams p;
  auto vec = [&](const char* name) { return node.param(name).values(); };
  p.weight = vec("weight");
  p.bias = vec("bias");
  p.mean = vec("mean");
  p.var = vec("var");
  p.eps = node.has_param("eps") ? node.param("eps")[0] : 0.0f;
  return p;
}

PadSpec conv_pad(const LayerNode& node) {
  PadSpec pad;
  if (node.has_attr("pad")) {
    const auto& a = node.attr("pad");
    if (a.size() != 4) throw InvalidGraphError(node.id + ": pad needs 4 entries", node.id);
    pad.top = to_size(a[0], node, "pad");
    pad.bottom = to_size(a[1], node, "pad");
    pad.left = to_size(a[2], node, "pad");
    pad.right = to_size(a[3], node, "pad");
  }
  if (node.has_param("pad_value")) {
    const Tensor& v = node.param("pad_value");
    if (v.numel() == 1) {
      pad.value = v[0];
    } else {
      pad.channel_values = v.values();
    }
  }
  return pad;
}

Stride2 node_stride(const LayerNode& node) {
  if (!node.has_attr("stride")) return {};
  const auto& a = node.attr("stride");
  if (a.size() != 2 || a[0] <= 0 || a[1] <= 0) {
    throw InvalidGraphError(node.id + ": stride needs two positive entries", node.id);
  }
  return {static_cast<std::size_t>(a[0]), static_cast<std::size_t>(a[1])};
}

BiasTerm conv_bias(const LayerNode& node) {
  if (node.has_param("bias_map")) return BiasTerm::map(node.param("bias_map"));
  if (node.has_param("bias")) return BiasTerm::per_channel(node.param("bias"));
  return {};
}

std::pair<std::size_t, std::size_t> pool_kernel(const LayerNode& node) {
  const auto& a = node.attr("kernel");
  if (a.size() != 2 || a[0] <= 0 || a[1] <= 0) {
    throw InvalidGraphError(node.id + ": kernel needs two positive entries", node.id);
  }
  return {static_cast<std::size_t>(a[0]), static_cast<std::size_t>(a[1])};
}

std::vector<std::size_t> concat_widths(const LayerNode& node) {
  std::vector<std::size_t> w;
  for (auto v : node.attr("widths")) w.push_back(to_size(v, node, "width"));
  return w;
}

LayerNode make_input(std::string id, const Shape& shape) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Input;
  n.attrs["shape"] = std::vector<std::int64_t>(shape.begin(), shape.end());
  return n;
}

LayerNode make_linear(std::string id, std::string input, Tensor weight, Tensor bias,
                      std::string group) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Linear;
  n.inputs = {std::move(input)};
  n.params["weight"] = std::move(weight);
  if (!bias.empty()) n.params["bias"] = std::move(bias);
  n.group = std::move(group);
  return n;
}

LayerNode make_conv2d(std::string id, std::string input, Tensor weight, Tensor bias,
                      Stride2 stride, const PadSpec& pad, std::string group) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Conv2d;
  n.inputs = {std::move(input)};
  n.params["weight"] = std::move(weight);
  if (!bias.empty()) n.params["bias"] = std::move(bias);
  n.attrs["stride"] = {static_cast<std::int64_t>(stride.h), static_cast<std::int64_t>(stride.w)};
  n.attrs["pad"] = {static_cast<std::int64_t>(pad.top), static_cast<std::int64_t>(pad.bottom),
                    static_cast<std::int64_t>(pad.left), static_cast<std::int64_t>(pad.right)};
  if (!pad.channel_values.empty()) {
    n.params["pad_value"] = Tensor::vector(pad.channel_values);
  } else if (pad.value != 0.0f) {
    n.params["pad_value"] = Tensor::vector({pad.value});
  }
  n.group = std::move(group);
  return n;
}

LayerNode make_batchnorm(std::string id, std::string input, const BatchNormParams& params,
                         std::string group) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::BatchNorm;
  n.inputs = {std::move(input)};
  n.params["weight"] = Tensor::vector(params.weight);
  n.params["bias"] = Tensor::vector(params.bias);
  n.params["mean"] = Tensor::vector(params.mean);
  n.params["var"] = Tensor::vector(params.var);
  n.params["eps"] = Tensor::vector({params.eps});
  n.group = std::move(group);
  return n;
}

LayerNode make_thresh_relu(std::string id, std::string input, std::vector<float> threshold,
                           std::vector<float> direction, std::string group) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::ThreshReLU;
  n.inputs = {std::move(input)};
  n.params["threshold"] = Tensor::vector(std::move(threshold));
  n.params["direction"] = Tensor::vector(std::move(direction));
  n.group = std::move(group);
  return n;
}

LayerNode make_simple(std::string id, LayerKind kind, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

LayerNode make_pool(std::string id, LayerKind kind, std::string input, std::size_t kh,
                    std::size_t kw, Stride2 stride) {
  LayerNode n = make_simple(std::move(id), kind, {std::move(input)});
  n.attrs["kernel"] = {static_cast<std::int64_t>(kh), static_cast<std::int64_t>(kw)};
  n.attrs["stride"] = {static_cast<std::int64_t>(stride.h), static_cast<std::int64_t>(stride.w)};
  return n;
}

LayerNode make_concat(std::string id, std::vector<std::string> inputs,
                      std::vector<std::size_t> widths) {
  LayerNode n = make_simple(std::move(id), LayerKind::Concat, std::move(inputs));
  n.attrs["widths"] = std::vector<std::int64_t>(widths.begin(), widths.end());
  return n;
}

// ---------------------------------------------------------------------------
// ModelGraph

void ModelGraph::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;
}

void ModelGraph::add_node(LayerNode node) {
  if (node.id.empty()) throw InvalidGraphError("node id must be non-empty", node.id);
  if (contains(node.id)) throw InvalidGraphError("duplicate node id '" + node.id + "'", node.id);
  if (node.kind == LayerKind::Input && input_id_.empty()) input_id_ = node.id;
  index_[node.id] = nodes_.size();
  nodes_.push_back(std::move(node));
}

const LayerNode& ModelGraph::node(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DanglingReferenceError("unknown node '" + id + "'", id);
  return nodes_[it->second];
}

LayerNode& ModelGraph::node(const std::string& id) {
  auto it = index_.find(id);
  if (it == index_.end()) throw DanglingReferenceError("unknown node '" + id + "'", id);
  return nodes_[it->second];
}

std::vector<std::string> ModelGraph::consumers(const std::string& id) const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    for (const auto& in : n.inputs)
      if (in == id) out.push_back(n.id);
  return out;
}

std::vector<std::string> ModelGraph::distinct_consumers(const std::string& id) const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(n.id);
  return out;
}

void ModelGraph::remove_node(const std::string& id) {
  auto it = index_.find(id);
  if (it == index_.end()) throw DanglingReferenceError("unknown node '" + id + "'", id);
  nodes_.erase(nodes_.begin() + static_cast<std::ptrdiff_t>(it->second));
  reindex();
}

void ModelGraph::redirect(const std::string& from, const std::string& to) {
  for (auto& n : nodes_)
    for (auto& in : n.inputs)
      if (in == from) in = to;
  if (output_id_ == from) output_id_ = to;
}

void ModelGraph::insert_before(const std::string& before, LayerNode node) {
  if (contains(node.id)) throw InvalidGraphError("duplicate node id '" + node.id + "'", node.id);
  auto it = index_.find(before);
  if (it == index_.end()) throw DanglingReferenceError("unknown node '" + before + "'", before);
  nodes_.insert(nodes_.begin() + static_cast<std::ptrdiff_t>(it->second), std::move(node));
  reindex();
}

std::vector<std::string> ModelGraph::topological_order() const {
  std::vector<std::size_t> indegree(nodes_.size(), 0);
  std::vector<std::vector<std::size_t>> out_edges(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& in : nodes_[i].inputs) {
      auto it = index_.find(in);
      if (it == index_.end()) {
        throw DanglingReferenceError(nodes_[i].id + ": input '" + in + "' does not exist", in);
      }
      out_edges[it->second].push_back(i);
      ++indegree[i];
    }
  }
  // Smallest node index first keeps the order deterministic.
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (indegree[i] == 0) ready.insert(i);
  std::vector<std::string> order;
  order.reserve(nodes_.size());
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(nodes_[i].id);
    for (auto j : out_edges[i])
      if (--indegree[j] == 0) ready.insert(j);
  }
  if (order.size() != nodes_.size()) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (indegree[i] != 0) {
        throw CycleError("cycle detected through node '" + nodes_[i].id + "'", nodes_[i].id);
      }
    }
  }
  return order;
}

Shape ModelGraph::input_shape() const {
  if (input_id_.empty()) throw InvalidGraphError("graph has no input node", "");
  const auto& n = node(input_id_);
  Shape s;
  for (auto v : n.attr("shape")) s.push_back(to_size(v, n, "shape extent"));
  return s;
}

std::size_t ModelGraph::count_kind(LayerKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [&](const LayerNode& n) { return n.kind == kind; }));
}

namespace {

Shape infer_node_shape(const LayerNode& n, const std::vector<Shape>& in) {
  using K = Violation::Kind;
  auto fail = [&](K kind, const std::string& msg) -> ShapeIssue {
    return ShapeIssue(kind, n.id + ": " + msg, n.id);
  };
  auto one = [&]() -> const Shape& {
    if (in.size() != 1) throw fail(K::InputArity, "expects exactly one input");
    return in[0];
  };
  try {
    switch (n.kind) {
      case LayerKind::Input: {
        Shape s;
        for (auto v : n.attr("shape")) {
          if (v <= 0) throw fail(K::InvalidParameter, "input extents must be positive");
          s.push_back(static_cast<std::size_t>(v));
        }
        if (s.empty()) throw fail(K::InvalidParameter, "input shape is empty");
        return s;
      }
      case LayerKind::Linear: {
        const Shape& s = one();
        const Tensor& w = n.param("weight");
        if (w.rank() != 2) throw fail(K::InvalidParameter, "weight must be 2-D");
        if (s.size() != 1 || s[0] != w.dim(1)) {
          throw fail(K::ShapeMismatch, "input " + shape_to_string(s) + " does not match weight " +
                                           shape_to_string(w.shape()));
        }
        if (n.has_param("bias") && n.param("bias").shape() != Shape{w.dim(0)}) {
          throw fail(K::ShapeMismatch, "bias does not match weight rows");
        }
        return {w.dim(0)};
      }
      case LayerKind::Conv2d: {
        const Shape& s = one();
        const Tensor& w = n.param("weight");
        if (w.rank() != 4) throw fail(K::InvalidParameter, "weight must be 4-D");
        if (s.size() != 3 || s[0] != w.dim(1)) {
          throw fail(K::ChannelMismatch, "input " + shape_to_string(s) + " does not match kernel " +
                                             shape_to_string(w.shape()));
        }
        const PadSpec pad = conv_pad(n);
        if (!pad.channel_values.empty() && pad.channel_values.size() != s[0]) {
          throw fail(K::ChannelMismatch, "pad_value has wrong channel count");
        }
        const Shape out = conv2d_output_shape(s, w.shape(), node_stride(n), pad);
        if (n.has_param("bias") && n.has_param("bias_map")) {
          throw fail(K::InvalidParameter, "both bias and bias_map present");
        }
        if (n.has_param("bias") && n.param("bias").shape() != Shape{out[0]}) {
          throw fail(K::ShapeMismatch, "bias does not match output channels");
        }
        if (n.has_param("bias_map") && n.param("bias_map").shape() != out) {
          throw fail(K::ShapeMismatch, "bias_map " + shape_to_string(n.param("bias_map").shape()) +
                                           " does not match output " + shape_to_string(out));
        }
        return out;
      }
      case LayerKind::BatchNorm: {
        const Shape& s = one();
        const BatchNormParams p = batchnorm_params(n);
        try {
          p.validate();
        } catch (const ParameterError& e) {
          throw fail(K::InvalidParameter, e.what());
        }
        if (s[0] != p.channels()) {
          throw fail(K::ChannelMismatch, "has " + std::to_string(p.channels()) +
                                             " channels but upstream provides " + std::to_string(s[0]));
        }
        return s;
      }
      case LayerKind::ThreshReLU: {
        const Shape& s = one();
        const Tensor& z = n.param("threshold");
        const Tensor& d = n.param("direction");
        if (z.numel() != s[0] || d.numel() != s[0]) {
          throw fail(K::ChannelMismatch, "threshold/direction do not match " + std::to_string(s[0]) +
                                             " channels");
        }
        for (float v : d.data())
          if (v != 1.0f && v != -1.0f) throw fail(K::InvalidParameter, "direction entries must be +1 or -1");
        return s;
      }
      case LayerKind::ReLU:
        return one();
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: {
        const Shape& s = one();
        const auto [kh, kw] = pool_kernel(n);
        return pool2d_output_shape(s, kh, kw, node_stride(n));
      }
      case LayerKind::Flatten:
        return {shape_numel(one())};
      case LayerKind::GlobalAvgPool: {
        const Shape& s = one();
        if (s.size() != 3) throw fail(K::ShapeMismatch, "expects C x H x W input");
        return {s[0]};
      }
      case LayerKind::Concat: {
        if (in.empty()) throw fail(K::InputArity, "needs at least one input");
        const auto widths = concat_widths(n);
        if (widths.size() != in.size()) {
          throw fail(K::ConcatLayout, "records " + std::to_string(widths.size()) + " widths for " +
                                          std::to_string(in.size()) + " inputs");
        }
        Shape out = in[0];
        out[0] = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          if (in[i].size() != in[0].size() ||
              !std::equal(in[i].begin() + 1, in[i].end(), in[0].begin() + 1)) {
            throw fail(K::ShapeMismatch, "inputs differ outside the channel axis");
          }
          if (in[i][0] != widths[i]) {
            throw fail(K::ConcatLayout, "input " + std::to_string(i) + " has width " +
                                            std::to_string(in[i][0]) + ", layout records " +
                                            std::to_string(widths[i]));
          }
          out[0] += in[i][0];
        }
        return out;
      }
      case LayerKind::Add: {
        if (in.size() < 2) throw fail(K::InputArity, "needs at least two inputs");
        for (const auto& s : in)
          if (s != in[0]) throw fail(K::ShapeMismatch, "addends differ in shape");
        return in[0];
      }
    }
  } catch (const ShapeIssue&) {
    throw;
  } catch (const NodeError& e) {
    throw ShapeIssue(Violation::Kind::MissingParameter, e.what(), n.id);
  } catch (const Error& e) {
    throw ShapeIssue(Violation::Kind::ShapeMismatch, n.id + ": " + e.what(), n.id);
  }
  throw fail(Violation::Kind::Structure, "unknown layer kind");
}

}  // namespace

std::map<std::string, Shape> ModelGraph::infer_shapes() const {
  std::map<std::string, Shape> shapes;
  for (const auto& id : topological_order()) {
    const auto& n = node(id);
    std::vector<Shape> in;
    for (const auto& i : n.inputs) in.push_back(shapes.at(i));
    shapes[id] = infer_node_shape(n, in);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Validation

std::string_view to_string(Violation::Kind kind) {
  switch (kind) {
    case Violation::Kind::MissingInput: return "missing-input";
    case Violation::Kind::DanglingReference: return "dangling-reference";
    case Violation::Kind::Cycle: return "cycle";
    case Violation::Kind::InputArity: return "input-arity";
    case Violation::Kind::MissingParameter: return "missing-parameter";
    case Violation::Kind::ShapeMismatch: return "shape-mismatch";
    case Violation::Kind::ChannelMismatch: return "channel-mismatch";
    case Violation::Kind::ConcatLayout: return "concat-layout";
    case Violation::Kind::InvalidParameter: return "invalid-parameter";
    case Violation::Kind::Structure: return "structure";
  }
  return "unknown";
}

namespace {

std::vector<std::string> required_params(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear:
    case LayerKind::Conv2d: return {"weight"};
    case LayerKind::BatchNorm: return {"weight", "bias", "mean", "var"};
    case LayerKind::ThreshReLU: return {"threshold", "direction"};
    default: return {};
  }
}

/// Returns the node ids of one cycle, or empty.
std::vector<std::string> find_cycle(const ModelGraph& g) {
  enum class Mark { White, Grey, Black };
  std::map<std::string, Mark> mark;
  for (const auto& n : g.nodes()) mark[n.id] = Mark::White;
  std::vector<std::string> stack;
  std::vector<std::string> cycle;
  std::function<bool(const std::string&)> dfs = [&](const std::string& id) -> bool {
    mark[id] = Mark::Grey;
    stack.push_back(id);
    for (const auto& in : g.node(id).inputs) {
      if (!g.contains(in)) continue;
      if (mark[in] == Mark::Grey) {
        auto it = std::find(stack.begin(), stack.end(), in);
        cycle.assign(it, stack.end());
        return true;
      }
      if (mark[in] == Mark::White && dfs(in)) return true;
    }
    stack.pop_back();
    mark[id] = Mark::Black;
    return false;
  };
  for (const auto& n : g.nodes())
    if (mark[n.id] == Mark::White && dfs(n.id)) break;
  // Report in edge direction (producer first).
  std::reverse(cycle.begin(), cycle.end());
  return cycle;
}

}  // namespace

std::vector<Violation> validate_graph(const ModelGraph& graph) {
  using K = Violation::Kind;
  std::vector<Violation> out;

  if (graph.input_id().empty() || !graph.contains(graph.input_id())) {
    out.push_back({K::MissingInput, {graph.input_id()}, "graph input node is missing"});
  } else if (graph.node(graph.input_id()).kind != LayerKind::Input) {
    out.push_back({K::Structure, {graph.input_id()}, "graph input is not an Input node"});
  }
  if (graph.output_id().empty() || !graph.contains(graph.output_id())) {
    out.push_back({K::DanglingReference, {graph.output_id()}, "graph output node '" + graph.output_id() + "' does not exist"});
  }

  for (const auto& n : graph.nodes()) {
    if (n.kind == LayerKind::Input) {
      if (n.id != graph.input_id()) {
        out.push_back({K::Structure, {n.id}, n.id + ": second Input node"});
      }
      if (!n.inputs.empty()) out.push_back({K::InputArity, {n.id}, n.id + ": Input node has inputs"});
      if (!n.has_attr("shape")) out.push_back({K::MissingParameter, {n.id}, n.id + ": Input node has no shape"});
      continue;
    }
    if (n.inputs.empty()) out.push_back({K::InputArity, {n.id}, n.id + ": node has no inputs"});
    for (const auto& in : n.inputs) {
      if (!graph.contains(in)) {
        out.push_back({K::DanglingReference, {n.id, in}, n.id + ": input '" + in + "' does not exist"});
      }
    }
    for (const auto& p : required_params(n.kind)) {
      if (!n.has_param(p)) out.push_back({K::MissingParameter, {n.id}, n.id + ": missing parameter '" + p + "'"});
    }
  }

  const auto cycle = find_cycle(graph);
  if (!cycle.empty()) {
    std::string msg = "cycle:";
    for (const auto& id : cycle) msg += " " + id;
    out.push_back({K::Cycle, cycle, msg});
  }

  if (out.empty()) {
    try {
      (void)graph.infer_shapes();
    } catch (const ShapeIssue& e) {
      out.push_back({e.kind(), {e.node_id()}, e.what()});
    } catch (const NodeError& e) {
      out.push_back({K::Structure, {e.node_id()}, e.what()});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

const Tensor& ForwardResult::output_of(const std::string& id) const {
  if (!activations) throw Error("forward pass was not recorded");
  auto it = activations->find(id);
  if (it == activations->end()) throw DanglingReferenceError("no recorded activation for '" + id + "'", id);
  return it->second;
}

Tensor evaluate_node(const LayerNode& n, const std::vector<const Tensor*>& in) {
  auto one = [&]() -> const Tensor& {
    if (in.size() != 1) throw NodeError(n.id + ": expects exactly one input", n.id);
    return *in[0];
  };
  try {
    switch (n.kind) {
      case LayerKind::Input:
        return one();
      case LayerKind::Linear:
        return linear_forward(one(), n.param("weight"), n.has_param("bias") ? n.param("bias") : Tensor{});
      case LayerKind::Conv2d:
        return conv2d_forward(one(), n.param("weight"), conv_bias(n), node_stride(n), conv_pad(n));
      case LayerKind::BatchNorm:
        return batchnorm_forward(one(), batchnorm_params(n));
      case LayerKind::ReLU:
        return relu_forward(one());
      case LayerKind::ThreshReLU:
        return thresh_relu_forward(one(), n.param("threshold").data(), n.param("direction").data());
      case LayerKind::AvgPool: {
        const auto [kh, kw] = pool_kernel(n);
        return avg_pool2d(one(), kh, kw, node_stride(n));
      }
      case LayerKind::MaxPool: {
        const auto [kh, kw] = pool_kernel(n);
        return max_pool2d(one(), kh, kw, node_stride(n));
      }
      case LayerKind::Flatten: {
        const Tensor& x = one();
        return x.reshaped({x.numel()});
      }
      case LayerKind::GlobalAvgPool:
        return global_avg_pool(one());
      case LayerKind::Concat: {
        const auto widths = concat_widths(n);
        if (widths.size() != in.size()) throw NodeError(n.id + ": concat layout does not match inputs", n.id);
        Shape s = in[0]->shape();
        std::size_t total = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          Shape si = in[i]->shape();
          if (si.size() != s.size() || si[0] != widths[i] ||
              !std::equal(si.begin() + 1, si.end(), s.begin() + 1)) {
            throw NodeError(n.id + ": input " + std::to_string(i) + " shape " + shape_to_string(si) +
                                " does not fit the concat layout",
                            n.id);
          }
          total += si[0];
        }
        s[0] = total;
        std::vector<float> data;
        data.reserve(shape_numel(s));
        for (const Tensor* t : in) data.insert(data.end(), t->data().begin(), t->data().end());
        return Tensor(s, std::move(data));
      }
      case LayerKind::Add: {
        if (in.size() < 2) throw NodeError(n.id + ": needs at least two inputs", n.id);
        Tensor out(in[0]->shape());
        for (const Tensor* t : in) {
          if (t->shape() != out.shape()) {
            throw NodeError(n.id + ": addend shape " + shape_to_string(t->shape()) + " differs from " +
                                shape_to_string(out.shape()),
                            n.id);
          }
        }
        for (std::size_t i = 0; i < out.numel(); ++i) {
          double acc = 0.0;
          for (const Tensor* t : in) acc += (*t)[i];
          out[i] = static_cast<float>(acc);
        }
        return out;
      }
    }
  } catch (const NodeError&) {
    throw;
  } catch (const Error& e) {
    throw NodeError(n.id + ": " + e.what(), n.id);
  }
  throw NodeError(n.id + ": unknown layer kind", n.id);
}

ForwardResult forward(const ModelGraph& graph, const Tensor& x, bool record) {
  const Shape expected = graph.input_shape();
  if (x.shape() != expected) {
    throw NodeError("input " + shape_to_string(x.shape()) + " does not match declared shape " +
                        shape_to_string(expected) + " of node '" + graph.input_id() + "'",
                    graph.input_id());
  }
  const auto order = graph.topological_order();

  // Without recording, drop each activation after its last consumer has run.
  std::map<std::string, std::size_t> remaining;
  for (const auto& n : graph.nodes())
    for (const auto& in : n.inputs) ++remaining[in];

  std::map<std::string, Tensor> values;
  for (const auto& id : order) {
    const auto& n = graph.node(id);
    std::vector<const Tensor*> in;
    in.reserve(n.inputs.size());
    for (const auto& i : n.inputs) in.push_back(&values.at(i));
    Tensor out = n.kind == LayerKind::Input ? x : evaluate_node(n, in);
    values[id] = std::move(out);
    if (!record) {
      for (const auto& i : n.inputs) {
        if (--remaining[i] == 0 && i != graph.output_id()) values.erase(i);
      }
    }
  }
  ForwardResult r;
  r.output = values.at(graph.output_id());
  if (record) r.activations = std::move(values);
  return r;
}

}  // namespace canonxai
