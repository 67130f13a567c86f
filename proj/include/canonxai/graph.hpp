#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "canonxai/kernels.hpp"
#include "canonxai/tensor.hpp"

namespace canonxai {

enum class LayerKind {
  Input,
  Linear,
  Conv2d,
  BatchNorm,
  ReLU,
  ThreshReLU,
  AvgPool,
  MaxPool,
  Flatten,
  Concat,
  Add,
  GlobalAvgPool,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

/// Group tag used for nodes that carry none.
inline constexpr std::string_view kDefaultGroup = "default";

/// One node of the graph IR.
///
/// Parameter names by kind:
///   Linear     weight [m x n], bias [m] (optional)
///   Conv2d     weight [Co x Ci x kh x kw], bias [Co] or bias_map [Co x H' x W'],
///              pad_value [1] or [Ci] (optional); attrs stride [sh, sw], pad [t, b, l, r]
///   BatchNorm  weight, bias, mean, var [C]; eps [1]
///   ThreshReLU threshold [C], direction [C] (+1 / -1, the sign of the folded w_BN)
///   Avg/MaxPool attrs kernel [kh, kw], stride [sh, sw]
///   Concat     attrs widths: channel extent contributed by each input, in order
///   Input      attrs shape
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;
  std::map<std::string, Tensor> params;
  std::map<std::string, std::vector<std::int64_t>> attrs;
  std::string group;

  bool has_param(const std::string& name) const { return params.count(name) != 0; }
  const Tensor& param(const std::string& name) const;
  bool has_attr(const std::string& name) const { return attrs.count(name) != 0; }
  const std::vector<std::int64_t>& attr(const std::string& name) const;
  std::string_view group_or_default() const {
    return group.empty() ? kDefaultGroup : std::string_view(group);
  }

  friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

// Typed views over node parameters.
BatchNormParams batchnorm_params(const LayerNode& node);
PadSpec conv_pad(const LayerNode& node);
Stride2 node_stride(const LayerNode& node);
BiasTerm conv_bias(const LayerNode& node);
std::pair<std::size_t, std::size_t> pool_kernel(const LayerNode& node);
std::vector<std::size_t> concat_widths(const LayerNode& node);

// Node constructors used by fixtures, tests and the canonizer.
LayerNode make_input(std::string id, const Shape& shape);
LayerNode make_linear(std::string id, std::string input, Tensor weight, Tensor bias,
                      std::string group = {});
LayerNode make_conv2d(std::string id, std::string input, Tensor weight, Tensor bias,
                      Stride2 stride, const PadSpec& pad, std::string group = {});
LayerNode make_batchnorm(std::string id, std::string input, const BatchNormParams& params,
                         std::string group = {});
LayerNode make_thresh_relu(std::string id, std::string input, std::vector<float> threshold,
                           std::vector<float> direction, std::string group = {});
LayerNode make_simple(std::string id, LayerKind kind, std::vector<std::string> inputs);
LayerNode make_pool(std::string id, LayerKind kind, std::string input, std::size_t kh,
                    std::size_t kw, Stride2 stride);
LayerNode make_concat(std::string id, std::vector<std::string> inputs,
                      std::vector<std::size_t> widths);

/// Directed acyclic graph of layer nodes with one input and one output.
/// Node order is the insertion order; it only breaks ties in the
/// topological sort and fixes the serialized layout.
class ModelGraph {
 public:
  ModelGraph() = default;

  void add_node(LayerNode node);
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const LayerNode& node(const std::string& id) const;
  LayerNode& node(const std::string& id);
  const std::vector<LayerNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  const std::string& input_id() const { return input_id_; }
  const std::string& output_id() const { return output_id_; }
  void set_input(std::string id) { input_id_ = std::move(id); }
  void set_output(std::string id) { output_id_ = std::move(id); }

  /// Ids of nodes listing `id` as an input, once per edge, in node order.
  std::vector<std::string> consumers(const std::string& id) const;
  /// Consumer node ids, deduplicated.
  std::vector<std::string> distinct_consumers(const std::string& id) const;

  void remove_node(const std::string& id);
  /// Rewires every edge from `from` to `to` (and the output marker).
  void redirect(const std::string& from, const std::string& to);
  /// Inserts `node` right before `before` in node order.
  void insert_before(const std::string& before, LayerNode node);

  /// Kahn's algorithm; ties resolved by node order. Throws CycleError.
  std::vector<std::string> topological_order() const;

  Shape input_shape() const;
  /// Output shape of every node. Throws NodeError on the first inconsistency.
  std::map<std::string, Shape> infer_shapes() const;

  std::size_t count_kind(LayerKind kind) const;

  friend bool operator==(const ModelGraph& a, const ModelGraph& b) {
    return a.nodes_ == b.nodes_ && a.input_id_ == b.input_id_ && a.output_id_ == b.output_id_;
  }

 private:
  void reindex();

  std::vector<LayerNode> nodes_;
  std::map<std::string, std::size_t> index_;
  std::string input_id_;
  std::string output_id_;
};

struct Violation {
  enum class Kind {
    MissingInput,
    DanglingReference,
    Cycle,
    InputArity,
    MissingParameter,
    ShapeMismatch,
    ChannelMismatch,
    ConcatLayout,
    InvalidParameter,
    Structure,
  };
  Kind kind;
  std::vector<std::string> node_ids;
  std::string message;
};

std::string_view to_string(Violation::Kind kind);

/// Empty iff every structural, parameter and shape invariant holds.
std::vector<Violation> validate_graph(const ModelGraph& graph);

struct ForwardResult {
  Tensor output;
  /// Output of every node keyed by id (the graph input included); present
  /// only when recording was requested. A node's inputs are the outputs
  /// of the nodes it lists.
  std::optional<std::map<std::string, Tensor>> activations;

  const Tensor& output_of(const std::string& id) const;
};

/// Evaluates a single node on already-computed inputs.
Tensor evaluate_node(const LayerNode& node, const std::vector<const Tensor*>& inputs);

ForwardResult forward(const ModelGraph& graph, const Tensor& x, bool record = false);

// On-disk format: JSON manifest plus a little-endian float32 blob file.

struct SerializedModel {
  std::string manifest;
  std::vector<std::uint8_t> blob;
};

SerializedModel save_model(const ModelGraph& graph);
void save_model_files(const ModelGraph& graph, const std::string& manifest_path,
                      const std::string& blob_path);
ModelGraph parse_model(std::string_view manifest, std::span<const std::uint8_t> blob);
ModelGraph load_model(const std::string& manifest_path, const std::string& blob_path);

/// "model.json" -> "model.bin"
std::string default_blob_path(const std::string& manifest_path);

}  // namespace canonxai
