#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "canonxai/graph.hpp"

namespace canonxai {

/// Rewrite passes, applied in the order given to canonize_graph.
enum class Pass {
  LinearThenBn,      // Linear/Conv -> BN
  BnThenLinear,      // BN -> Linear/Conv (padding handled via bias map)
  BnReluLinear,      // BN -> ReLU -> Linear/Conv, via ThreshReLU swap
  BnReluPoolLinear,  // BN -> ReLU -> AvgPool/GlobalAvgPool -> Linear/Conv
  BnConcatLinear,    // BN -> Concat -> Linear, slice-aware
};

std::string_view to_string(Pass pass);
std::optional<Pass> parse_pass(std::string_view name);
std::vector<Pass> default_passes();

struct FusionRecord {
  std::string pass;
  std::string removed_bn;
  std::string absorbing_node;
};

struct UnmatchedBn {
  std::string bn_id;
  std::string reason;
};

struct FusionReport {
  std::vector<std::string> passes;
  std::vector<FusionRecord> fusions;
  std::size_t thresh_relu_inserted = 0;
  std::size_t bias_maps_materialized = 0;
  std::vector<UnmatchedBn> unmatched;

  std::string to_json() const;
};

/// Half-open channel range [begin, end) of a concatenated input.
struct SliceRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
};

/// BN(Linear(x)) as a single Linear/Conv2d node: output rows scaled by
/// w_BN / sqrt(var + eps), bias shifted accordingly. Keeps id and inputs.
LayerNode fuse_linear_then_bn(const LayerNode& linear, const BatchNormParams& bn);

/// Linear(BN(x)) as a single node. `input_shape` is the shape entering the
/// linear layer; a padded convolution gets a full bias map evaluated once
/// here, and a nonzero pad value is rescaled per channel.
LayerNode fuse_bn_then_linear(const BatchNormParams& bn, const LayerNode& linear,
                              const Shape& input_shape);

struct BnReluSwap {
  std::vector<float> threshold;
  std::vector<float> direction;
  BatchNormParams bn;  // unchanged; now applied after the ThreshReLU
};

/// ReLU(BN(x)) == BN(ReLU_thresh(x)). Throws DegenerateChannelError.
BnReluSwap swap_bn_relu(const BatchNormParams& bn);

/// Fuses a BN applied to the given concat slices into the Linear that
/// consumes the concatenation. Columns outside the slices are untouched.
LayerNode fuse_bn_concat_linear(const BatchNormParams& bn, const std::vector<SliceRange>& slices,
                                const LayerNode& linear);

struct CanonizeResult {
  ModelGraph graph;
  FusionReport report;
};

/// Applies each pass greedily in topological order until it no longer
/// matches. BatchNorm nodes that no pattern covers stay in place and are
/// listed in the report.
CanonizeResult canonize_graph(const ModelGraph& graph,
                              const std::vector<Pass>& passes = default_passes());

}  // namespace canonxai
