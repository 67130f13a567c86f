#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "canonxai/dataset.hpp"
#include "canonxai/graph.hpp"

namespace canonxai {

struct FixtureOptions {
  /// Zero every bias and choose BatchNorm offsets so that each BN is a pure
  /// per-channel scaling. Relevance is then conserved exactly by epsilon-LRP.
  bool bias_free = false;
};

struct Fixture {
  std::string name;
  ModelGraph graph;
  std::vector<Sample> dataset;  // only corner_detector ships one
};

/// vgg_like, resnet_like, densenet_like, rn_like, corner_detector, fanout_bn.
std::vector<std::string> fixture_names();

/// Deterministic in (name, seed, options). Throws ParameterError for unknown names.
Fixture build_fixture(std::string_view name, std::uint64_t seed, const FixtureOptions& options = {});

/// Concatenation widths of the relation-network head: object, coordinate,
/// object, coordinate, question.
inline constexpr std::size_t kRelationHeadWidths[] = {24, 2, 24, 2, 128};

}  // namespace canonxai
