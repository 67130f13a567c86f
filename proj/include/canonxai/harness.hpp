#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "canonxai/attribution.hpp"
#include "canonxai/dataset.hpp"
#include "canonxai/graph.hpp"
#include "canonxai/metrics.hpp"

namespace canonxai {

/// Which graph variants an explainer runs on.
enum class CanonMode { Original, Canonized, Both };
std::string_view to_string(CanonMode mode);
CanonMode parse_canon_mode(std::string_view text);  // no | yes | both

/// An LRP composite, or gradient saliency when `composite` is empty.
struct ExplainerSpec {
  std::string id;
  std::optional<Composite> composite;
  CanonMode mode = CanonMode::Both;

  static ExplainerSpec saliency(CanonMode mode = CanonMode::Both);
  static ExplainerSpec lrp(Composite composite, CanonMode mode = CanonMode::Both);
  /// Built-in composite name or "saliency".
  static ExplainerSpec named(std::string_view name, CanonMode mode = CanonMode::Both);
  std::string describe() const;
};

/// aopc, rra, rma, gini, avg_sensitivity, max_sensitivity, random_logit,
/// faithfulness_correlation.
const std::vector<std::string>& metric_names();

struct MetricSettings {
  PoolMethod pooling = PoolMethod::Sum;
  RegionPerturbConfig aopc;
  SensitivityConfig sensitivity;  // seed is replaced per sample
  FaithCorrConfig faithfulness;   // seed is replaced per sample
  bool rma_raw = false;
};

struct EvalOptions {
  std::vector<std::string> metrics;
  MetricSettings settings;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // 0: one per hardware thread
};

struct ScoreRow {
  std::string sample_id;
  std::string config_id;
  bool canonized = false;
  std::string metric;
  double score = 0.0;
  std::string status = "ok";  // ok | error
  std::string message;
  std::uint64_t seed = 0;
};

/// Mean over all rows sharing one group's gamma (every sample, every value
/// of the other groups).
struct MarginalRow {
  std::string group;
  double gamma = 0.0;
  bool canonized = false;
  std::string metric;
  double mean = 0.0;
  std::size_t count = 0;
};

struct MeanRow {
  std::string config_id;
  bool canonized = false;
  std::string metric;
  double mean = 0.0;
  std::size_t count = 0;
};

struct MetricReport {
  std::vector<ScoreRow> rows;  // sorted by (sample, config, canonized, metric)
  std::vector<MeanRow> means;
  std::vector<MarginalRow> marginals;  // grid search only
  std::string fingerprint;             // JSON object text with every constant used

  std::string to_csv() const;
  std::string marginals_csv() const;
  std::string to_json() const;
  std::size_t error_count() const;
};

/// Per-sample seed: base XOR sample index.
inline std::uint64_t sample_seed(std::uint64_t base, std::size_t index) { return base ^ index; }

/// attribute -> pool -> normalize -> metrics for every sample, explainer and
/// graph variant. Failures become error rows; the run always completes.
MetricReport run_evaluation(const ModelGraph& graph, const std::vector<Sample>& dataset,
                            const std::vector<ExplainerSpec>& explainers, const EvalOptions& options);

struct GridSpec {
  std::vector<std::string> groups;
  std::vector<double> gammas;
  CanonMode canonized = CanonMode::Both;
  void validate() const;
};

std::size_t count_configurations(const GridSpec& grid);
/// All gamma assignments, the last group varying fastest.
std::vector<std::map<std::string, double>> enumerate_gamma_configs(const GridSpec& grid);
/// "low=0.1;mid=10" in group order.
std::string gamma_config_id(const GridSpec& grid, const std::map<std::string, double>& config);

/// One Gamma composite per configuration; layers outside the grid groups
/// get gamma 0. Throws ParameterError for group tags absent from the graph.
MetricReport run_grid_search(const ModelGraph& graph, const std::vector<Sample>& dataset, const GridSpec& grid,
                             const EvalOptions& options);

std::string format_real(double v);  // %.17g

}  // namespace canonxai
