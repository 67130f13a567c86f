#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "canonxai/graph.hpp"

namespace canonxai {

inline constexpr double kDefaultLrpEpsilon = 1e-6;

/// One LRP rule. Only the fields relevant to `kind` are read.
struct RuleSpec {
  enum class Kind { Epsilon, Gamma, AlphaBeta, Box, Passthrough };

  Kind kind = Kind::Epsilon;
  double epsilon = kDefaultLrpEpsilon;  // stabilizer, also used by Gamma
  double gamma = 0.0;
  double alpha = 1.0;
  double beta = 0.0;
  // Box bounds: per-element tensors shaped like the layer input, or the
  // scalar fallbacks when the tensors are empty.
  Tensor low;
  Tensor high;
  double low_value = 0.0;
  double high_value = 1.0;

  static RuleSpec make_epsilon(double eps = kDefaultLrpEpsilon);
  static RuleSpec make_gamma(double gamma, double eps = kDefaultLrpEpsilon);
  static RuleSpec make_alpha_beta(double alpha, double beta);
  static RuleSpec make_box(double low, double high);
  static RuleSpec make_box(Tensor low, Tensor high);
  static RuleSpec make_passthrough();

  /// Throws ParameterError when the invariants of `kind` do not hold.
  void validate() const;
  std::string describe() const;
};

std::string_view to_string(RuleSpec::Kind kind);

/// Matches layers by kind, by group tag, or only the first layer of a kind
/// in topological order.
struct Selector {
  enum class By { Kind, Group, FirstOfKind };
  By by = By::Kind;
  LayerKind kind = LayerKind::Linear;
  std::string group;

  static Selector of_kind(LayerKind k) { return {By::Kind, k, {}}; }
  static Selector of_group(std::string g) { return {By::Group, LayerKind::Linear, std::move(g)}; }
  static Selector first_of(LayerKind k) { return {By::FirstOfKind, k, {}}; }
};

/// Ordered selector -> rule list; the first matching entry wins, otherwise
/// the default rule applies.
struct Composite {
  std::string name;
  std::vector<std::pair<Selector, RuleSpec>> rules;
  RuleSpec default_rule = RuleSpec::make_epsilon();

  /// Rule for every Linear, Conv2d and BatchNorm node of `graph`.
  std::map<std::string, RuleSpec> resolve(const ModelGraph& graph) const;
};

Composite composite_epsilon(double eps = kDefaultLrpEpsilon);
Composite composite_alpha_beta(double alpha, double beta);
Composite composite_eps_plus();  // Conv: a1b0, FC: eps
Composite composite_a2b1();      // Conv: a2b1, FC: eps
Composite composite_custom();    // first Conv: box, other Conv and FC: a1b0
Composite composite_excitation_backprop();  // a1b0 everywhere
/// Gamma rule with one gamma per group tag; unlisted groups use `fallback`.
Composite composite_gamma(const std::map<std::string, double>& per_group, double fallback = 0.0);

/// Looks up eps-plus, a2b1, custom, eb, epsilon. Throws ParameterError.
Composite builtin_composite(std::string_view name);
std::vector<std::string> builtin_composite_names();

struct LrpDiagnostics {
  std::size_t zero_denominators = 0;
};

/// Relevance redistribution through a Linear, Conv2d or BatchNorm node
/// (the latter as a diagonal affine map). `input` is the node's input
/// activation; the result has the same shape.
Tensor lrp_backward_linear(const LayerNode& node, const Tensor& input, const Tensor& r_out,
                           const RuleSpec& rule, LrpDiagnostics* diag = nullptr);

/// Relevance through parameter-free nodes (ReLU, ThreshReLU, Flatten,
/// pooling, Concat, Add). Returns one tensor per input.
std::vector<Tensor> lrp_backward_passthrough(const LayerNode& node,
                                             const std::vector<const Tensor*>& inputs,
                                             const Tensor& r_out,
                                             double eps = kDefaultLrpEpsilon);

/// LRP heatmap shaped like the graph input, seeded with the raw target logit.
Tensor attribute(const ModelGraph& graph, const Tensor& x, std::size_t target,
                 const Composite& composite, LrpDiagnostics* diag = nullptr);

/// d logit[target] / dx.
Tensor gradient_saliency(const ModelGraph& graph, const Tensor& x, std::size_t target);

enum class PoolMethod { Sum, PosL2NormSq, MaxNorm };
std::string_view to_string(PoolMethod method);
PoolMethod parse_pool_method(std::string_view name);

/// C x H x W -> H x W.
Tensor pool_channels(const Tensor& relevance, PoolMethod method);

/// h / sqrt(mean(h^2)); all-zero maps are returned unchanged.
Tensor normalize_heatmap(const Tensor& h);

}  // namespace canonxai
