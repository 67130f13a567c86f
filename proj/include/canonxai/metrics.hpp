#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "canonxai/error.hpp"
#include "canonxai/tensor.hpp"

namespace canonxai {

class MetricError : public Error {
 public:
  using Error::Error;
};
class EmptyMaskError : public MetricError {
 public:
  using MetricError::MetricError;
};
class ZeroMassError : public MetricError {
 public:
  using MetricError::MetricError;
};

/// Logits for an input image.
using ModelFn = std::function<Tensor(const Tensor&)>;
/// H x W heatmap for (input, target class).
using ExplainFn = std::function<Tensor(const Tensor&, std::size_t)>;

struct Baseline {
  enum class Kind { Black, Mean, GaussianBlur };
  Kind kind = Kind::GaussianBlur;
  double sigma = 5.0;
  std::size_t kernel = 15;

  static Baseline black() { return {Kind::Black, 5.0, 15}; }
  static Baseline mean() { return {Kind::Mean, 5.0, 15}; }
  static Baseline blur(double sigma = 5.0, std::size_t kernel = 15) { return {Kind::GaussianBlur, sigma, kernel}; }
  std::string describe() const;
};

/// Separable Gaussian blur per channel, edges clamped. `kernel` must be odd.
Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t kernel);
/// The fully perturbed image for a baseline.
Tensor baseline_image(const Tensor& image, const Baseline& baseline);

struct RegionPerturbConfig {
  std::size_t patch_size = 8;
  std::size_t steps = 30;
  Baseline baseline = Baseline::blur();
  void validate() const;
};

/// Mean drop of the target logit over the L+1 cumulative perturbation
/// steps (most relevant patch first). L is capped at the patch count.
double aopc_region_perturbation(const ModelFn& model, const Tensor& x, std::size_t target,
                                const Tensor& heatmap, const RegionPerturbConfig& cfg);

/// Fraction of the |GT| highest-ranked pixels that lie in the mask. Ties
/// are broken by row-major pixel index.
double rra(const Tensor& heatmap, const Tensor& mask);

/// Relevance mass inside the mask over total mass, on the positive part of
/// the heatmap (signed sums with `raw`).
double rma(const Tensor& heatmap, const Tensor& mask, bool raw = false);

/// Gini index of |h|.
double sparseness_gini(const Tensor& heatmap);

struct SensitivityConfig {
  std::optional<double> radius;  // L-inf; default 0.1 * (max(x) - min(x))
  std::size_t samples = 10;
  std::uint64_t seed = 0;
  double radius_for(const Tensor& x) const;
};

struct SensitivityResult {
  double average = 0.0;
  double maximum = 0.0;
};

/// Perturbations are drawn element by element in row-major order, one
/// uniform(-r, r) per element, sample after sample.
SensitivityResult sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target,
                              const SensitivityConfig& cfg);
double avg_sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target, const SensitivityConfig& cfg);
double max_sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target, const SensitivityConfig& cfg);

/// Mean SSIM over all valid windows (7 x 7, clipped to the map size) with
/// K1 = 0.01, K2 = 0.03, data range taken jointly over both maps.
double ssim(const Tensor& a, const Tensor& b, std::size_t window = 7);

struct RandomLogitResult {
  std::size_t other_class = 0;
  double score = 0.0;
};

/// SSIM between the normalized true-class heatmap and the normalized
/// heatmap of a uniformly drawn other class.
RandomLogitResult random_logit(const ExplainFn& explain, const Tensor& x, const Tensor& heatmap,
                               std::size_t true_class, std::size_t num_classes, std::uint64_t seed);

struct FaithCorrConfig {
  double subset_fraction = 0.1;
  std::size_t iterations = 20;
  double baseline = 0.0;
  std::uint64_t seed = 0;
  void validate() const;
};

struct FaithCorrResult {
  double value = 0.0;
  bool degenerate = false;  // a series had zero variance; value is 0
};

FaithCorrResult faithfulness_correlation(const ModelFn& model, const Tensor& x, std::size_t target,
                                         const Tensor& heatmap, const FaithCorrConfig& cfg);

/// Pearson correlation; nullopt when either series has zero variance.
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace canonxai
