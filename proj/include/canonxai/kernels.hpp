#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "canonxai/tensor.hpp"

namespace canonxai {

/// |w_BN| at or below this value makes a channel degenerate for the
/// ThreshReLU swap and for rescaling a nonzero pad value.
inline constexpr double kDegenerateScaleTolerance = 1e-12;

struct Stride2 {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const Stride2&, const Stride2&) = default;
};

/// Constant padding applied around the spatial axes before a convolution.
/// `channel_values`, when non-empty, overrides `value` per input channel;
/// it appears after fusing a BatchNorm into a conv with nonzero padding.
struct PadSpec {
  std::size_t top = 0;
  std::size_t bottom = 0;
  std::size_t left = 0;
  std::size_t right = 0;
  float value = 0.0f;
  std::vector<float> channel_values;

  static PadSpec uniform(std::size_t width, float value = 0.0f) {
    return PadSpec{width, width, width, width, value, {}};
  }

  bool any() const { return top || bottom || left || right; }
  float value_for(std::size_t channel) const {
    return channel_values.empty() ? value : channel_values[channel];
  }
  bool all_values_zero() const;

  friend bool operator==(const PadSpec&, const PadSpec&) = default;
};

/// Either no bias, one scalar per output channel, or a full C x H' x W'
/// map (the result of fusing a BatchNorm into a padded convolution).
class BiasTerm {
 public:
  enum class Kind { None, PerChannel, Map };

  BiasTerm() = default;
  static BiasTerm per_channel(Tensor values);
  static BiasTerm map(Tensor values);

  Kind kind() const { return kind_; }
  const Tensor& values() const { return values_; }
  /// Bias for output element (channel, flat spatial index).
  double at(std::size_t channel, std::size_t spatial, std::size_t plane) const {
    switch (kind_) {
      case Kind::None: return 0.0;
      case Kind::PerChannel: return values_[channel];
      case Kind::Map: return values_[channel * plane + spatial];
    }
    return 0.0;
  }

 private:
  Kind kind_ = Kind::None;
  Tensor values_;
};

/// Inference-time BatchNorm: w * (x - mean) / sqrt(var + eps) + b, per channel.
struct BatchNormParams {
  std::vector<float> weight;
  std::vector<float> bias;
  std::vector<float> mean;
  std::vector<float> var;
  float eps = 1e-5f;

  std::size_t channels() const { return weight.size(); }
  /// Throws ParameterError on length mismatch or var + eps <= 0.
  void validate() const;
  double denom(std::size_t c) const;  // sqrt(var + eps)
  double scale(std::size_t c) const;  // w / sqrt(var + eps)
  double shift(std::size_t c) const;  // b - w * mean / sqrt(var + eps)

  static BatchNormParams identity(std::size_t channels);
};

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);

Shape conv2d_output_shape(const Shape& input, const Shape& kernel, Stride2 stride,
                          const PadSpec& pad);

/// Cross-correlation (no kernel flip) over the padded input, plus bias.
Tensor conv2d_forward(const Tensor& x, const Tensor& kernel, const BiasTerm& bias,
                      Stride2 stride, const PadSpec& pad);

/// Materializes the padded input (C x (H+t+b) x (W+l+r)).
Tensor pad2d(const Tensor& x, const PadSpec& pad);

/// Adjoint of an unpadded, bias-free conv: returns K^T applied to `grad_out`
/// for an input of spatial size in_h x in_w.
Tensor conv2d_transpose(const Tensor& grad_out, const Tensor& kernel, std::size_t in_h,
                        std::size_t in_w, Stride2 stride);

/// Channel axis is axis 0 for both 1-D and C x H x W inputs.
Tensor batchnorm_forward(const Tensor& x, const BatchNormParams& params);

Tensor relu_forward(const Tensor& x);

/// z[c] = mean - b * sqrt(var + eps) / w. Throws DegenerateChannelError when
/// |w| <= kDegenerateScaleTolerance.
std::vector<float> thresh_relu_threshold(const BatchNormParams& params);

/// ReLU_thresh with explicit per-channel threshold and direction (sign of w_BN).
/// out = x where direction * (x - z) > 0, else z.
Tensor thresh_relu_forward(const Tensor& x, std::span<const float> threshold,
                           std::span<const float> direction);

/// ReLU_thresh derived from BatchNorm parameters so that
/// BN(thresh_relu(x)) matches ReLU(BN(x)).
Tensor thresh_relu_forward(const Tensor& x, const BatchNormParams& params);

Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, Stride2 stride);
Tensor max_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, Stride2 stride);
Tensor global_avg_pool(const Tensor& x);

Shape pool2d_output_shape(const Shape& input, std::size_t kh, std::size_t kw, Stride2 stride);

}  // namespace canonxai
