#include "canonxai/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "canonxai/error.hpp"

namespace canonxai {

bool PadSpec::all_values_zero() const {
  if (channel_values.empty()) return value == 0.0f;
  return std::all_of(channel_values.begin(), channel_values.end(),
                     [](float v) { return v == 0.0f; });
}

BiasTerm BiasTerm::per_channel(Tensor values) {
  if (values.rank() != 1) {
    throw DimensionError("per-channel bias must be 1-D, got " + shape_to_string(values.shape()));
  }
  BiasTerm b;
  b.kind_ = Kind::PerChannel;
  b.values_ = std::move(values);
  return b;
}

BiasTerm BiasTerm::map(Tensor values) {
  if (values.rank() != 3) {
    throw DimensionError("bias map must be C x H x W, got " + shape_to_string(values.shape()));
  }
  BiasTerm b;
  b.kind_ = Kind::Map;
  b.values_ = std::move(values);
  return b;
}

void BatchNormParams::validate() const {
  const auto n = weight.size();
  if (bias.size() != n || mean.size() != n || var.size() != n) {
    throw ParameterError("batchnorm parameter vectors differ in length");
  }
  if (n == 0) throw ParameterError("batchnorm has zero channels");
  for (std::size_t c = 0; c < n; ++c) {
    if (!(static_cast<double>(var[c]) + static_cast<double>(eps) > 0.0)) {
      throw ParameterError("batchnorm channel " + std::to_string(c) + ": var + eps <= 0");
    }
  }
}

double BatchNormParams::denom(std::size_t c) const {
  return std::sqrt(static_cast<double>(var[c]) + static_cast<double>(eps));
}

double BatchNormParams::scale(std::size_t c) const {
  return static_cast<double>(weight[c]) / denom(c);
}

double BatchNormParams::shift(std::size_t c) const {
  return static_cast<double>(bias[c]) -
         static_cast<double>(weight[c]) * static_cast<double>(mean[c]) / denom(c);
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  BatchNormParams p;
  p.weight.assign(channels, 1.0f);
  p.bias.assign(channels, 0.0f);
  p.mean.assign(channels, 0.0f);
  p.var.assign(channels, 1.0f);
  p.eps = 0.0f;
  return p;
}

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 1 || weight.rank() != 2 || weight.dim(1) != x.dim(0)) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  const std::size_t m = weight.dim(0);
  const std::size_t n = weight.dim(1);
  if (!bias.empty() && bias.shape() != Shape{m}) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      acc += static_cast<double>(weight[i * n + j]) * static_cast<double>(x[j]);
    }
    if (!bias.empty()) acc += static_cast<double>(bias[i]);
    out[i] = static_cast<float>(acc);
  }
  return out;
}

Shape conv2d_output_shape(const Shape& input, const Shape& kernel, Stride2 stride,
                          const PadSpec& pad) {
  if (input.size() != 3 || kernel.size() != 4 || kernel[1] != input[0]) {
    throw DimensionError("conv2d: input " + shape_to_string(input) + " does not match kernel " +
                         shape_to_string(kernel));
  }
  if (stride.h == 0 || stride.w == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t ph = input[1] + pad.top + pad.bottom;
  const std::size_t pw = input[2] + pad.left + pad.right;
  if (kernel[2] > ph || kernel[3] > pw) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel) +
                         " larger than padded input " + shape_to_string({input[0], ph, pw}));
  }
  return {kernel[0], (ph - kernel[2]) / stride.h + 1, (pw - kernel[3]) / stride.w + 1};
}

Tensor pad2d(const Tensor& x, const PadSpec& pad) {
  if (x.rank() != 3) throw DimensionError("pad2d expects C x H x W, got " + shape_to_string(x.shape()));
  if (!pad.channel_values.empty() && pad.channel_values.size() != x.dim(0)) {
    throw DimensionError("pad2d: " + std::to_string(pad.channel_values.size()) +
                         " pad values for " + std::to_string(x.dim(0)) + " channels");
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ph = h + pad.top + pad.bottom, pw = w + pad.left + pad.right;
  Tensor out(Shape{c, ph, pw});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float v = pad.value_for(ch);
    for (std::size_t i = 0; i < ph; ++i) {
      for (std::size_t j = 0; j < pw; ++j) {
        const bool inside = i >= pad.top && i < pad.top + h && j >= pad.left && j < pad.left + w;
        out.at(ch, i, j) = inside ? x.at(ch, i - pad.top, j - pad.left) : v;
      }
    }
  }
  return out;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& kernel, const BiasTerm& bias,
                      Stride2 stride, const PadSpec& pad) {
  if (x.rank() != 3 || kernel.rank() != 4) {
    throw DimensionError("conv2d: input " + shape_to_string(x.shape()) + " does not match kernel " +
                         shape_to_string(kernel.shape()));
  }
  const Shape out_shape = conv2d_output_shape(x.shape(), kernel.shape(), stride, pad);
  const std::size_t co = out_shape[0], oh = out_shape[1], ow = out_shape[2];
  switch (bias.kind()) {
    case BiasTerm::Kind::None: break;
    case BiasTerm::Kind::PerChannel:
      if (bias.values().shape() != Shape{co}) {
        throw DimensionError("conv2d: bias " + shape_to_string(bias.values().shape()) +
                             " does not match " + std::to_string(co) + " output channels");
      }
      break;
    case BiasTerm::Kind::Map:
      if (bias.values().shape() != out_shape) {
        throw DimensionError("conv2d: bias map " + shape_to_string(bias.values().shape()) +
                             " does not match output " + shape_to_string(out_shape));
      }
      break;
  }

  const Tensor padded = pad.any() ? pad2d(x, pad) : x;
  const std::size_t ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t ph = padded.dim(1), pw = padded.dim(2);
  const float* in = padded.data().data();
  const float* k = kernel.data().data();

  Tensor out(out_shape);
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ci; ++c) {
          const float* kc = k + ((o * ci + c) * kh) * kw;
          const float* ic = in + c * ph * pw;
          for (std::size_t u = 0; u < kh; ++u) {
            const float* row = ic + (i * stride.h + u) * pw + j * stride.w;
            for (std::size_t v = 0; v < kw; ++v) {
              acc += static_cast<double>(kc[u * kw + v]) * static_cast<double>(row[v]);
            }
          }
        }
        acc += bias.at(o, i * ow + j, oh * ow);
        out.at(o, i, j) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor conv2d_transpose(const Tensor& grad_out, const Tensor& kernel, std::size_t in_h,
                        std::size_t in_w, Stride2 stride) {
  const std::size_t co = kernel.dim(0), ci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (grad_out.rank() != 3 || grad_out.dim(0) != co) {
    throw DimensionError("conv2d_transpose: gradient " + shape_to_string(grad_out.shape()) +
                         " does not match kernel " + shape_to_string(kernel.shape()));
  }
  const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  std::vector<double> acc(ci * in_h * in_w, 0.0);
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double g = grad_out.at(o, i, j);
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < ci; ++c) {
          for (std::size_t u = 0; u < kh; ++u) {
            const std::size_t r = i * stride.h + u;
            double* row = acc.data() + (c * in_h + r) * in_w + j * stride.w;
            const float* krow = kernel.data().data() + ((o * ci + c) * kh + u) * kw;
            for (std::size_t v = 0; v < kw; ++v) row[v] += g * static_cast<double>(krow[v]);
          }
        }
      }
    }
  }
  Tensor out(Shape{ci, in_h, in_w});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

namespace {

std::size_t channel_count(const Tensor& x) { return x.dim(0); }
std::size_t channel_plane(const Tensor& x) { return x.numel() / x.dim(0); }

}  // namespace

namespace {

// Float zero crossing of channel c, shared by BatchNorm evaluation and the
// ThreshReLU threshold.
float zero_point(const BatchNormParams& params, std::size_t c) {
  return static_cast<float>(static_cast<double>(params.mean[c]) -
                            static_cast<double>(params.bias[c]) * params.denom(c) /
                                static_cast<double>(params.weight[c]));
}

}  // namespace

Tensor batchnorm_forward(const Tensor& x, const BatchNormParams& params) {
  params.validate();
  if (x.empty() || channel_count(x) != params.channels()) {
    throw DimensionError("batchnorm: input " + shape_to_string(x.shape()) + " has " +
                         (x.empty() ? std::string("no") : std::to_string(channel_count(x))) +
                         " channels, parameters have " + std::to_string(params.channels()));
  }
  Tensor out(x.shape());
  const std::size_t plane = channel_plane(x);
  for (std::size_t c = 0; c < params.channels(); ++c) {
    const double w = params.weight[c];
    const double mu = params.mean[c];
    const double b = params.bias[c];
    const double d = params.denom(c);
    if (std::abs(w) <= kDegenerateScaleTolerance) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = c * plane + p;
        out[idx] = static_cast<float>(w * (static_cast<double>(x[idx]) - mu) / d + b);
      }
      continue;
    }
    // w/d * (x - z) with z the float zero crossing: BN(z) is exactly 0 and
    // sign(BN(x)) == sign(w) * sign(x - z), which keeps the ThreshReLU swap
    // exact. x - z is exact in double.
    const double z = zero_point(params, c);
    const double s = w / d;
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t idx = c * plane + p;
      out[idx] = static_cast<float>(s * (static_cast<double>(x[idx]) - z)) + 0.0f;
    }
  }
  return out;
}

Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

std::vector<float> thresh_relu_threshold(const BatchNormParams& params) {
  params.validate();
  std::vector<float> z(params.channels());
  for (std::size_t c = 0; c < params.channels(); ++c) {
    const double w = params.weight[c];
    if (std::abs(w) <= kDegenerateScaleTolerance) {
      throw DegenerateChannelError(
          "batchnorm channel " + std::to_string(c) + " has |w_BN| <= tolerance; threshold undefined", c);
    }
    z[c] = zero_point(params, c);
  }
  return z;
}

Tensor thresh_relu_forward(const Tensor& x, std::span<const float> threshold,
                           std::span<const float> direction) {
  if (x.empty() || threshold.size() != channel_count(x) || direction.size() != threshold.size()) {
    throw DimensionError("thresh_relu: input " + shape_to_string(x.shape()) + " vs " +
                         std::to_string(threshold.size()) + " thresholds");
  }
  Tensor out(x.shape());
  const std::size_t plane = channel_plane(x);
  for (std::size_t c = 0; c < threshold.size(); ++c) {
    const float z = threshold[c];
    const bool positive = direction[c] > 0.0f;
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t idx = c * plane + p;
      const float v = x[idx];
      const bool pass = positive ? v > z : v < z;
      out[idx] = pass ? v : z;
    }
  }
  return out;
}

Tensor thresh_relu_forward(const Tensor& x, const BatchNormParams& params) {
  const auto z = thresh_relu_threshold(params);
  std::vector<float> dir(params.channels());
  for (std::size_t c = 0; c < dir.size(); ++c) dir[c] = params.weight[c] > 0.0f ? 1.0f : -1.0f;
  return thresh_relu_forward(x, z, dir);
}

Shape pool2d_output_shape(const Shape& input, std::size_t kh, std::size_t kw, Stride2 stride) {
  if (input.size() != 3) throw DimensionError("pool2d expects C x H x W, got " + shape_to_string(input));
  if (kh == 0 || kw == 0 || stride.h == 0 || stride.w == 0 || kh > input[1] || kw > input[2]) {
    throw DimensionError("pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " invalid for input " + shape_to_string(input));
  }
  return {input[0], (input[1] - kh) / stride.h + 1, (input[2] - kw) / stride.w + 1};
}

Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, Stride2 stride) {
  const Shape os = pool2d_output_shape(x.shape(), kh, kw, stride);
  Tensor out(os);
  const double n = static_cast<double>(kh * kw);
  for (std::size_t c = 0; c < os[0]; ++c)
    for (std::size_t i = 0; i < os[1]; ++i)
      for (std::size_t j = 0; j < os[2]; ++j) {
        double acc = 0.0;
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t v = 0; v < kw; ++v) acc += x.at(c, i * stride.h + u, j * stride.w + v);
        out.at(c, i, j) = static_cast<float>(acc / n);
      }
  return out;
}

Tensor max_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, Stride2 stride) {
  const Shape os = pool2d_output_shape(x.shape(), kh, kw, stride);
  Tensor out(os);
  for (std::size_t c = 0; c < os[0]; ++c)
    for (std::size_t i = 0; i < os[1]; ++i)
      for (std::size_t j = 0; j < os[2]; ++j) {
        float m = -std::numeric_limits<float>::infinity();
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t v = 0; v < kw; ++v) m = std::max(m, x.at(c, i * stride.h + u, j * stride.w + v));
        out.at(c, i, j) = m;
      }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("global_avg_pool expects C x H x W, got " + shape_to_string(x.shape()));
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tensor out(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += x[ch * plane + p];
    out[ch] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return out;
}

}  // namespace canonxai
