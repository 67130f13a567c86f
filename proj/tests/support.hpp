#pragma once

#include <random>

#include "canonxai/graph.hpp"

namespace testing {

inline canonxai::Tensor random_tensor(const canonxai::Shape& shape, std::mt19937_64& rng, float lo = -1.0f,
                                      float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  canonxai::Tensor t(shape);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline canonxai::BatchNormParams random_bn(std::size_t channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-0.5f, 0.5f), var(0.5f, 2.0f), mag(0.5f, 1.5f);
  canonxai::BatchNormParams p;
  for (std::size_t c = 0; c < channels; ++c) {
    p.weight.push_back((c % 2 ? -1.0f : 1.0f) * mag(rng));
    p.bias.push_back(u(rng));
    p.mean.push_back(u(rng));
    p.var.push_back(var(rng));
  }
  p.eps = 1e-5f;
  return p;
}

// Elementwise max of |a-b| / (1 + |a|).
inline double max_rel_dev(const canonxai::Tensor& a, const canonxai::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / (1.0 + std::abs(double(a[i]))));
  return m;
}

}  // namespace testing
