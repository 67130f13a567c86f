#include "canonxai/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "canonxai/attribution.hpp"
#include "canonxai/rng.hpp"

namespace canonxai {

namespace {

void require_map(const Tensor& h, const char* what) {
  if (h.rank() != 2) throw DimensionError(std::string(what) + " must be H x W, got " + shape_to_string(h.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

double target_logit(const ModelFn& model, const Tensor& x, std::size_t target) {
  const Tensor out = model(x);
  if (target >= out.numel()) throw ParameterError("target class outside model output");
  return out[target];
}

}  // namespace

std::string Baseline::describe() const {
  switch (kind) {
    case Kind::Black: return "black";
    case Kind::Mean: return "mean";
    case Kind::GaussianBlur: {
      std::ostringstream os;
      os << "gaussian_blur(sigma=" << sigma << ",kernel=" << kernel << ")";
      return os.str();
    }
  }
  return "unknown";
}

Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t kernel) {
  if (image.rank() != 3) throw DimensionError("blur needs C x H x W, got " + shape_to_string(image.shape()));
  if (!(sigma > 0.0) || kernel % 2 == 0) throw ParameterError("blur needs sigma > 0 and an odd kernel size");
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  std::vector<double> k(kernel);
  double ks = 0.0;
  for (std::ptrdiff_t i = -half; i <= half; ++i) {
    k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    ks += k[static_cast<std::size_t>(i + half)];
  }
  for (auto& v : k) v /= ks;
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(image.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -half; d <= half; ++d)
          acc += k[static_cast<std::size_t>(d + half)] * image.at(c, i, clampi(static_cast<std::ptrdiff_t>(j) + d, W));
        tmp[(c * H + i) * W + j] = acc;
      }
  Tensor out(image.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -half; d <= half; ++d)
          acc += k[static_cast<std::size_t>(d + half)] * tmp[(c * H + clampi(static_cast<std::ptrdiff_t>(i) + d, H)) * W + j];
        out.at(c, i, j) = static_cast<float>(acc);
      }
  return out;
}

Tensor baseline_image(const Tensor& image, const Baseline& baseline) {
  switch (baseline.kind) {
    case Baseline::Kind::Black: return Tensor(image.shape());
    case Baseline::Kind::Mean: {
      Tensor out(image.shape());
      const std::size_t C = image.dim(0), plane = image.numel() / C;
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += image[c * plane + p];
        const auto m = static_cast<float>(s / static_cast<double>(plane));
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = m;
      }
      return out;
    }
    case Baseline::Kind::GaussianBlur: return gaussian_blur(image, baseline.sigma, baseline.kernel);
  }
  return image;
}

void RegionPerturbConfig::validate() const {
  if (patch_size == 0) throw ParameterError("patch size must be >= 1");
  if (baseline.kind == Baseline::Kind::GaussianBlur && !(baseline.sigma > 0.0)) {
    throw ParameterError("blur sigma must be > 0");
  }
}

double aopc_region_perturbation(const ModelFn& model, const Tensor& x, std::size_t target, const Tensor& heatmap,
                                const RegionPerturbConfig& cfg) {
  cfg.validate();
  require_map(heatmap, "heatmap");
  if (x.rank() != 3 || x.dim(1) != heatmap.dim(0) || x.dim(2) != heatmap.dim(1)) {
    throw DimensionError("heatmap " + shape_to_string(heatmap.shape()) + " does not match image " +
                         shape_to_string(x.shape()));
  }
  const std::size_t H = x.dim(1), W = x.dim(2), p = cfg.patch_size;
  const std::size_t ph = (H + p - 1) / p, pw = (W + p - 1) / p;
  struct Patch {
    std::size_t index;
    double score;
  };
  std::vector<Patch> patches;
  for (std::size_t pi = 0; pi < ph; ++pi)
    for (std::size_t pj = 0; pj < pw; ++pj) {
      double s = 0.0;
      for (std::size_t i = pi * p; i < std::min(H, (pi + 1) * p); ++i)
        for (std::size_t j = pj * p; j < std::min(W, (pj + 1) * p); ++j) s += heatmap.at(i, j);
      patches.push_back({pi * pw + pj, s});
    }
  std::stable_sort(patches.begin(), patches.end(), [](const Patch& a, const Patch& b) { return a.score > b.score; });

  const Tensor base = baseline_image(x, cfg.baseline);
  const std::size_t L = std::min(cfg.steps, patches.size());
  const double f0 = target_logit(model, x, target);
  Tensor cur = x;
  double total = 0.0;  // k = 0 contributes f0 - f0
  for (std::size_t k = 1; k <= L; ++k) {
    const std::size_t pi = patches[k - 1].index / pw, pj = patches[k - 1].index % pw;
    for (std::size_t c = 0; c < x.dim(0); ++c)
      for (std::size_t i = pi * p; i < std::min(H, (pi + 1) * p); ++i)
        for (std::size_t j = pj * p; j < std::min(W, (pj + 1) * p); ++j) cur.at(c, i, j) = base.at(c, i, j);
    total += f0 - target_logit(model, cur, target);
  }
  return total / static_cast<double>(L + 1);
}

double rra(const Tensor& heatmap, const Tensor& mask) {
  require_map(heatmap, "heatmap");
  require_same(heatmap, mask, "rra");
  const std::size_t n = heatmap.numel();
  std::size_t k = 0;
  for (float m : mask.data()) k += m != 0.0f;
  if (k == 0) throw EmptyMaskError("rra: ground-truth mask is empty");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (heatmap[a] != heatmap[b]) return heatmap[a] > heatmap[b];
                      return a < b;
                    });
  std::size_t hit = 0;
  for (std::size_t i = 0; i < k; ++i) hit += mask[idx[i]] != 0.0f;
  return static_cast<double>(hit) / static_cast<double>(k);
}

double rma(const Tensor& heatmap, const Tensor& mask, bool raw) {
  require_map(heatmap, "heatmap");
  require_same(heatmap, mask, "rma");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < heatmap.numel(); ++i) {
    const double v = raw ? heatmap[i] : std::max(0.0, static_cast<double>(heatmap[i]));
    total += v;
    if (mask[i] != 0.0f) inside += v;
  }
  if (total == 0.0 || (!raw && total <= 0.0)) throw ZeroMassError("rma: heatmap has no positive relevance mass");
  return inside / total;
}

double sparseness_gini(const Tensor& heatmap) {
  std::vector<double> a(heatmap.numel());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(static_cast<double>(heatmap[i]));
  std::sort(a.begin(), a.end());
  const double total = std::accumulate(a.begin(), a.end(), 0.0);
  if (total == 0.0) throw ZeroMassError("gini: heatmap is all zeros");
  const auto n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * (n - static_cast<double>(k + 1) + 0.5);
  return 1.0 - 2.0 * s / (n * total);
}

double SensitivityConfig::radius_for(const Tensor& x) const {
  if (radius) return *radius;
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  return 0.1 * (static_cast<double>(*hi) - static_cast<double>(*lo));
}

SensitivityResult sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target,
                              const SensitivityConfig& cfg) {
  if (cfg.samples == 0) throw ParameterError("sensitivity needs at least one sample");
  const double r = cfg.radius_for(x);
  if (r < 0.0) throw ParameterError("sensitivity radius must be >= 0");
  const Tensor ref = normalize_heatmap(explain(x, target));
  double ref_norm = 0.0;
  for (float v : ref.data()) ref_norm += static_cast<double>(v) * v;
  ref_norm = std::sqrt(ref_norm);
  if (ref_norm == 0.0) throw ZeroMassError("sensitivity: explanation of the unperturbed input is zero");
  Rng rng(cfg.seed);
  SensitivityResult res;
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    Tensor xp = x;
    for (auto& v : xp.data()) v = static_cast<float>(static_cast<double>(v) + rng.uniform(-r, r));
    const Tensor h = normalize_heatmap(explain(xp, target));
    require_same(h, ref, "sensitivity");
    double d = 0.0;
    for (std::size_t i = 0; i < h.numel(); ++i) {
      const double e = static_cast<double>(h[i]) - ref[i];
      d += e * e;
    }
    d = std::sqrt(d) / ref_norm;
    res.average += d;
    res.maximum = std::max(res.maximum, d);
  }
  res.average /= static_cast<double>(cfg.samples);
  return res;
}

double avg_sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target, const SensitivityConfig& cfg) {
  return sensitivity(explain, x, target, cfg).average;
}

double max_sensitivity(const ExplainFn& explain, const Tensor& x, std::size_t target, const SensitivityConfig& cfg) {
  return sensitivity(explain, x, target, cfg).maximum;
}

double ssim(const Tensor& a, const Tensor& b, std::size_t window) {
  require_map(a, "ssim input");
  require_same(a, b, "ssim");
  const std::size_t H = a.dim(0), W = a.dim(1);
  const std::size_t w = std::min({window, H, W});
  if (w < 2) throw DimensionError("ssim needs maps of at least 2 x 2");
  double lo = a[0], hi = a[0];
  for (const Tensor* t : {&a, &b})
    for (float v : t->data()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  const double L = hi - lo;
  if (L == 0.0) return 1.0;  // both maps the same constant
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);

  // Summed-area tables of x, y, x^2, y^2, xy with a zero border row/column.
  const std::size_t S = (H + 1) * (W + 1);
  std::vector<double> sx(S, 0.0), sy(S, 0.0), sxx(S, 0.0), syy(S, 0.0), sxy(S, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double x = a.at(i, j), y = b.at(i, j);
      const std::size_t at = (i + 1) * (W + 1) + j + 1, up = i * (W + 1) + j + 1, left = at - 1, diag = up - 1;
      sx[at] = x + sx[up] + sx[left] - sx[diag];
      sy[at] = y + sy[up] + sy[left] - sy[diag];
      sxx[at] = x * x + sxx[up] + sxx[left] - sxx[diag];
      syy[at] = y * y + syy[up] + syy[left] - syy[diag];
      sxy[at] = x * y + sxy[up] + sxy[left] - sxy[diag];
    }
  auto box = [&](const std::vector<double>& s, std::size_t i, std::size_t j) {
    const std::size_t i1 = i + w, j1 = j + w;
    return s[i1 * (W + 1) + j1] - s[i * (W + 1) + j1] - s[i1 * (W + 1) + j] + s[i * (W + 1) + j];
  };
  const auto n = static_cast<double>(w * w);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + w <= H; ++i)
    for (std::size_t j = 0; j + w <= W; ++j) {
      const double mx = box(sx, i, j) / n, my = box(sy, i, j) / n;
      const double vx = (box(sxx, i, j) - n * mx * mx) / (n - 1);
      const double vy = (box(syy, i, j) - n * my * my) / (n - 1);
      const double cxy = (box(sxy, i, j) - n * mx * my) / (n - 1);
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

RandomLogitResult random_logit(const ExplainFn& explain, const Tensor& x, const Tensor& heatmap,
                               std::size_t true_class, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ParameterError("random logit needs at least two classes");
  if (true_class >= num_classes) throw ParameterError("true class outside the class range");
  Rng rng(seed);
  const std::size_t draw = rng.index(num_classes - 1);
  RandomLogitResult res;
  res.other_class = draw < true_class ? draw : draw + 1;
  const Tensor other = explain(x, res.other_class);
  res.score = ssim(normalize_heatmap(heatmap), normalize_heatmap(other));
  return res;
}

void FaithCorrConfig::validate() const {
  if (!(subset_fraction > 0.0 && subset_fraction < 1.0)) throw ParameterError("subset fraction must lie in (0, 1)");
  if (iterations < 2) throw ParameterError("faithfulness correlation needs at least two iterations");
}

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("pearson: series lengths differ or are empty");
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

FaithCorrResult faithfulness_correlation(const ModelFn& model, const Tensor& x, std::size_t target,
                                         const Tensor& heatmap, const FaithCorrConfig& cfg) {
  cfg.validate();
  require_map(heatmap, "heatmap");
  if (x.rank() != 3 || x.dim(1) != heatmap.dim(0) || x.dim(2) != heatmap.dim(1)) {
    throw DimensionError("heatmap " + shape_to_string(heatmap.shape()) + " does not match image " +
                         shape_to_string(x.shape()));
  }
  const std::size_t plane = heatmap.numel();
  const auto subset = static_cast<std::size_t>(std::floor(cfg.subset_fraction * static_cast<double>(plane)));
  if (subset == 0) throw ParameterError("subset fraction selects no pixels");
  const double f0 = target_logit(model, x, target);
  Rng rng(cfg.seed);
  std::vector<double> attr, drop;
  std::vector<std::size_t> pixels(plane);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::iota(pixels.begin(), pixels.end(), 0);
    // partial Fisher-Yates: the first `subset` entries are the sample
    for (std::size_t i = 0; i < subset; ++i) std::swap(pixels[i], pixels[i + rng.index(plane - i)]);
    Tensor xp = x;
    double s = 0.0;
    for (std::size_t i = 0; i < subset; ++i) {
      const std::size_t p = pixels[i];
      s += heatmap[p];
      for (std::size_t c = 0; c < x.dim(0); ++c) xp[c * plane + p] = static_cast<float>(cfg.baseline);
    }
    attr.push_back(s);
    drop.push_back(f0 - target_logit(model, xp, target));
  }
  FaithCorrResult res;
  if (auto r = pearson(attr, drop)) res.value = *r;
  else res.degenerate = true;
  return res;
}

}  // namespace canonxai
