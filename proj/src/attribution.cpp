#include "canonxai/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "canonxai/error.hpp"

namespace canonxai {

namespace {

constexpr std::size_t kPad = std::numeric_limits<std::size_t>::max();

double pos(double v) { return v > 0.0 ? v : 0.0; }
double neg(double v) { return v < 0.0 ? v : 0.0; }

/// Sign-matched stabilizer; sign(0) counts as positive.
double stabilize(double z, double eps) { return z + (z >= 0.0 ? eps : -eps); }

Shape output_shape_of(const LayerNode& n, const Tensor& in) {
  switch (n.kind) {
    case LayerKind::Linear: return {n.param("weight").dim(0)};
    case LayerKind::Conv2d:
      return conv2d_output_shape(in.shape(), n.param("weight").shape(), node_stride(n), conv_pad(n));
    case LayerKind::BatchNorm: return in.shape();
    default: throw ParameterError(n.id + ": not an affine layer");
  }
}

std::vector<double> bias_of(const LayerNode& n, const Shape& out_shape) {
  const std::size_t numel = shape_numel(out_shape);
  std::vector<double> b(numel, 0.0);
  switch (n.kind) {
    case LayerKind::Linear:
      if (n.has_param("bias"))
        for (std::size_t k = 0; k < numel; ++k) b[k] = n.param("bias")[k];
      break;
    case LayerKind::Conv2d: {
      const BiasTerm bias = conv_bias(n);
      const std::size_t plane = out_shape[1] * out_shape[2];
      for (std::size_t k = 0; k < numel; ++k) b[k] = bias.at(k / plane, k % plane, plane);
      break;
    }
    case LayerKind::BatchNorm: {
      const auto p = batchnorm_params(n);
      const std::size_t plane = numel / p.channels();
      for (std::size_t k = 0; k < numel; ++k) b[k] = p.shift(k / plane);
      break;
    }
    default: break;
  }
  return b;
}

/// Calls f(j, k, a_j, w_jk) for every input/output pair connected by a
/// weight. j is kPad for positions in the padding, where a_j is the pad value.
template <typename F>
void visit_edges(const LayerNode& n, const Tensor& in, const Shape& out_shape, F&& f) {
  switch (n.kind) {
    case LayerKind::Linear: {
      const Tensor& w = n.param("weight");
      const std::size_t m = w.dim(0), cols = w.dim(1);
      for (std::size_t k = 0; k < m; ++k)
        for (std::size_t j = 0; j < cols; ++j) f(j, k, static_cast<double>(in[j]), static_cast<double>(w[k * cols + j]));
      return;
    }
    case LayerKind::Conv2d: {
      const Tensor& w = n.param("weight");
      const std::size_t co = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
      const std::size_t h = in.dim(1), wd = in.dim(2);
      const std::size_t oh = out_shape[1], ow = out_shape[2];
      const PadSpec pad = conv_pad(n);
      const Stride2 st = node_stride(n);
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t oi = 0; oi < oh; ++oi)
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const std::size_t k = (o * oh + oi) * ow + oj;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t u = 0; u < kh; ++u) {
                const auto r = static_cast<std::ptrdiff_t>(oi * st.h + u) - static_cast<std::ptrdiff_t>(pad.top);
                for (std::size_t v = 0; v < kw; ++v) {
                  const auto s = static_cast<std::ptrdiff_t>(oj * st.w + v) - static_cast<std::ptrdiff_t>(pad.left);
                  const double wt = w[((o * ci + c) * kh + u) * kw + v];
                  if (r < 0 || s < 0 || r >= static_cast<std::ptrdiff_t>(h) || s >= static_cast<std::ptrdiff_t>(wd)) {
                    f(kPad, k, static_cast<double>(pad.value_for(c)), wt);
                  } else {
                    const std::size_t j = (c * h + static_cast<std::size_t>(r)) * wd + static_cast<std::size_t>(s);
                    f(j, k, static_cast<double>(in[j]), wt);
                  }
                }
              }
          }
      return;
    }
    case LayerKind::BatchNorm: {
      const auto p = batchnorm_params(n);
      const std::size_t plane = in.numel() / p.channels();
      for (std::size_t j = 0; j < in.numel(); ++j) f(j, j, static_cast<double>(in[j]), p.scale(j / plane));
      return;
    }
    default: throw ParameterError(n.id + ": not an affine layer");
  }
}

Tensor to_float(const Shape& shape, const std::vector<double>& v) {
  Tensor t(shape);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

void count_zero(LrpDiagnostics* diag) {
  if (diag) ++diag->zero_denominators;
}

}  // namespace

// --- rules ------------------------------------------------------------------

RuleSpec RuleSpec::make_epsilon(double eps) {
  RuleSpec r;
  r.kind = Kind::Epsilon;
  r.epsilon = eps;
  return r;
}

RuleSpec RuleSpec::make_gamma(double gamma, double eps) {
  RuleSpec r;
  r.kind = Kind::Gamma;
  r.gamma = gamma;
  r.epsilon = eps;
  return r;
}

RuleSpec RuleSpec::make_alpha_beta(double alpha, double beta) {
  RuleSpec r;
  r.kind = Kind::AlphaBeta;
  r.alpha = alpha;
  r.beta = beta;
  return r;
}

RuleSpec RuleSpec::make_box(double low, double high) {
  RuleSpec r;
  r.kind = Kind::Box;
  r.low_value = low;
  r.high_value = high;
  return r;
}

RuleSpec RuleSpec::make_box(Tensor low, Tensor high) {
  RuleSpec r;
  r.kind = Kind::Box;
  r.low = std::move(low);
  r.high = std::move(high);
  return r;
}

RuleSpec RuleSpec::make_passthrough() {
  RuleSpec r;
  r.kind = Kind::Passthrough;
  return r;
}

void RuleSpec::validate() const {
  switch (kind) {
    case Kind::Epsilon:
      if (!(epsilon > 0.0)) throw ParameterError("epsilon rule needs epsilon > 0");
      break;
    case Kind::Gamma:
      if (!(gamma >= 0.0)) throw ParameterError("gamma rule needs gamma >= 0");
      if (!(epsilon > 0.0)) throw ParameterError("gamma rule needs epsilon > 0");
      break;
    case Kind::AlphaBeta:
      if (alpha - beta != 1.0 || beta < 0.0) throw ParameterError("alpha-beta rule needs alpha - beta == 1, beta >= 0");
      break;
    case Kind::Box:
      if (low.empty() != high.empty() || (!low.empty() && low.shape() != high.shape())) {
        throw ParameterError("box rule bounds must both be given with equal shapes");
      }
      if (low.empty()) {
        if (!(low_value <= high_value)) throw ParameterError("box rule needs low <= high");
      } else {
        for (std::size_t i = 0; i < low.numel(); ++i)
          if (!(low[i] <= high[i])) throw ParameterError("box rule needs low <= high elementwise");
      }
      break;
    case Kind::Passthrough: break;
  }
}

std::string_view to_string(RuleSpec::Kind kind) {
  switch (kind) {
    case RuleSpec::Kind::Epsilon: return "epsilon";
    case RuleSpec::Kind::Gamma: return "gamma";
    case RuleSpec::Kind::AlphaBeta: return "alpha-beta";
    case RuleSpec::Kind::Box: return "box";
    case RuleSpec::Kind::Passthrough: return "passthrough";
  }
  return "unknown";
}

std::string RuleSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind);
  switch (kind) {
    case Kind::Epsilon: os << "(" << epsilon << ")"; break;
    case Kind::Gamma: os << "(" << gamma << ")"; break;
    case Kind::AlphaBeta: os << "(" << alpha << "," << beta << ")"; break;
    case Kind::Box:
      if (low.empty()) os << "(" << low_value << "," << high_value << ")";
      break;
    case Kind::Passthrough: break;
  }
  return os.str();
}

// --- composites ---------------------------------------------------------------

std::map<std::string, RuleSpec> Composite::resolve(const ModelGraph& graph) const {
  std::map<std::string, RuleSpec> out;
  std::map<LayerKind, std::string> first;
  const auto order = graph.topological_order();
  for (const auto& id : order) {
    const auto& n = graph.node(id);
    if (!first.count(n.kind)) first[n.kind] = id;
  }
  for (const auto& id : order) {
    const auto& n = graph.node(id);
    if (n.kind != LayerKind::Linear && n.kind != LayerKind::Conv2d && n.kind != LayerKind::BatchNorm) continue;
    const RuleSpec* chosen = &default_rule;
    for (const auto& [sel, rule] : rules) {
      bool hit = false;
      switch (sel.by) {
        case Selector::By::Kind: hit = n.kind == sel.kind; break;
        case Selector::By::Group: hit = n.group_or_default() == sel.group; break;
        case Selector::By::FirstOfKind: hit = n.kind == sel.kind && first[sel.kind] == id; break;
      }
      if (hit) {
        chosen = &rule;
        break;
      }
    }
    out.emplace(id, *chosen);
  }
  return out;
}

Composite composite_epsilon(double eps) {
  Composite c;
  c.name = "epsilon";
  c.default_rule = RuleSpec::make_epsilon(eps);
  return c;
}

Composite composite_alpha_beta(double alpha, double beta) {
  Composite c;
  std::ostringstream os;
  os << "alpha" << alpha << "beta" << beta;
  c.name = os.str();
  c.rules = {{Selector::of_kind(LayerKind::BatchNorm), RuleSpec::make_epsilon()}};
  c.default_rule = RuleSpec::make_alpha_beta(alpha, beta);
  return c;
}

Composite composite_eps_plus() {
  Composite c;
  c.name = "eps-plus";
  c.rules = {{Selector::of_kind(LayerKind::Conv2d), RuleSpec::make_alpha_beta(1, 0)},
             {Selector::of_kind(LayerKind::Linear), RuleSpec::make_epsilon()},
             {Selector::of_kind(LayerKind::BatchNorm), RuleSpec::make_epsilon()}};
  return c;
}

Composite composite_a2b1() {
  Composite c;
  c.name = "a2b1";
  c.rules = {{Selector::of_kind(LayerKind::Conv2d), RuleSpec::make_alpha_beta(2, 1)},
             {Selector::of_kind(LayerKind::Linear), RuleSpec::make_epsilon()},
             {Selector::of_kind(LayerKind::BatchNorm), RuleSpec::make_epsilon()}};
  return c;
}

Composite composite_custom() {
  Composite c;
  c.name = "custom";
  c.rules = {{Selector::first_of(LayerKind::Conv2d), RuleSpec::make_box(0.0, 1.0)},
             {Selector::of_kind(LayerKind::Conv2d), RuleSpec::make_alpha_beta(1, 0)},
             {Selector::of_kind(LayerKind::Linear), RuleSpec::make_alpha_beta(1, 0)},
             {Selector::of_kind(LayerKind::BatchNorm), RuleSpec::make_epsilon()}};
  return c;
}

Composite composite_excitation_backprop() {
  Composite c = composite_alpha_beta(1, 0);
  c.name = "eb";
  return c;
}

Composite composite_gamma(const std::map<std::string, double>& per_group, double fallback) {
  Composite c;
  std::ostringstream os;
  os << "gamma";
  c.rules.push_back({Selector::of_kind(LayerKind::BatchNorm), RuleSpec::make_epsilon()});
  for (const auto& [g, v] : per_group) {
    os << (c.rules.size() == 1 ? ":" : ",") << g << "=" << v;
    c.rules.push_back({Selector::of_group(g), RuleSpec::make_gamma(v)});
  }
  c.name = os.str();
  c.default_rule = RuleSpec::make_gamma(fallback);
  return c;
}

Composite builtin_composite(std::string_view name) {
  if (name == "eps-plus") return composite_eps_plus();
  if (name == "a2b1") return composite_a2b1();
  if (name == "custom") return composite_custom();
  if (name == "eb") return composite_excitation_backprop();
  if (name == "epsilon") return composite_epsilon();
  throw ParameterError("unknown composite '" + std::string(name) + "'");
}

std::vector<std::string> builtin_composite_names() { return {"eps-plus", "a2b1", "custom", "eb", "epsilon"}; }

// --- backward rules -------------------------------------------------------------

Tensor lrp_backward_linear(const LayerNode& node, const Tensor& input, const Tensor& r_out,
                           const RuleSpec& rule, LrpDiagnostics* diag) {
  rule.validate();
  const Shape out_shape = output_shape_of(node, input);
  if (r_out.shape() != out_shape) {
    throw DimensionError(node.id + ": relevance " + shape_to_string(r_out.shape()) + " vs output " +
                         shape_to_string(out_shape));
  }
  const std::size_t n_out = r_out.numel();
  std::vector<double> r_in(input.numel(), 0.0);

  switch (rule.kind) {
    case RuleSpec::Kind::Passthrough: {
      if (node.kind != LayerKind::BatchNorm) throw ParameterError(node.id + ": passthrough rule on a weighted layer");
      return r_out;
    }
    case RuleSpec::Kind::Epsilon:
    case RuleSpec::Kind::Gamma: {
      const double g = rule.kind == RuleSpec::Kind::Gamma ? rule.gamma : 0.0;
      const auto bias = bias_of(node, out_shape);
      std::vector<double> z(n_out);
      for (std::size_t k = 0; k < n_out; ++k) z[k] = bias[k] + g * pos(bias[k]);
      visit_edges(node, input, out_shape, [&](std::size_t, std::size_t k, double a, double w) {
        const double c = a * w;
        z[k] += c + g * pos(c);
      });
      std::vector<double> s(n_out);
      for (std::size_t k = 0; k < n_out; ++k) {
        const double d = stabilize(z[k], rule.epsilon);
        if (d == 0.0) {
          count_zero(diag);
          s[k] = 0.0;
        } else {
          s[k] = static_cast<double>(r_out[k]) / d;
        }
      }
      visit_edges(node, input, out_shape, [&](std::size_t j, std::size_t k, double a, double w) {
        if (j == kPad) return;
        const double c = a * w;
        r_in[j] += (c + g * pos(c)) * s[k];
      });
      break;
    }
    case RuleSpec::Kind::AlphaBeta: {
      const auto bias = bias_of(node, out_shape);
      std::vector<double> zp(n_out), zn(n_out);
      for (std::size_t k = 0; k < n_out; ++k) {
        zp[k] = pos(bias[k]);
        zn[k] = neg(bias[k]);
      }
      visit_edges(node, input, out_shape, [&](std::size_t, std::size_t k, double a, double w) {
        const double c = a * w;
        zp[k] += pos(c);
        zn[k] += neg(c);
      });
      std::vector<double> sp(n_out, 0.0), sn(n_out, 0.0);
      for (std::size_t k = 0; k < n_out; ++k) {
        const double r = r_out[k];
        if (r == 0.0) continue;
        if (zp[k] != 0.0) sp[k] = rule.alpha * r / zp[k];
        else if (rule.alpha != 0.0) count_zero(diag);
        if (zn[k] != 0.0) sn[k] = rule.beta * r / zn[k];
        else if (rule.beta != 0.0) count_zero(diag);
      }
      visit_edges(node, input, out_shape, [&](std::size_t j, std::size_t k, double a, double w) {
        if (j == kPad) return;
        const double c = a * w;
        r_in[j] += pos(c) * sp[k] - neg(c) * sn[k];
      });
      break;
    }
    case RuleSpec::Kind::Box: {
      if (!rule.low.empty() && rule.low.shape() != input.shape()) {
        throw DimensionError(node.id + ": box bounds " + shape_to_string(rule.low.shape()) + " vs input " +
                             shape_to_string(input.shape()));
      }
      // Padding positions hold the pad value with bounds equal to it, so
      // they contribute nothing.
      auto term = [&](std::size_t j, double a, double w) {
        if (j == kPad) return 0.0;
        const double l = rule.low.empty() ? rule.low_value : static_cast<double>(rule.low[j]);
        const double h = rule.high.empty() ? rule.high_value : static_cast<double>(rule.high[j]);
        return a * w - l * pos(w) - h * neg(w);
      };
      std::vector<double> z(n_out, 0.0);
      visit_edges(node, input, out_shape,
                  [&](std::size_t j, std::size_t k, double a, double w) { z[k] += term(j, a, w); });
      std::vector<double> s(n_out, 0.0);
      for (std::size_t k = 0; k < n_out; ++k) {
        if (z[k] == 0.0) {
          if (r_out[k] != 0.0f) count_zero(diag);
        } else {
          s[k] = static_cast<double>(r_out[k]) / z[k];
        }
      }
      visit_edges(node, input, out_shape, [&](std::size_t j, std::size_t k, double a, double w) {
        if (j != kPad) r_in[j] += term(j, a, w) * s[k];
      });
      break;
    }
  }
  return to_float(input.shape(), r_in);
}

std::vector<Tensor> lrp_backward_passthrough(const LayerNode& node, const std::vector<const Tensor*>& inputs,
                                             const Tensor& r_out, double eps) {
  switch (node.kind) {
    case LayerKind::ReLU:
    case LayerKind::ThreshReLU:
    case LayerKind::Flatten:
      return {r_out.reshaped(inputs.at(0)->shape())};
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      const Tensor& x = *inputs.at(0);
      const auto [kh, kw] = pool_kernel(node);
      const Stride2 st = node_stride(node);
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      const std::size_t oh = r_out.dim(1), ow = r_out.dim(2);
      std::vector<double> r(x.numel(), 0.0);
      const double area = static_cast<double>(kh * kw);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double rk = r_out.at(c, i, j);
            if (rk == 0.0) continue;
            if (node.kind == LayerKind::MaxPool) {
              // First maximum in row-major window order takes everything.
              std::size_t best = 0;
              float bv = -std::numeric_limits<float>::infinity();
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::size_t idx = (c * H + i * st.h + u) * W + j * st.w + v;
                  if (x[idx] > bv) {
                    bv = x[idx];
                    best = idx;
                  }
                }
              r[best] += rk;
            } else {
              double z = 0.0;
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) z += x[(c * H + i * st.h + u) * W + j * st.w + v] / area;
              const double s = rk / stabilize(z, eps);
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::size_t idx = (c * H + i * st.h + u) * W + j * st.w + v;
                  r[idx] += x[idx] / area * s;
                }
            }
          }
      return {to_float(x.shape(), r)};
    }
    case LayerKind::GlobalAvgPool: {
      const Tensor& x = *inputs.at(0);
      const std::size_t C = x.dim(0), plane = x.numel() / C;
      std::vector<double> r(x.numel(), 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        double z = 0.0;
        for (std::size_t p = 0; p < plane; ++p) z += x[c * plane + p] / static_cast<double>(plane);
        const double s = r_out[c] / stabilize(z, eps);
        for (std::size_t p = 0; p < plane; ++p) r[c * plane + p] = x[c * plane + p] / static_cast<double>(plane) * s;
      }
      return {to_float(x.shape(), r)};
    }
    case LayerKind::Concat: {
      const auto widths = concat_widths(node);
      std::vector<Tensor> out;
      std::size_t offset = 0;
      const std::size_t plane = r_out.numel() / r_out.dim(0);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor part(inputs[i]->shape());
        std::copy_n(r_out.data().begin() + static_cast<std::ptrdiff_t>(offset * plane), part.numel(),
                    part.data().begin());
        offset += widths[i];
        out.push_back(std::move(part));
      }
      return out;
    }
    case LayerKind::Add: {
      const std::size_t n = r_out.numel();
      std::vector<double> z(n, 0.0);
      for (const Tensor* t : inputs)
        for (std::size_t i = 0; i < n; ++i) z[i] += (*t)[i];
      std::vector<Tensor> out;
      for (const Tensor* t : inputs) {
        Tensor r(t->shape());
        for (std::size_t i = 0; i < n; ++i)
          r[i] = static_cast<float>(static_cast<double>((*t)[i]) * r_out[i] / stabilize(z[i], eps));
        out.push_back(std::move(r));
      }
      return out;
    }
    default: throw ParameterError(node.id + ": " + std::string(to_string(node.kind)) + " is not a passthrough node");
  }
}

namespace {

void accumulate(std::map<std::string, Tensor>& store, const std::string& id, const Tensor& r) {
  auto it = store.find(id);
  if (it == store.end()) {
    store.emplace(id, r);
    return;
  }
  for (std::size_t i = 0; i < r.numel(); ++i) it->second[i] += r[i];
}

std::vector<const Tensor*> node_inputs(const LayerNode& n, const ForwardResult& fwd) {
  std::vector<const Tensor*> in;
  for (const auto& id : n.inputs) in.push_back(&fwd.output_of(id));
  return in;
}

Tensor seed_output(const Tensor& out, std::size_t target, bool with_value) {
  if (target >= out.numel()) {
    throw ParameterError("target class " + std::to_string(target) + " outside output extent " +
                         std::to_string(out.numel()));
  }
  Tensor r(out.shape());
  r[target] = with_value ? out[target] : 1.0f;
  return r;
}

}  // namespace

Tensor attribute(const ModelGraph& graph, const Tensor& x, std::size_t target, const Composite& composite,
                 LrpDiagnostics* diag) {
  const auto rules = composite.resolve(graph);
  const ForwardResult fwd = forward(graph, x, true);
  std::map<std::string, Tensor> relevance;
  relevance.emplace(graph.output_id(), seed_output(fwd.output, target, true));
  const auto order = graph.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const LayerNode& n = graph.node(*it);
    if (n.kind == LayerKind::Input) continue;
    auto found = relevance.find(n.id);
    if (found == relevance.end()) continue;
    const Tensor r_out = std::move(found->second);
    relevance.erase(found);
    const auto in = node_inputs(n, fwd);
    if (n.kind == LayerKind::Linear || n.kind == LayerKind::Conv2d || n.kind == LayerKind::BatchNorm) {
      accumulate(relevance, n.inputs[0], lrp_backward_linear(n, *in[0], r_out, rules.at(n.id), diag));
    } else {
      const auto parts = lrp_backward_passthrough(n, in, r_out);
      for (std::size_t i = 0; i < parts.size(); ++i) accumulate(relevance, n.inputs[i], parts[i]);
    }
  }
  auto it = relevance.find(graph.input_id());
  if (it == relevance.end()) return Tensor(x.shape());
  return it->second;
}

namespace {

// Gradient w.r.t. the first input; nodes with several inputs fill `all` instead.
Tensor gradient_through(const LayerNode& n, const std::vector<const Tensor*>& in, const Tensor& g_out,
                        std::vector<Tensor>* all) {
  const Tensor& x = *in.at(0);
  switch (n.kind) {
    case LayerKind::Linear: {
      const Tensor& w = n.param("weight");
      const std::size_t m = w.dim(0), cols = w.dim(1);
      std::vector<double> g(cols, 0.0);
      for (std::size_t k = 0; k < m; ++k)
        for (std::size_t j = 0; j < cols; ++j) g[j] += static_cast<double>(w[k * cols + j]) * g_out[k];
      return to_float(x.shape(), g);
    }
    case LayerKind::Conv2d: {
      const PadSpec pad = conv_pad(n);
      const std::size_t ph = x.dim(1) + pad.top + pad.bottom, pw = x.dim(2) + pad.left + pad.right;
      const Tensor gp = conv2d_transpose(g_out, n.param("weight"), ph, pw, node_stride(n));
      Tensor g(x.shape());
      for (std::size_t c = 0; c < x.dim(0); ++c)
        for (std::size_t i = 0; i < x.dim(1); ++i)
          for (std::size_t j = 0; j < x.dim(2); ++j) g.at(c, i, j) = gp.at(c, i + pad.top, j + pad.left);
      return g;
    }
    case LayerKind::BatchNorm: {
      const auto p = batchnorm_params(n);
      const std::size_t plane = x.numel() / p.channels();
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) g[i] = static_cast<float>(g_out[i] * p.scale(i / plane));
      return g;
    }
    case LayerKind::ReLU: {
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > 0.0f ? g_out[i] : 0.0f;
      return g;
    }
    case LayerKind::ThreshReLU: {
      const Tensor& z = n.param("threshold");
      const Tensor& d = n.param("direction");
      const std::size_t plane = x.numel() / z.numel();
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const std::size_t c = i / plane;
        g[i] = d[c] * (x[i] - z[c]) > 0.0f ? g_out[i] : 0.0f;
      }
      return g;
    }
    case LayerKind::Flatten: return g_out.reshaped(x.shape());
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      const auto [kh, kw] = pool_kernel(n);
      const Stride2 st = node_stride(n);
      const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
      std::vector<double> g(x.numel(), 0.0);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < g_out.dim(1); ++i)
          for (std::size_t j = 0; j < g_out.dim(2); ++j) {
            const double gk = g_out.at(c, i, j);
            if (n.kind == LayerKind::MaxPool) {
              std::size_t best = 0;
              float bv = -std::numeric_limits<float>::infinity();
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::size_t idx = (c * H + i * st.h + u) * W + j * st.w + v;
                  if (x[idx] > bv) {
                    bv = x[idx];
                    best = idx;
                  }
                }
              g[best] += gk;
            } else {
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v)
                  g[(c * H + i * st.h + u) * W + j * st.w + v] += gk / static_cast<double>(kh * kw);
            }
          }
      return to_float(x.shape(), g);
    }
    case LayerKind::GlobalAvgPool: {
      const std::size_t C = x.dim(0), plane = x.numel() / C;
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i)
        g[i] = static_cast<float>(g_out[i / plane] / static_cast<double>(plane));
      return g;
    }
    case LayerKind::Concat:
    case LayerKind::Add: {
      const auto parts = n.kind == LayerKind::Concat
                             ? lrp_backward_passthrough(n, in, g_out)
                             : std::vector<Tensor>(in.size(), g_out);
      *all = parts;
      return {};
    }
    case LayerKind::Input: break;
  }
  throw ParameterError(n.id + ": no gradient");
}

}  // namespace

Tensor gradient_saliency(const ModelGraph& graph, const Tensor& x, std::size_t target) {
  const ForwardResult fwd = forward(graph, x, true);
  std::map<std::string, Tensor> grads;
  grads.emplace(graph.output_id(), seed_output(fwd.output, target, false));
  const auto order = graph.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const LayerNode& n = graph.node(*it);
    if (n.kind == LayerKind::Input) continue;
    auto found = grads.find(n.id);
    if (found == grads.end()) continue;
    const Tensor g_out = std::move(found->second);
    grads.erase(found);
    const auto in = node_inputs(n, fwd);
    std::vector<Tensor> parts;
    Tensor single = gradient_through(n, in, g_out, &parts);
    if (parts.empty()) {
      accumulate(grads, n.inputs[0], single);
    } else {
      for (std::size_t i = 0; i < parts.size(); ++i) accumulate(grads, n.inputs[i], parts[i]);
    }
  }
  auto it = grads.find(graph.input_id());
  if (it == grads.end()) return Tensor(x.shape());
  return it->second;
}

// --- heatmap post-processing ---------------------------------------------------

std::string_view to_string(PoolMethod method) {
  switch (method) {
    case PoolMethod::Sum: return "sum";
    case PoolMethod::PosL2NormSq: return "pos-l2-norm-sq";
    case PoolMethod::MaxNorm: return "max-norm";
  }
  return "unknown";
}

PoolMethod parse_pool_method(std::string_view name) {
  if (name == "sum") return PoolMethod::Sum;
  if (name == "pos-l2-norm-sq") return PoolMethod::PosL2NormSq;
  if (name == "max-norm") return PoolMethod::MaxNorm;
  throw ParameterError("unknown pooling method '" + std::string(name) + "'");
}

Tensor pool_channels(const Tensor& relevance, PoolMethod method) {
  if (relevance.rank() != 3) {
    throw DimensionError("channel pooling needs C x H x W, got " + shape_to_string(relevance.shape()));
  }
  const std::size_t C = relevance.dim(0), plane = relevance.dim(1) * relevance.dim(2);
  Tensor out({relevance.dim(1), relevance.dim(2)});
  for (std::size_t p = 0; p < plane; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double r = relevance[c * plane + p];
      switch (method) {
        case PoolMethod::Sum: acc += r; break;
        case PoolMethod::PosL2NormSq: acc += pos(r) * pos(r); break;
        case PoolMethod::MaxNorm: acc = std::max(acc, std::abs(r)); break;
      }
    }
    out[p] = static_cast<float>(acc);
  }
  return out;
}

Tensor normalize_heatmap(const Tensor& h) {
  double sq = 0.0;
  for (float v : h.data()) sq += static_cast<double>(v) * v;
  if (sq == 0.0) return h;
  const double rms = std::sqrt(sq / static_cast<double>(h.numel()));
  Tensor out(h.shape());
  for (std::size_t i = 0; i < h.numel(); ++i) out[i] = static_cast<float>(h[i] / rms);
  return out;
}

}  // namespace canonxai
