#include "canonxai/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>
#include <tuple>

#include "canonxai/canonize.hpp"
#include "json.hpp"

namespace canonxai {

using nlohmann::json;

std::string_view to_string(CanonMode mode) {
  switch (mode) {
    case CanonMode::Original: return "no";
    case CanonMode::Canonized: return "yes";
    case CanonMode::Both: return "both";
  }
  return "?";
}

CanonMode parse_canon_mode(std::string_view text) {
  if (text == "no" || text == "original") return CanonMode::Original;
  if (text == "yes" || text == "canonized") return CanonMode::Canonized;
  if (text == "both") return CanonMode::Both;
  throw ParameterError("canonized must be one of no, yes, both; got '" + std::string(text) + "'");
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string short_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string describe_selector(const Selector& s) {
  switch (s.by) {
    case Selector::By::Kind: return "kind=" + std::string(to_string(s.kind));
    case Selector::By::Group: return "group=" + s.group;
    case Selector::By::FirstOfKind: return "first=" + std::string(to_string(s.kind));
  }
  return "?";
}

std::string describe_composite(const Composite& c) {
  std::string out = c.name + ":";
  for (const auto& [sel, rule] : c.rules) out += " " + describe_selector(sel) + "->" + rule.describe() + ";";
  return out + " default->" + c.default_rule.describe();
}

}  // namespace

ExplainerSpec ExplainerSpec::saliency(CanonMode mode) { return {"saliency", std::nullopt, mode}; }

ExplainerSpec ExplainerSpec::lrp(Composite composite, CanonMode mode) {
  std::string id = composite.name;
  return {std::move(id), std::move(composite), mode};
}

ExplainerSpec ExplainerSpec::named(std::string_view name, CanonMode mode) {
  if (name == "saliency") return saliency(mode);
  return lrp(builtin_composite(name), mode);
}

std::string ExplainerSpec::describe() const {
  return composite ? describe_composite(*composite) : std::string("gradient saliency");
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"aopc",           "rra",           "rma",
                                                 "gini",           "avg_sensitivity", "max_sensitivity",
                                                 "random_logit",   "faithfulness_correlation"};
  return names;
}

// ---------------------------------------------------------------------------
// report output

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

const char* flag(bool b) { return b ? "true" : "false"; }

}  // namespace

std::string MetricReport::to_csv() const {
  std::string out = "sample_id,config_id,canonized,metric,score,status,message,seed\r\n";
  for (const auto& r : rows) {
    out += csv_field(r.sample_id) + "," + csv_field(r.config_id) + "," + flag(r.canonized) + "," + csv_field(r.metric) +
           "," + (r.status == "ok" ? format_real(r.score) : std::string()) + "," + r.status + "," +
           csv_field(r.message) + "," + std::to_string(r.seed) + "\r\n";
  }
  return out;
}

std::string MetricReport::marginals_csv() const {
  std::string out = "group,gamma,canonized,metric,mean,count\r\n";
  for (const auto& m : marginals) {
    out += csv_field(m.group) + "," + format_real(m.gamma) + "," + flag(m.canonized) + "," + csv_field(m.metric) + "," +
           format_real(m.mean) + "," + std::to_string(m.count) + "\r\n";
  }
  return out;
}

std::string MetricReport::to_json() const {
  json j;
  j["fingerprint"] = fingerprint.empty() ? json::object() : json::parse(fingerprint);
  json rs = json::array();
  for (const auto& r : rows) {
    json jr = {{"sample_id", r.sample_id}, {"config_id", r.config_id}, {"canonized", r.canonized},
               {"metric", r.metric},       {"status", r.status},       {"seed", r.seed}};
    jr["score"] = r.status == "ok" ? json(r.score) : json(nullptr);
    if (!r.message.empty()) jr["message"] = r.message;
    rs.push_back(std::move(jr));
  }
  j["rows"] = std::move(rs);
  json ms = json::array();
  for (const auto& m : means) {
    ms.push_back({{"config_id", m.config_id}, {"canonized", m.canonized}, {"metric", m.metric}, {"mean", m.mean},
                  {"count", m.count}});
  }
  j["means"] = std::move(ms);
  if (!marginals.empty()) {
    json mg = json::array();
    for (const auto& m : marginals) {
      mg.push_back({{"group", m.group}, {"gamma", m.gamma}, {"canonized", m.canonized}, {"metric", m.metric},
                    {"mean", m.mean}, {"count", m.count}});
    }
    j["marginals"] = std::move(mg);
  }
  return j.dump(2) + "\n";
}

std::size_t MetricReport::error_count() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.status != "ok"; }));
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

struct Job {
  std::string config_id;
  const ExplainerSpec* explainer;
};

struct Variant {
  bool canonized;
  const ModelGraph* graph;
};

void validate_metrics(const std::vector<std::string>& metrics) {
  if (metrics.empty()) throw ParameterError("no metrics requested");
  std::set<std::string> seen;
  for (const auto& m : metrics) {
    if (std::find(metric_names().begin(), metric_names().end(), m) == metric_names().end()) {
      throw ParameterError("unknown metric '" + m + "'");
    }
    if (!seen.insert(m).second) throw ParameterError("metric '" + m + "' listed twice");
  }
}

json settings_json(const EvalOptions& o) {
  const auto& s = o.settings;
  json j;
  j["seed"] = o.seed;
  j["sample_seed"] = "base_seed XOR sample_index";
  j["metrics"] = o.metrics;
  j["pooling"] = std::string(to_string(s.pooling));
  j["normalization"] = "h / sqrt(mean(h^2))";
  j["aopc"] = {{"patch_size", s.aopc.patch_size},
               {"steps", s.aopc.steps},
               {"baseline", s.aopc.baseline.describe()},
               {"order", "most_relevant_first"}};
  j["sensitivity"] = {{"radius", s.sensitivity.radius ? json(*s.sensitivity.radius) : json("0.1*(max(x)-min(x))")},
                      {"samples", s.sensitivity.samples}};
  j["faithfulness_correlation"] = {{"subset_fraction", s.faithfulness.subset_fraction},
                                   {"iterations", s.faithfulness.iterations},
                                   {"baseline", s.faithfulness.baseline}};
  j["rma"] = {{"mode", s.rma_raw ? "raw" : "positive"}};
  j["random_logit"] = {{"distance", "ssim"}, {"window", 7}, {"k1", 0.01}, {"k2", 0.03}};
  j["lrp_epsilon"] = kDefaultLrpEpsilon;
  return j;
}

ScoreRow score_metric(const std::string& metric, const Sample& s, std::size_t target, std::uint64_t seed,
                      const ModelFn& model, const ExplainFn& explain, const Tensor& heatmap, std::size_t classes,
                      const MetricSettings& settings) {
  ScoreRow row;
  row.metric = metric;
  if (metric == "aopc") {
    row.score = aopc_region_perturbation(model, s.image, target, heatmap, settings.aopc);
  } else if (metric == "rra" || metric == "rma") {
    if (!s.mask) throw DimensionError("sample has no ground-truth mask");
    row.score = metric == "rra" ? rra(heatmap, *s.mask) : rma(heatmap, *s.mask, settings.rma_raw);
  } else if (metric == "gini") {
    row.score = sparseness_gini(heatmap);
  } else if (metric == "avg_sensitivity" || metric == "max_sensitivity") {
    SensitivityConfig cfg = settings.sensitivity;
    cfg.seed = seed;
    const auto r = sensitivity(explain, s.image, target, cfg);
    row.score = metric == "avg_sensitivity" ? r.average : r.maximum;
  } else if (metric == "random_logit") {
    const auto r = random_logit(explain, s.image, heatmap, target, classes, seed);
    row.score = r.score;
    row.message = "other class " + std::to_string(r.other_class);
  } else if (metric == "faithfulness_correlation") {
    FaithCorrConfig cfg = settings.faithfulness;
    cfg.seed = seed;
    const auto r = faithfulness_correlation(model, s.image, target, heatmap, cfg);
    row.score = r.value;
    if (r.degenerate) row.message = "zero variance; reported as 0";
  }
  return row;
}

std::vector<ScoreRow> run_job(const Job& job, const Sample& s, std::uint64_t seed, const std::vector<Variant>& variants,
                              const EvalOptions& options) {
  std::vector<ScoreRow> out;
  const auto& spec = *job.explainer;
  for (const auto& v : variants) {
    if (spec.mode == CanonMode::Original && v.canonized) continue;
    if (spec.mode == CanonMode::Canonized && !v.canonized) continue;
    const ModelGraph& g = *v.graph;
    auto stamp = [&](ScoreRow r) {
      r.sample_id = s.id;
      r.config_id = job.config_id;
      r.canonized = v.canonized;
      r.seed = seed;
      return r;
    };
    const ModelFn model = [&g](const Tensor& x) { return forward(g, x).output; };
    const ExplainFn explain = [&g, &spec, &options](const Tensor& x, std::size_t t) {
      const Tensor raw = spec.composite ? attribute(g, x, t, *spec.composite) : gradient_saliency(g, x, t);
      return normalize_heatmap(pool_channels(raw, options.settings.pooling));
    };
    Tensor heatmap;
    std::size_t classes = 0;
    std::string failure;
    try {
      classes = model(s.image).numel();
      if (s.label >= classes) {
        throw ParameterError("label " + std::to_string(s.label) + " outside model output of " +
                             std::to_string(classes));
      }
      heatmap = explain(s.image, s.label);
    } catch (const std::exception& e) {
      failure = e.what();
    }
    for (const auto& metric : options.metrics) {
      ScoreRow row;
      row.metric = metric;
      if (failure.empty()) {
        try {
          row = score_metric(metric, s, s.label, seed, model, explain, heatmap, classes, options.settings);
        } catch (const std::exception& e) {
          row.status = "error";
          row.message = e.what();
        }
      } else {
        row.status = "error";
        row.message = failure;
      }
      if (row.status == "ok" && !std::isfinite(row.score)) {
        row.status = "error";
        row.message = "non-finite score";
      }
      out.push_back(stamp(std::move(row)));
    }
  }
  return out;
}

std::vector<ScoreRow> run_jobs(const ModelGraph& graph, const std::vector<Sample>& dataset,
                               const std::vector<Job>& jobs, const EvalOptions& options) {
  validate_metrics(options.metrics);
  options.settings.aopc.validate();
  options.settings.faithfulness.validate();
  const bool any_canon = std::any_of(jobs.begin(), jobs.end(), [](const Job& j) {
    return j.explainer->mode != CanonMode::Original;
  });
  std::optional<ModelGraph> canon;
  if (any_canon) canon = canonize_graph(graph).graph;
  std::vector<Variant> variants = {{false, &graph}};
  if (canon) variants.push_back({true, &*canon});

  const std::size_t n = dataset.size() * jobs.size();
  std::vector<std::vector<ScoreRow>> results(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const std::size_t si = i / jobs.size();
      results[i] = run_job(jobs[i % jobs.size()], dataset[si], sample_seed(options.seed, si), variants, options);
    }
  };
  std::size_t threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
  threads = std::min(threads, std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<ScoreRow> rows;
  for (auto& r : results) std::move(r.begin(), r.end(), std::back_inserter(rows));
  std::sort(rows.begin(), rows.end(), [](const ScoreRow& a, const ScoreRow& b) {
    return std::tie(a.sample_id, a.config_id, a.canonized, a.metric) <
           std::tie(b.sample_id, b.config_id, b.canonized, b.metric);
  });
  return rows;
}

std::vector<MeanRow> unweighted_means(const std::vector<ScoreRow>& rows) {
  std::map<std::tuple<std::string, bool, std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    auto& a = acc[{r.config_id, r.canonized, r.metric}];
    a.first += r.score;
    ++a.second;
  }
  std::vector<MeanRow> out;
  for (const auto& [key, a] : acc) {
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), a.first / static_cast<double>(a.second),
                   a.second});
  }
  return out;
}

void check_unique_ids(const std::vector<Sample>& dataset) {
  std::set<std::string> ids;
  for (const auto& s : dataset)
    if (!ids.insert(s.id).second) throw DatasetError("duplicate sample id '" + s.id + "'", s.id);
}

}  // namespace

MetricReport run_evaluation(const ModelGraph& graph, const std::vector<Sample>& dataset,
                            const std::vector<ExplainerSpec>& explainers, const EvalOptions& options) {
  if (explainers.empty()) throw ParameterError("no explainers requested");
  check_unique_ids(dataset);
  std::set<std::string> ids;
  std::vector<Job> jobs;
  for (const auto& e : explainers) {
    if (!ids.insert(e.id).second) throw ParameterError("explainer '" + e.id + "' listed twice");
    if (e.composite)
      for (const auto& [sel, rule] : e.composite->rules) rule.validate();
    jobs.push_back({e.id, &e});
  }
  MetricReport report;
  report.rows = run_jobs(graph, dataset, jobs, options);
  report.means = unweighted_means(report.rows);
  json fp = settings_json(options);
  for (const auto& e : explainers) {
    fp["explainers"][e.id] = {{"rules", e.describe()}, {"canonized", std::string(to_string(e.mode))}};
  }
  report.fingerprint = fp.dump();
  return report;
}

// ---------------------------------------------------------------------------
// grid search

void GridSpec::validate() const {
  if (groups.empty()) throw ParameterError("grid needs at least one group");
  if (gammas.empty()) throw ParameterError("grid needs at least one gamma value");
  std::set<std::string> seen;
  for (const auto& g : groups)
    if (!seen.insert(g).second) throw ParameterError("group '" + g + "' listed twice");
  std::set<double> vals;
  for (double v : gammas) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("gamma values must be finite and >= 0");
    if (!vals.insert(v).second) throw ParameterError("gamma " + short_real(v) + " listed twice");
  }
}

std::size_t count_configurations(const GridSpec& grid) {
  grid.validate();
  std::size_t n = grid.canonized == CanonMode::Both ? 2 : 1;
  for (std::size_t i = 0; i < grid.groups.size(); ++i) n *= grid.gammas.size();
  return n;
}

std::vector<std::map<std::string, double>> enumerate_gamma_configs(const GridSpec& grid) {
  grid.validate();
  std::vector<std::map<std::string, double>> out;
  std::vector<std::size_t> digit(grid.groups.size(), 0);
  while (true) {
    std::map<std::string, double> cfg;
    for (std::size_t g = 0; g < grid.groups.size(); ++g) cfg[grid.groups[g]] = grid.gammas[digit[g]];
    out.push_back(std::move(cfg));
    std::size_t g = grid.groups.size();
    while (g > 0 && ++digit[g - 1] == grid.gammas.size()) digit[--g] = 0;
    if (g == 0) break;
  }
  return out;
}

std::string gamma_config_id(const GridSpec& grid, const std::map<std::string, double>& config) {
  std::string id;
  for (const auto& g : grid.groups) {
    if (!id.empty()) id += ";";
    id += g + "=" + short_real(config.at(g));
  }
  return id;
}

MetricReport run_grid_search(const ModelGraph& graph, const std::vector<Sample>& dataset, const GridSpec& grid,
                             const EvalOptions& options) {
  grid.validate();
  check_unique_ids(dataset);
  std::set<std::string> present;
  for (const auto& n : graph.nodes())
    if (!n.group.empty()) present.insert(n.group);
  for (const auto& g : grid.groups) {
    if (!present.count(g)) throw ParameterError("group '" + g + "' does not occur in the model");
  }
  const auto configs = enumerate_gamma_configs(grid);
  std::vector<ExplainerSpec> specs;
  specs.reserve(configs.size());
  std::map<std::string, const std::map<std::string, double>*> by_id;
  for (const auto& c : configs) {
    Composite comp = composite_gamma(c, 0.0);
    comp.name = gamma_config_id(grid, c);
    specs.push_back(ExplainerSpec::lrp(std::move(comp), grid.canonized));
    by_id[specs.back().id] = &c;
  }
  std::vector<Job> jobs;
  for (const auto& s : specs) jobs.push_back({s.id, &s});

  MetricReport report;
  report.rows = run_jobs(graph, dataset, jobs, options);
  report.means = unweighted_means(report.rows);

  std::map<std::tuple<std::string, double, bool, std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& r : report.rows) {
    if (r.status != "ok") continue;
    for (const auto& [group, gamma] : *by_id.at(r.config_id)) {
      auto& a = acc[{group, gamma, r.canonized, r.metric}];
      a.first += r.score;
      ++a.second;
    }
  }
  for (const auto& g : grid.groups)
    for (const auto& [key, a] : acc) {
      if (std::get<0>(key) != g) continue;
      report.marginals.push_back(
          {g, std::get<1>(key), std::get<2>(key), std::get<3>(key), a.first / static_cast<double>(a.second), a.second});
    }

  json fp = settings_json(options);
  fp["grid"] = {{"groups", grid.groups},
                {"gammas", grid.gammas},
                {"canonized", std::string(to_string(grid.canonized))},
                {"configurations", count_configurations(grid)},
                {"other_layers", "gamma 0 (epsilon-equivalent); BatchNorm epsilon"}};
  report.fingerprint = fp.dump();
  return report;
}

}  // namespace canonxai
