// canonxai command line: canonize, explain, evaluate, grid-search, fixtures.
// Exit status: 0 ok, 1 operational failure, 2 usage error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "canonxai/canonize.hpp"
#include "canonxai/dataset.hpp"
#include "canonxai/fixtures.hpp"
#include "canonxai/harness.hpp"
#include "canonxai/rng.hpp"

namespace fs = std::filesystem;
using namespace canonxai;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

double parse_real(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("bad number '" + s + "' in " + what);
}

/// "low=0.25,mid=0"
std::map<std::string, double> parse_gamma_spec(const std::string& text) {
  std::map<std::string, double> out;
  for (const auto& item : split(text, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("gamma spec entries look like group=value, got '" + item + "'");
    const double v = parse_real(item.substr(eq + 1), "--gamma-spec");
    if (v < 0) throw UsageError("gamma must be >= 0");
    out[item.substr(0, eq)] = v;
  }
  return out;
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw Error("failed writing '" + path + "'");
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

/// Refuses to write over any of the inputs.
void guard_outputs(const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  for (const auto& o : outputs) {
    if (!fs::exists(o)) continue;
    for (const auto& i : inputs)
      if (fs::exists(i) && fs::equivalent(i, o)) throw UsageError("output '" + o + "' would overwrite input '" + i + "'");
  }
}

struct ModelArgs {
  std::string model;
  std::string weights;

  void add(CLI::App* app) {
    app->add_option("--model", model, "model manifest (.json)")->required()->check(CLI::ExistingFile);
    app->add_option("--weights", weights, "weight blob (default: manifest with .bin)");
  }
  std::string blob() const { return weights.empty() ? default_blob_path(model) : weights; }
  ModelGraph load() const { return load_model(model, blob()); }
  std::vector<std::string> inputs() const { return {model, blob()}; }
};

// ---------------------------------------------------------------------------

struct CanonizeArgs {
  ModelArgs model;
  std::string out_prefix;
  std::string passes;
  std::size_t verify = 0;
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
};

std::vector<Pass> parse_passes(const std::string& text) {
  if (text.empty()) return default_passes();
  std::vector<Pass> out;
  for (const auto& name : split(text, ',')) {
    const auto p = parse_pass(name);
    if (!p) throw UsageError("unknown pass '" + name + "'");
    out.push_back(*p);
  }
  return out;
}

int run_canonize(const CanonizeArgs& a) {
  const auto passes = parse_passes(a.passes);
  const std::string manifest = a.out_prefix + ".json", blob = a.out_prefix + ".bin",
                    report_path = a.out_prefix + ".report.json";
  guard_outputs(a.model.inputs(), {manifest, blob, report_path});
  const ModelGraph g = a.model.load();
  const auto res = canonize_graph(g, passes);
  ensure_parent(manifest);
  save_model_files(res.graph, manifest, blob);
  write_file(report_path, res.report.to_json() + "\n");
  std::printf("removed %zu BatchNorm node(s), %zu left; report in %s\n", res.report.fusions.size(),
              res.report.unmatched.size(), report_path.c_str());
  for (const auto& u : res.report.unmatched) std::printf("  kept %s: %s\n", u.bn_id.c_str(), u.reason.c_str());

  if (a.verify > 0) {
    Rng rng(a.seed);
    double worst = 0.0;
    std::size_t worst_elem = 0;
    for (std::size_t i = 0; i < a.verify; ++i) {
      Tensor x(g.input_shape());
      for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
      const auto y0 = forward(g, x).output, y1 = forward(res.graph, x).output;
      for (std::size_t k = 0; k < y0.numel(); ++k) {
        const double dev = std::abs(double(y0[k]) - y1[k]) / (1.0 + std::abs(double(y0[k])));
        if (dev > worst) worst = dev, worst_elem = k;
      }
    }
    if (worst > a.tolerance) {
      std::fprintf(stderr, "verification failed: max deviation %.3g at output node '%s' element %zu (tolerance %.3g)\n",
                   worst, res.graph.output_id().c_str(), worst_elem, a.tolerance);
      return kFailure;
    }
    std::printf("verified %zu random inputs: max deviation %.3g\n", a.verify, worst);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ExplainArgs {
  ModelArgs model;
  std::string input;
  std::size_t target = 0;
  std::string composite = "eps-plus";
  std::string gamma_spec;
  double gamma_default = 0.0;
  std::string pooling = "sum";
  bool normalize = false;
  bool canonize = false;
  std::string out;
};

std::vector<std::string> explainer_names() {
  auto names = builtin_composite_names();
  names.push_back("saliency");
  names.push_back("gamma");
  return names;
}

int run_explain(const ExplainArgs& a) {
  guard_outputs(a.model.inputs(), {a.out});
  guard_outputs({a.input}, {a.out});
  ModelGraph g = a.model.load();
  if (a.canonize) g = canonize_graph(g).graph;
  const Tensor x = load_tensor_file(a.input);
  Tensor r;
  if (a.composite == "saliency") {
    r = gradient_saliency(g, x, a.target);
  } else if (a.composite == "gamma") {
    r = attribute(g, x, a.target, composite_gamma(parse_gamma_spec(a.gamma_spec), a.gamma_default));
  } else {
    r = attribute(g, x, a.target, builtin_composite(a.composite));
  }
  Tensor h = a.pooling == "none" ? r : pool_channels(r, parse_pool_method(a.pooling));
  if (a.normalize) h = normalize_heatmap(h);
  ensure_parent(a.out);
  save_tensor_file(a.out, h);
  std::printf("wrote %s heatmap %s to %s\n", a.composite.c_str(), shape_to_string(h.shape()).c_str(), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct MetricArgs {
  std::string metrics = "rra,rma,gini";
  std::string pooling = "sum";
  std::size_t patch = 8;
  std::size_t steps = 30;
  std::string baseline = "blur";
  double sigma = 5.0;
  std::size_t kernel = 15;
  double radius = -1.0;
  std::size_t sens_samples = 10;
  double faith_fraction = 0.1;
  std::size_t faith_iterations = 20;
  double faith_baseline = 0.0;
  bool rma_raw = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void add(CLI::App* app) {
    app->add_option("--metrics", metrics, "comma list of " + join(metric_names()))->capture_default_str();
    app->add_option("--pooling", pooling)->check(CLI::IsMember({"sum", "pos-l2-norm-sq", "max-norm"}))->capture_default_str();
    app->add_option("--patch-size", patch, "AOPC patch edge")->capture_default_str();
    app->add_option("--steps", steps, "AOPC perturbation steps")->capture_default_str();
    app->add_option("--baseline", baseline, "AOPC baseline")->check(CLI::IsMember({"blur", "black", "mean"}))->capture_default_str();
    app->add_option("--blur-sigma", sigma)->capture_default_str();
    app->add_option("--blur-kernel", kernel)->capture_default_str();
    app->add_option("--sensitivity-radius", radius, "L-inf radius (default 0.1 * input range)");
    app->add_option("--sensitivity-samples", sens_samples)->capture_default_str();
    app->add_option("--faith-fraction", faith_fraction)->capture_default_str();
    app->add_option("--faith-iterations", faith_iterations)->capture_default_str();
    app->add_option("--faith-baseline", faith_baseline)->capture_default_str();
    app->add_flag("--rma-raw", rma_raw, "signed RMA instead of the positive part");
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--threads", threads, "worker threads, 0 = all cores")->capture_default_str();
  }

  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
  }

  EvalOptions options() const {
    EvalOptions o;
    o.metrics = split(metrics, ',');
    for (const auto& m : o.metrics)
      if (std::find(metric_names().begin(), metric_names().end(), m) == metric_names().end())
        throw UsageError("unknown metric '" + m + "'");
    o.seed = seed;
    o.threads = threads;
    auto& s = o.settings;
    s.pooling = parse_pool_method(pooling);
    s.aopc.patch_size = patch;
    s.aopc.steps = steps;
    s.aopc.baseline = baseline == "black" ? Baseline::black() : baseline == "mean" ? Baseline::mean()
                                                                                : Baseline::blur(sigma, kernel);
    if (radius >= 0) s.sensitivity.radius = radius;
    s.sensitivity.samples = sens_samples;
    s.faithfulness.subset_fraction = faith_fraction;
    s.faithfulness.iterations = faith_iterations;
    s.faithfulness.baseline = faith_baseline;
    s.rma_raw = rma_raw;
    try {
      s.aopc.validate();
      s.faithfulness.validate();
      if (s.aopc.baseline.kind == Baseline::Kind::GaussianBlur && kernel % 2 == 0)
        throw ParameterError("blur kernel must be odd");
      if (sens_samples == 0) throw ParameterError("sensitivity needs at least one sample");
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
    return o;
  }
};

struct EvaluateArgs {
  ModelArgs model;
  std::string dataset;
  std::string composites = "eps-plus";
  std::string canonized = "both";
  MetricArgs metrics;
  std::string out;
};

void write_report(const MetricReport& rep, const std::string& prefix, bool marginals) {
  write_file(prefix + ".csv", rep.to_csv());
  write_file(prefix + ".json", rep.to_json());
  if (marginals) write_file(prefix + ".marginals.csv", rep.marginals_csv());
}

int report_status(const MetricReport& rep, const std::string& prefix) {
  std::printf("%zu rows (%zu errors) written to %s.csv\n", rep.rows.size(), rep.error_count(), prefix.c_str());
  return kOk;
}

int run_evaluate(const EvaluateArgs& a) {
  const auto opts = a.metrics.options();
  const CanonMode mode = parse_canon_mode(a.canonized);
  std::vector<ExplainerSpec> ex;
  for (const auto& name : split(a.composites, ',')) {
    const auto names = explainer_names();
    if (name == "gamma" || std::find(names.begin(), names.end(), name) == names.end())
      throw UsageError("unknown composite '" + name + "' (use grid-search for gamma)");
    ex.push_back(ExplainerSpec::named(name, mode));
  }
  if (ex.empty()) throw UsageError("no composites given");
  auto inputs = a.model.inputs();
  inputs.push_back(a.dataset);
  guard_outputs(inputs, {a.out + ".csv", a.out + ".json"});
  const auto graph = a.model.load();
  const auto data = load_dataset(a.dataset);
  const auto rep = run_evaluation(graph, data, ex, opts);
  write_report(rep, a.out, false);
  return report_status(rep, a.out);
}

struct GridArgs {
  ModelArgs model;
  std::string dataset;
  std::string gammas = "0,0.1,0.25,0.5,1,10";
  std::string groups;
  std::string canonized = "both";
  bool count_only = false;
  MetricArgs metrics;
  std::string out;
};

int run_grid(const GridArgs& a) {
  GridSpec grid;
  grid.groups = split(a.groups, ',');
  for (const auto& g : split(a.gammas, ',')) grid.gammas.push_back(parse_real(g, "--gammas"));
  grid.canonized = parse_canon_mode(a.canonized);
  try {
    grid.validate();
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }
  if (a.count_only) {
    std::printf("%zu\n", count_configurations(grid));
    return kOk;
  }
  if (a.dataset.empty() || a.out.empty()) throw UsageError("--dataset and --out are required unless --count-only");
  const auto opts = a.metrics.options();
  auto inputs = a.model.inputs();
  inputs.push_back(a.dataset);
  guard_outputs(inputs, {a.out + ".csv", a.out + ".json", a.out + ".marginals.csv"});
  const auto graph = a.model.load();
  const auto data = load_dataset(a.dataset);
  const auto rep = run_grid_search(graph, data, grid, opts);
  write_report(rep, a.out, true);
  std::printf("%zu configurations\n", count_configurations(grid));
  return report_status(rep, a.out);
}

// ---------------------------------------------------------------------------

struct FixtureArgs {
  std::string name;
  std::uint64_t seed = 7;
  std::string out_prefix;
  bool bias_free = false;
};

void write_fixture(const std::string& name, std::uint64_t seed, bool bias_free, const std::string& prefix) {
  const auto fx = build_fixture(name, seed, {bias_free});
  ensure_parent(prefix + ".json");
  save_model_files(fx.graph, prefix + ".json", prefix + ".bin");
  std::printf("wrote %s.json / %s.bin\n", prefix.c_str(), prefix.c_str());
  if (!fx.dataset.empty()) {
    const std::string dir = prefix + "_data";
    fs::create_directories(dir);
    save_dataset(dir + "/manifest.json", fx.dataset);
    std::printf("wrote %zu samples to %s/manifest.json\n", fx.dataset.size(), dir.c_str());
  }
}

int run_fixtures(const FixtureArgs& a) {
  if (a.name == "all") {
    for (const auto& n : fixture_names()) write_fixture(n, a.seed, a.bias_free, a.out_prefix + n);
    return kOk;
  }
  const auto names = fixture_names();
  if (std::find(names.begin(), names.end(), a.name) == names.end()) throw UsageError("unknown fixture '" + a.name + "'");
  write_fixture(a.name, a.seed, a.bias_free, a.out_prefix);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"canonxai: BatchNorm canonization, LRP attribution and heatmap metrics"};
  app.require_subcommand(1);

  CanonizeArgs ca;
  auto* canon = app.add_subcommand("canonize", "rewrite a model into BatchNorm-free form");
  ca.model.add(canon);
  canon->add_option("--out-prefix", ca.out_prefix, "writes <prefix>.json, .bin, .report.json")->required();
  canon->add_option("--passes", ca.passes, "comma list; default linear-bn,bn-linear,bn-relu-linear,bn-relu-pool-linear,bn-concat-linear");
  canon->add_option("--verify", ca.verify, "compare outputs on N random inputs");
  canon->add_option("--seed", ca.seed, "seed for --verify inputs");
  canon->add_option("--tolerance", ca.tolerance, "max |dy|/(1+|y|)")->capture_default_str();

  ExplainArgs ea;
  auto* expl = app.add_subcommand("explain", "write an attribution heatmap");
  ea.model.add(expl);
  expl->add_option("--input", ea.input, "input tensor file")->required()->check(CLI::ExistingFile);
  expl->add_option("--target", ea.target, "class index")->required();
  expl->add_option("--composite", ea.composite)->check(CLI::IsMember(explainer_names()))->capture_default_str();
  expl->add_option("--gamma-spec", ea.gamma_spec, "group=value,... for --composite gamma");
  expl->add_option("--gamma-default", ea.gamma_default, "gamma for unlisted layers")->capture_default_str();
  expl->add_option("--pooling", ea.pooling)
      ->check(CLI::IsMember({"sum", "pos-l2-norm-sq", "max-norm", "none"}))
      ->capture_default_str();
  expl->add_flag("--normalize", ea.normalize, "divide by sqrt(mean(h^2))");
  expl->add_flag("--canonize", ea.canonize, "explain the canonized model");
  expl->add_option("--out", ea.out, "heatmap tensor file")->required();

  EvaluateArgs va;
  auto* eval = app.add_subcommand("evaluate", "score heatmaps over a dataset");
  va.model.add(eval);
  eval->add_option("--dataset", va.dataset, "dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--composites", va.composites, "comma list of eps-plus,a2b1,custom,eb,epsilon,saliency")
      ->capture_default_str();
  eval->add_option("--canonized", va.canonized)->check(CLI::IsMember({"no", "yes", "both"}))->capture_default_str();
  va.metrics.add(eval);
  eval->add_option("--out", va.out, "writes <out>.csv and <out>.json")->required();

  GridArgs ga;
  auto* grid = app.add_subcommand("grid-search", "per-group gamma grid search");
  ga.model.add(grid);
  grid->add_option("--dataset", ga.dataset, "dataset manifest")->check(CLI::ExistingFile);
  grid->add_option("--gammas", ga.gammas)->capture_default_str();
  grid->add_option("--groups", ga.groups, "comma list of layer group tags")->required();
  grid->add_option("--canonized", ga.canonized)->check(CLI::IsMember({"no", "yes", "both"}))->capture_default_str();
  grid->add_flag("--count-only", ga.count_only, "print the number of configurations and exit");
  ga.metrics.add(grid);
  grid->add_option("--out", ga.out, "writes <out>.csv, <out>.json, <out>.marginals.csv");

  FixtureArgs fa;
  auto* fix = app.add_subcommand("fixtures", "materialize a built-in fixture");
  fix->add_option("--name", fa.name, "fixture name or 'all'")->required();
  fix->add_option("--seed", fa.seed)->capture_default_str();
  fix->add_option("--out-prefix", fa.out_prefix, "writes <prefix>.json/.bin (+ <prefix>_data/)")->required();
  fix->add_flag("--bias-free", fa.bias_free, "zero biases, pure-scaling BatchNorm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*canon) return run_canonize(ca);
    if (*expl) return run_explain(ea);
    if (*eval) return run_evaluate(va);
    if (*grid) return run_grid(ga);
    if (*fix) return run_fixtures(fa);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\nRun with --help for usage.\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
