#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "canonxai/attribution.hpp"
#include "canonxai/canonize.hpp"
#include "canonxai/dataset.hpp"
#include "canonxai/error.hpp"
#include "canonxai/fixtures.hpp"
#include "canonxai/graph.hpp"
#include "canonxai/harness.hpp"
#include "canonxai/metrics.hpp"

namespace py = pybind11;
using namespace canonxai;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
  py::array_t<float> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict sample_to_dict(const Sample& s) {
  py::dict d;
  d["id"] = s.id;
  d["image"] = to_array(s.image);
  d["label"] = s.label;
  d["mask"] = s.mask ? py::object(to_array(*s.mask)) : py::object(py::none());
  return d;
}

// Accepts the dicts produced above, or anything with the same keys.
std::vector<Sample> samples_from(const py::iterable& items) {
  std::vector<Sample> out;
  for (const auto& item : items) {
    const auto d = item.cast<py::dict>();
    Sample s;
    s.id = d.contains("id") ? d["id"].cast<std::string>() : "s" + std::to_string(out.size());
    s.image = to_tensor(d["image"].cast<FloatArray>());
    s.label = d["label"].cast<std::size_t>();
    if (d.contains("mask") && !d["mask"].is_none()) s.mask = to_tensor(d["mask"].cast<FloatArray>());
    out.push_back(std::move(s));
  }
  return out;
}

Composite make_composite(const std::string& name, const std::optional<std::map<std::string, double>>& gamma,
                         double gamma_default) {
  if (gamma || name == "gamma") return composite_gamma(gamma.value_or(std::map<std::string, double>{}), gamma_default);
  return builtin_composite(name);
}

EvalOptions eval_options(std::vector<std::string> metrics, std::uint64_t seed, std::size_t threads,
                         const std::string& pooling, std::size_t patch_size, std::size_t steps) {
  EvalOptions o;
  o.metrics = std::move(metrics);
  o.seed = seed;
  o.threads = threads;
  o.settings.pooling = parse_pool_method(pooling);
  o.settings.aopc.patch_size = patch_size;
  o.settings.aopc.steps = steps;
  return o;
}

const std::vector<std::string> kDefaultMetrics = {"rra", "rma", "gini"};

}  // namespace

PYBIND11_MODULE(_canonxai, m) {
  m.doc() = "BatchNorm canonization and LRP attribution for small CNN graphs";

  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  py::class_<ModelGraph>(m, "Model")
      .def_static("load", [](const std::string& manifest, std::optional<std::string> blob) {
        return load_model(manifest, blob.value_or(default_blob_path(manifest)));
      }, py::arg("manifest"), py::arg("weights") = py::none())
      .def("save", [](const ModelGraph& g, const std::string& manifest, std::optional<std::string> blob) {
        save_model_files(g, manifest, blob.value_or(default_blob_path(manifest)));
      }, py::arg("manifest"), py::arg("weights") = py::none())
      .def("forward", [](const ModelGraph& g, const FloatArray& x) { return to_array(forward(g, to_tensor(x)).output); })
      .def("canonize", [](const ModelGraph& g, std::optional<std::vector<std::string>> passes) {
        std::vector<Pass> ps = default_passes();
        if (passes) {
          ps.clear();
          for (const auto& p : *passes) {
            auto parsed = parse_pass(p);
            if (!parsed) throw ParameterError("unknown pass '" + p + "'");
            ps.push_back(*parsed);
          }
        }
        auto res = canonize_graph(g, ps);
        return py::make_tuple(std::move(res.graph), res.report.to_json());
      }, py::arg("passes") = py::none(), "Returns (canonized model, fusion report as JSON text).")
      .def_property_readonly("input_shape", [](const ModelGraph& g) { return g.input_shape(); })
      .def_property_readonly("node_ids", [](const ModelGraph& g) {
        std::vector<std::string> ids;
        for (const auto& n : g.nodes()) ids.push_back(n.id);
        return ids;
      })
      .def("count", [](const ModelGraph& g, const std::string& kind) {
        auto k = parse_layer_kind(kind);
        if (!k) throw ParameterError("unknown layer kind '" + kind + "'");
        return g.count_kind(*k);
      })
      .def("__len__", &ModelGraph::size)
      .def("__eq__", [](const ModelGraph& a, const ModelGraph& b) { return a == b; });

  m.def("fixture_names", &fixture_names);
  m.def("fixture", [](const std::string& name, std::uint64_t seed, bool bias_free) {
    auto fx = build_fixture(name, seed, {bias_free});
    py::list samples;
    for (const auto& s : fx.dataset) samples.append(sample_to_dict(s));
    return py::make_tuple(std::move(fx.graph), samples);
  }, py::arg("name"), py::arg("seed") = 7, py::arg("bias_free") = false,
        "Returns (model, samples); only corner_detector has samples.");
  m.def("load_dataset", [](const std::string& manifest) {
    py::list out;
    for (const auto& s : load_dataset(manifest)) out.append(sample_to_dict(s));
    return out;
  });

  m.def("composite_names", &builtin_composite_names);
  m.def("attribute", [](const ModelGraph& g, const FloatArray& x, std::size_t target, const std::string& composite,
                        std::optional<std::map<std::string, double>> gamma, double gamma_default) {
    const Tensor t = to_tensor(x);
    const Composite c = make_composite(composite, gamma, gamma_default);
    Tensor r;
    {
      py::gil_scoped_release nogil;
      r = attribute(g, t, target, c);
    }
    return to_array(r);
  }, py::arg("model"), py::arg("x"), py::arg("target"), py::arg("composite") = "eps-plus",
        py::arg("gamma") = py::none(), py::arg("gamma_default") = 0.0,
        "LRP relevance at the input. Passing `gamma` ({group: value}) selects the Gamma rule.");
  m.def("saliency", [](const ModelGraph& g, const FloatArray& x, std::size_t target) {
    return to_array(gradient_saliency(g, to_tensor(x), target));
  });
  m.def("pool", [](const FloatArray& r, const std::string& method) {
    return to_array(pool_channels(to_tensor(r), parse_pool_method(method)));
  }, py::arg("relevance"), py::arg("method") = "sum");
  m.def("normalize", [](const FloatArray& h) { return to_array(normalize_heatmap(to_tensor(h))); });

  m.def("rra", [](const FloatArray& h, const FloatArray& mask) { return rra(to_tensor(h), to_tensor(mask)); });
  m.def("rma", [](const FloatArray& h, const FloatArray& mask, bool raw) {
    return rma(to_tensor(h), to_tensor(mask), raw);
  }, py::arg("heatmap"), py::arg("mask"), py::arg("raw") = false);
  m.def("gini", [](const FloatArray& h) { return sparseness_gini(to_tensor(h)); });
  m.def("ssim", [](const FloatArray& a, const FloatArray& b, std::size_t window) {
    return ssim(to_tensor(a), to_tensor(b), window);
  }, py::arg("a"), py::arg("b"), py::arg("window") = 7);
  m.def("metric_names", &metric_names);

  py::class_<MetricReport>(m, "Report")
      .def_property_readonly("rows", [](const MetricReport& r) {
        py::list out;
        for (const auto& row : r.rows) {
          py::dict d;
          d["sample_id"] = row.sample_id;
          d["config_id"] = row.config_id;
          d["canonized"] = row.canonized;
          d["metric"] = row.metric;
          d["score"] = row.status == "ok" ? py::object(py::float_(row.score)) : py::object(py::none());
          d["status"] = row.status;
          d["message"] = row.message;
          d["seed"] = row.seed;
          out.append(d);
        }
        return out;
      })
      .def_property_readonly("marginals", [](const MetricReport& r) {
        py::list out;
        for (const auto& mr : r.marginals)
          out.append(py::make_tuple(mr.group, mr.gamma, mr.canonized, mr.metric, mr.mean, mr.count));
        return out;
      }, "(group, gamma, canonized, metric, mean, count) tuples")
      .def("to_csv", &MetricReport::to_csv)
      .def("marginals_csv", &MetricReport::marginals_csv)
      .def("to_json", &MetricReport::to_json)
      .def_property_readonly("error_count", &MetricReport::error_count);

  m.def("evaluate", [](const ModelGraph& g, const py::iterable& samples, const std::vector<std::string>& composites,
                       const std::string& canonized, std::vector<std::string> metrics, std::uint64_t seed,
                       std::size_t threads, const std::string& pooling, std::size_t patch_size, std::size_t steps) {
    const auto data = samples_from(samples);
    std::vector<ExplainerSpec> ex;
    for (const auto& c : composites) ex.push_back(ExplainerSpec::named(c, parse_canon_mode(canonized)));
    const auto opt = eval_options(std::move(metrics), seed, threads, pooling, patch_size, steps);
    py::gil_scoped_release nogil;
    return run_evaluation(g, data, ex, opt);
  }, py::arg("model"), py::arg("samples"), py::arg("composites") = std::vector<std::string>{"eps-plus"},
        py::arg("canonized") = "both", py::arg("metrics") = kDefaultMetrics, py::arg("seed") = 0,
        py::arg("threads") = 1, py::arg("pooling") = "sum", py::arg("patch_size") = 8, py::arg("steps") = 30);

  m.def("grid_search", [](const ModelGraph& g, const py::iterable& samples, std::vector<std::string> groups,
                          std::vector<double> gammas, const std::string& canonized, std::vector<std::string> metrics,
                          std::uint64_t seed, std::size_t threads, const std::string& pooling,
                          std::size_t patch_size, std::size_t steps) {
    const auto data = samples_from(samples);
    const GridSpec grid{std::move(groups), std::move(gammas), parse_canon_mode(canonized)};
    const auto opt = eval_options(std::move(metrics), seed, threads, pooling, patch_size, steps);
    py::gil_scoped_release nogil;
    return run_grid_search(g, data, grid, opt);
  }, py::arg("model"), py::arg("samples"), py::arg("groups"),
        py::arg("gammas") = std::vector<double>{0, 0.1, 0.25, 0.5, 1, 10}, py::arg("canonized") = "both",
        py::arg("metrics") = kDefaultMetrics, py::arg("seed") = 0, py::arg("threads") = 1,
        py::arg("pooling") = "sum", py::arg("patch_size") = 8, py::arg("steps") = 30);

  m.def("count_configurations", [](std::vector<std::string> groups, std::vector<double> gammas,
                                   const std::string& canonized) {
    return count_configurations({std::move(groups), std::move(gammas), parse_canon_mode(canonized)});
  }, py::arg("groups"), py::arg("gammas"), py::arg("canonized") = "both");
}
