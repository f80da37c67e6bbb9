#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "treediff/harness/harness.hpp"

namespace py = pybind11;
using namespace treediff;
namespace th = treediff::harness;

namespace {

// Configs cross the boundary as JSON text; the Python side wraps them in json.loads.
th::ExperimentConfig parse_config(const std::string& text) {
  return text.empty() ? th::ExperimentConfig{}
                      : th::config_from_json(nlohmann::json::parse(text));
}

py::dict sample_dict(const th::Sample& s) {
  py::dict d;
  d["seed"] = s.seed;
  d["graph"] = graph::to_json(s.graph).dump();
  d["reward"] = s.reward;
  d["valid"] = s.valid;
  d["latent_steps"] = s.counters.latent_steps;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Tree-search latent graph diffusion core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<graph::Graph>(m, "Graph")
      .def(py::init<std::size_t, std::vector<int>>(), py::arg("n"),
           py::arg("labels") = std::vector<int>{})
      .def_property_readonly("n", &graph::Graph::n)
      .def_property_readonly("labels", &graph::Graph::node_labels)
      .def("edge", &graph::Graph::edge)
      .def("set_edge", &graph::Graph::set_edge)
      .def("set_label", &graph::Graph::set_label)
      .def("edge_count", &graph::Graph::edge_count)
      .def("weighted_degrees", &graph::Graph::weighted_degrees)
      .def("to_json", [](const graph::Graph& g) { return graph::to_json(g).dump(); })
      .def_static("from_json",
                  [](const std::string& s) { return graph::graph_from_json(nlohmann::json::parse(s)); })
      .def(py::self == py::self);

  m.def("is_valid", [](const graph::Graph& g) { return graph::is_valid(g); });
  m.def("reward", [](const graph::Graph& g) { return graph::reward(g); });
  m.def("triangle_count", &graph::triangle_count);
  m.def("sample_dataset", [](std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return graph::sample_dataset(count, graph::ValidityRule{}, rng);
  });

  m.def(
      "schedule",
      [](std::size_t T, const std::string& kind) {
        const auto s = diffusion::make_schedule(T, diffusion::schedule_kind_from_string(kind));
        py::dict d;
        d["beta"] = s.beta;
        d["alpha_bar"] = s.alpha_bar;
        d["beta_tilde"] = s.beta_tilde;
        return d;
      },
      py::arg("T"), py::arg("kind") = "linear");

  m.def("spearman", &verifier::spearman);
  m.def("sample_step_length", [](std::size_t t, std::size_t d_rem, double sigma_k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return search::sample_step_length(t, d_rem, sigma_k, rng);
  });

  m.def("default_config", [] { return th::to_json(th::ExperimentConfig{}).dump(); });
  m.def("check_config", [](const std::string& text) { return th::to_json(parse_config(text)).dump(); });
  m.def("gradcheck", [](std::uint64_t seed) {
    py::list out;
    for (const auto& r : th::gradcheck_all(seed)) out.append(py::make_tuple(r.loss, r.parameters, r.max_rel_error));
    return out;
  }, py::arg("seed") = 0);

  py::class_<th::Pipeline>(m, "Pipeline")
      .def_static("train", [](const std::string& text) {
        py::gil_scoped_release release;
        return th::pipeline_train(parse_config(text));
      })
      .def_static("load", [](const std::string& text) { return th::load_pipeline(parse_config(text)); })
      .def("sample",
           [](const th::Pipeline& p, const std::string& method, std::size_t budget, std::size_t count,
              std::uint64_t seed) {
             th::RunRecord r;
             {
               py::gil_scoped_release release;
               r = th::run_method(p, method, budget, count, seed);
               th::summarize(r, p.heldout, p.cfg.bench.mmd_bandwidth, p.cfg.bench.charges);
             }
             py::dict d;
             d["csv"] = th::csv_row(r);
             d["mean_reward"] = r.mean_reward;
             d["validity_rate"] = r.validity_rate;
             d["audited_nfe"] = r.audited_nfe;
             py::list samples;
             for (const auto& s : r.samples) samples.append(sample_dict(s));
             d["samples"] = samples;
             return d;
           },
           py::arg("method"), py::arg("budget") = 1, py::arg("count") = 1, py::arg("seed") = 0);

  m.attr("CSV_HEADER") = th::kCsvHeader;
}
