// Python bindings. Configs cross the boundary as JSON text; the package
// wrapper converts them to and from dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <sstream>

#include "bimrl/harness.h"

namespace py = pybind11;
using namespace bimrl;
using namespace bimrl::harness;

namespace {

py::array_t<double> obs_array(const env::Observation& obs) {
  py::array_t<double> out({env::kViewSize, env::kViewSize, env::kChannels});
  std::copy(obs.values.begin(), obs.values.end(), out.mutable_data());
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c = from_json(Json::parse(text));
  validate(c);
  return c;
}

py::dict metrics_dict(const MetricsRecord& m) {
  return py::module_::import("json").attr("loads")(metrics_to_json(m, 0, 0).dump());
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["n_tasks"] = r.n_tasks;
  d["mean"] = std::vector<double>(r.mean.begin(), r.mean.end());
  d["stderr"] = std::vector<double>(r.stderr_.begin(), r.stderr_.end());
  std::vector<std::vector<double>> per_task;
  for (const auto& t : r.per_task) per_task.emplace_back(t.begin(), t.end());
  d["per_task"] = per_task;
  return d;
}

// A single task played episode by episode.
class PyEnv {
 public:
  PyEnv(const std::string& family, std::uint64_t seed, const env::FamilyParams& params)
      : task_(env::generate_task(env::family_from_string(family), seed, params)) {}

  py::array_t<double> reset(int episode) { return obs_array(env_.reset(task_, episode)); }

  py::tuple step(int action) {
    env::Transition t = env_.step(action);
    return py::make_tuple(obs_array(t.obs), t.reward, t.episode_done, t.task_done);
  }

  std::string ascii() const { return env_.ascii(); }
  int episode_horizon() const { return task_.episode_horizon; }
  int task_horizon() const { return task_.task_horizon; }
  std::pair<int, int> agent_pos() const { return {env_.agent_pos().x, env_.agent_pos().y}; }

 private:
  env::TaskSpec task_;
  env::GridEnv env_;
};

class PyTrainer {
 public:
  PyTrainer(const std::string& config_text, std::uint64_t seed)
      : config_(parse_config(config_text)), trainer_(config_.agent, config_.env, seed) {}

  py::dict iterate() {
    MetricsRecord m;
    {
      py::gil_scoped_release release;
      m = trainer_.iterate();
    }
    return metrics_dict(m);
  }
  int iteration() const { return trainer_.iteration(); }
  long long frames() const { return trainer_.frames(); }

  py::dict evaluate(int n_tasks, std::uint64_t seed) const {
    return report_dict(bimrl::evaluate(trainer_.agent(), config_.env, n_tasks, seed));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    trainer_.save_checkpoint(out, canonical_text(config_), config_hash(config_));
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    trainer_.load_checkpoint(in);
  }

 private:
  ExperimentConfig config_;
  Trainer trainer_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Core of the bimrl agent";
  m.attr("NUM_ACTIONS") = env::kNumActions;
  m.attr("EPISODES_PER_TASK") = env::kEpisodesPerTask;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<HashMismatch>(m, "HashMismatch", PyExc_ValueError);
  py::register_exception<env::ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<env::ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);

  py::class_<env::FamilyParams>(m, "FamilyParams")
      .def(py::init<>())
      .def_readwrite("room_count", &env::FamilyParams::room_count)
      .def_readwrite("max_room_size", &env::FamilyParams::max_room_size)
      .def_readwrite("row_count", &env::FamilyParams::row_count)
      .def_readwrite("room_size", &env::FamilyParams::room_size)
      .def_readwrite("episode_horizon", &env::FamilyParams::episode_horizon);

  py::class_<PyEnv>(m, "GridEnv")
      .def(py::init<const std::string&, std::uint64_t, const env::FamilyParams&>(),
           py::arg("family"), py::arg("seed"), py::arg("params") = env::FamilyParams{})
      .def("reset", &PyEnv::reset, py::arg("episode") = 0)
      .def("step", &PyEnv::step, py::arg("action"),
           "Returns (observation, reward, episode_done, task_done).")
      .def("ascii", &PyEnv::ascii)
      .def_property_readonly("episode_horizon", &PyEnv::episode_horizon)
      .def_property_readonly("task_horizon", &PyEnv::task_horizon)
      .def_property_readonly("agent_pos", &PyEnv::agent_pos);

  py::class_<PyTrainer>(m, "Trainer")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_json"), py::arg("seed"))
      .def("iterate", &PyTrainer::iterate)
      .def("evaluate", &PyTrainer::evaluate, py::arg("n_tasks"), py::arg("seed") = 0)
      .def("save", &PyTrainer::save)
      .def("load", &PyTrainer::load)
      .def_property_readonly("iteration", &PyTrainer::iteration)
      .def_property_readonly("frames", &PyTrainer::frames);

  m.def("default_config", [] { return to_json(ExperimentConfig{}).dump(); });
  m.def("normalize_config", [](const std::string& text) { return canonical_text(parse_config(text)); });
  m.def("config_hash", [](const std::string& text) {
    return hash_hex(config_hash(parse_config(text)));
  });
  m.def(
      "load_config",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return canonical_text(load_config(path, {}, overrides));
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "train",
      [](const std::string& text, const std::filesystem::path& out_root, const std::string& name) {
        TrainOptions opts;
        opts.out_root = out_root;
        opts.run_name = name;
        py::gil_scoped_release release;
        return train(parse_config(text), opts).dir;
      },
      py::arg("config_json"), py::arg("out_root"), py::arg("run_name") = "");
  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& path, int n_tasks, std::uint64_t seed) {
        return report_dict(evaluate_checkpoint(path, n_tasks, seed));
      },
      py::arg("checkpoint"), py::arg("n_tasks") = 100, py::arg("seed") = 0);
  m.def("plot_runs", &plot_runs, py::arg("run_dirs"), py::arg("out_svg"));
  m.def("ablations", [](const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, cfg] : ablations(parse_config(text))) {
      out.emplace_back(name, canonical_text(cfg));
    }
    return out;
  });
}
