#include "bimrl/harness.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "bimrl/binio.h"

namespace bimrl::harness {

namespace fs = std::filesystem;

namespace {

// Calls f(section, key, field) for every config field. The same table drives
// serialization, parsing and the unknown-key check.
template <typename Config, typename F>
void visit(Config& c, F&& f) {
  auto& e = c.env;
  f("env", "family", e.family);
  f("env", "room_count", e.params.room_count);
  f("env", "max_room_size", e.params.max_room_size);
  f("env", "row_count", e.params.row_count);
  f("env", "room_size", e.params.room_size);
  f("env", "episode_horizon", e.params.episode_horizon);

  auto& m = c.agent.model;
  f("model", "obs_embed", m.obs_embed);
  f("model", "conv_channels", m.conv_channels);
  f("model", "latent", m.latent);
  f("model", "encoder_hidden", m.encoder_hidden);
  f("model", "h1", m.h1);
  f("model", "h2", m.h2);
  f("model", "h3", m.h3);
  f("model", "action_agg", m.action_agg);
  f("model", "state_agg", m.state_agg);
  f("model", "decoder_hidden", m.decoder_hidden);
  f("model", "value_hidden", m.value_hidden);
  f("model", "head_hidden", m.head_hidden);
  f("model", "memory_heads", m.memory_heads);
  f("model", "memory_head_dim", m.memory_head_dim);
  f("model", "combine_dim", m.combine_dim);
  f("model", "n", m.n);
  f("model", "planner_n", m.planner_n);
  f("model", "persist_h3", m.persist_h3);

  auto& mem = c.agent.memory;
  f("memory", "enabled", mem.enabled);
  f("memory", "capacity", mem.capacity);
  f("memory", "top_fraction", mem.top_fraction);
  f("memory", "gamma_plus", mem.gamma_plus);
  f("memory", "gamma_minus", mem.gamma_minus);
  f("memory", "w_max", mem.w_max);

  auto& cu = c.agent.curiosity;
  f("curiosity", "enabled", cu.enabled);
  f("curiosity", "beta", cu.beta);
  f("curiosity", "knn_k", cu.knn_k);
  f("curiosity", "alpha_default", cu.alpha_default);
  f("curiosity", "weight_state", cu.weights.state);
  f("curiosity", "weight_action", cu.weights.action);
  f("curiosity", "weight_reward", cu.weights.reward);

  auto& l = c.agent.loss;
  f("loss", "gamma", l.gamma);
  f("loss", "gae_lambda", l.gae_lambda);
  f("loss", "clip", l.clip);
  f("loss", "c_value", l.c_value);
  f("loss", "c_ent", l.c_ent);
  f("loss", "c_elbo", l.c_elbo);
  f("loss", "kl_weight", l.kl_weight);
  f("loss", "c_plan", l.c_plan);
  f("loss", "td_k", l.td_k);
  f("loss", "planner_intrinsic", l.planner_intrinsic);
  f("loss", "elbo_embed_grad", l.elbo_embed_grad);
  f("loss", "elbo_stride", l.elbo_stride);
  f("loss", "stale_ratio_bound", l.stale_ratio_bound);

  auto& o = c.agent.optim;
  f("optim", "lr", o.lr);
  f("optim", "adam_eps", o.adam_eps);
  f("optim", "max_grad_norm", o.max_grad_norm);
  f("optim", "epochs", o.epochs);
  f("optim", "num_minibatches", o.num_minibatches);
  f("optim", "tasks_per_batch", o.tasks_per_batch);

  auto& r = c.run;
  f("run", "seeds", r.seeds);
  f("run", "frame_budget", r.frame_budget);
  f("run", "checkpoint_every", r.checkpoint_every);
  f("run", "eval_every", r.eval_every);
  f("run", "eval_tasks", r.eval_tasks);
  f("run", "parallel", r.parallel);
}

std::string path_of(const char* section, const char* key) {
  return std::string(section) + "." + key;
}

struct Writer {
  Json& out;
  template <typename T>
  void operator()(const char* section, const char* key, const T& v) {
    if constexpr (std::is_same_v<T, env::Family>) {
      out[section][key] = env::to_string(v);
    } else {
      out[section][key] = v;
    }
  }
};

struct Reader {
  const Json& in;
  std::set<std::string> known;

  template <typename T>
  void operator()(const char* section, const char* key, T& v) {
    const std::string field = path_of(section, key);
    known.insert(field);
    if (!in.contains(section)) return;
    const Json& s = in.at(section);
    if (!s.is_object()) throw ConfigError(section, "must be an object");
    if (!s.contains(key)) return;
    const Json& j = s.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError(field, "expected true or false");
      v = j.get<bool>();
    } else if constexpr (std::is_same_v<T, int> || std::is_same_v<T, long long>) {
      if (!j.is_number_integer()) throw ConfigError(field, "expected an integer");
      const auto x = j.get<long long>();
      if constexpr (std::is_same_v<T, int>) {
        if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
          throw ConfigError(field, "integer out of range");
        }
      }
      v = static_cast<T>(x);
    } else if constexpr (std::is_same_v<T, double>) {
      if (!j.is_number()) throw ConfigError(field, "expected a number");
      v = j.get<double>();
    } else if constexpr (std::is_same_v<T, env::Family>) {
      if (!j.is_string()) throw ConfigError(field, "expected a family name");
      try {
        v = env::family_from_string(j.get<std::string>());
      } catch (const env::ParameterError& e) {
        throw ConfigError(field, e.what());
      }
    } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
      if (!j.is_array()) throw ConfigError(field, "expected a list of seeds");
      v.clear();
      for (const Json& x : j) {
        if (!x.is_number_unsigned() && !(x.is_number_integer() && x.get<long long>() >= 0)) {
          throw ConfigError(field, "seeds must be non-negative integers");
        }
        v.push_back(x.get<std::uint64_t>());
      }
    }
  }
};

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

}  // namespace

Json to_json(const ExperimentConfig& config) {
  Json j = Json::object();
  Writer w{j};
  visit(config, w);
  return j;
}

ExperimentConfig from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  ExperimentConfig c;
  Reader r{j, {}};
  visit(c, r);
  std::set<std::string> sections;
  for (const std::string& f : r.known) sections.insert(f.substr(0, f.find('.')));
  for (const auto& [section, body] : j.items()) {
    if (!sections.count(section)) throw ConfigError(section, "unknown section");
    for (const auto& [key, _] : body.items()) {
      if (!r.known.count(section + "." + key)) {
        throw ConfigError(section + "." + key, "unknown key");
      }
    }
  }
  return c;
}

void validate(const ExperimentConfig& c) {
  try {
    env::generate_task(c.env.family, 0, c.env.params);
  } catch (const env::ParameterError& e) {
    throw ConfigError("env." + e.field(), e.what());
  }
  const ModelConfig& m = c.agent.model;
  const std::pair<const char*, int> dims[] = {
      {"obs_embed", m.obs_embed},         {"conv_channels", m.conv_channels},
      {"latent", m.latent},               {"encoder_hidden", m.encoder_hidden},
      {"h1", m.h1},                       {"h2", m.h2},
      {"h3", m.h3},                       {"action_agg", m.action_agg},
      {"state_agg", m.state_agg},         {"decoder_hidden", m.decoder_hidden},
      {"value_hidden", m.value_hidden},   {"head_hidden", m.head_hidden},
      {"memory_heads", m.memory_heads},   {"memory_head_dim", m.memory_head_dim},
      {"combine_dim", m.combine_dim}};
  for (const auto& [name, v] : dims) require(v > 0, path_of("model", name), "must be positive");
  require(m.n >= 0, "model.n", "must be >= 0");
  require(m.planner_n >= 0, "model.planner_n", "must be >= 0");

  const MemoryConfig& mem = c.agent.memory;
  require(mem.capacity >= 1, "memory.capacity", "must be >= 1");
  require(mem.top_fraction >= 0.0 && mem.top_fraction <= 1.0, "memory.top_fraction",
          "must lie in [0, 1]");
  require(mem.gamma_plus > 0.0, "memory.gamma_plus", "must be positive");
  require(mem.gamma_minus > 0.0, "memory.gamma_minus", "must be positive");
  require(mem.w_max > 0.0, "memory.w_max", "must be positive");

  const CuriosityConfig& cu = c.agent.curiosity;
  require(cu.beta >= 0.0, "curiosity.beta", "must be >= 0");
  require(cu.knn_k >= 1, "curiosity.knn_k", "must be >= 1");
  require(cu.alpha_default >= 0.0, "curiosity.alpha_default", "must be >= 0");
  for (auto [name, v] : {std::pair{"weight_state", cu.weights.state},
                         std::pair{"weight_action", cu.weights.action},
                         std::pair{"weight_reward", cu.weights.reward}}) {
    require(v >= 0.0, path_of("curiosity", name), "must be >= 0");
  }

  const LossConfig& l = c.agent.loss;
  require(l.gamma >= 0.0 && l.gamma <= 1.0, "loss.gamma", "must lie in [0, 1]");
  require(l.gae_lambda >= 0.0 && l.gae_lambda <= 1.0, "loss.gae_lambda", "must lie in [0, 1]");
  require(l.clip > 0.0, "loss.clip", "must be positive");
  for (auto [name, v] : {std::pair{"c_value", l.c_value}, std::pair{"c_ent", l.c_ent},
                         std::pair{"c_elbo", l.c_elbo}, std::pair{"kl_weight", l.kl_weight},
                         std::pair{"c_plan", l.c_plan}}) {
    require(v >= 0.0, path_of("loss", name), "must be >= 0");
  }
  require(l.td_k >= 1, "loss.td_k", "must be >= 1");
  require(l.elbo_stride >= 1, "loss.elbo_stride", "must be >= 1");
  require(l.stale_ratio_bound > 1.0, "loss.stale_ratio_bound", "must exceed 1");

  const OptimConfig& o = c.agent.optim;
  require(o.lr > 0.0, "optim.lr", "must be positive");
  require(o.adam_eps > 0.0, "optim.adam_eps", "must be positive");
  require(o.max_grad_norm > 0.0, "optim.max_grad_norm", "must be positive");
  require(o.epochs >= 1, "optim.epochs", "must be >= 1");
  require(o.num_minibatches >= 1, "optim.num_minibatches", "must be >= 1");
  require(o.tasks_per_batch >= 1, "optim.tasks_per_batch", "must be >= 1");

  const RunConfig& r = c.run;
  require(!r.seeds.empty(), "run.seeds", "needs at least one seed");
  require(std::set<std::uint64_t>(r.seeds.begin(), r.seeds.end()).size() == r.seeds.size(),
          "run.seeds", "seeds must be distinct");
  require(r.frame_budget > 0, "run.frame_budget", "must be positive");
  require(r.checkpoint_every >= 1, "run.checkpoint_every", "must be >= 1");
  require(r.eval_every >= 0, "run.eval_every", "must be >= 0");
  require(r.eval_tasks >= 0, "run.eval_tasks", "must be >= 0");
}

std::string canonical_text(const ExperimentConfig& config) { return to_json(config).dump(); }

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  return fnv1a64(canonical_text(config));
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like section.field=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  const auto dot = path.find('.');
  if (dot == std::string::npos || path.find('.', dot + 1) != std::string::npos) {
    throw ConfigError(path, "override key must be section.field");
  }
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[path.substr(0, dot)][path.substr(dot + 1)] = std::move(value);
}

std::vector<std::string> env_overrides(char** envp) {
  std::vector<std::string> out;
  if (!envp) return out;
  constexpr std::string_view kPrefix = "BIMRL_";
  for (char** e = envp; *e; ++e) {
    std::string entry = *e;
    if (entry.rfind(kPrefix, 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string name = entry.substr(kPrefix.size(), eq - kPrefix.size());
    const auto sep = name.find("__");
    if (sep == std::string::npos) {
      throw ConfigError(entry.substr(0, eq), "environment override must be BIMRL_SECTION__FIELD");
    }
    std::string path = name.substr(0, sep) + "." + name.substr(sep + 2);
    std::transform(path.begin(), path.end(), path.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    out.push_back(path + "=" + entry.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& env_assignments,
                             const std::vector<std::string>& cli_assignments) {
  std::ifstream in(path);
  if (!in) {
    throw fs::filesystem_error("cannot open config", path,
                               std::make_error_code(std::errc::no_such_file_or_directory));
  }
  Json j = Json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
  for (const std::string& a : env_assignments) apply_override(j, a);
  for (const std::string& a : cli_assignments) apply_override(j, a);
  ExperimentConfig c = from_json(j);
  validate(c);
  return c;
}

nlohmann::ordered_json metrics_to_json(const MetricsRecord& m, std::uint64_t seed,
                                        std::uint64_t hash) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["config_hash"] = hash_hex(hash);
  j["seed"] = seed;
  j["iteration"] = m.iteration;
  j["frames"] = m.frames;
  j["return_by_episode"] = m.return_by_episode;
  j["success_by_episode"] = m.success_by_episode;
  j["policy_loss"] = m.policy_loss;
  j["value_loss"] = m.value_loss;
  j["entropy"] = m.entropy;
  j["recon_state"] = m.recon_state;
  j["recon_reward"] = m.recon_reward;
  j["recon_action"] = m.recon_action;
  j["recon_initial"] = m.recon_initial;
  j["kl"] = m.kl;
  j["planner_loss"] = m.planner_loss;
  j["intrinsic_mean"] = m.intrinsic_mean;
  j["intrinsic_max"] = m.intrinsic_max;
  j["alpha_mean"] = m.alpha_mean;
  j["grad_norm"] = m.grad_norm;
  j["updates"] = m.updates;
  j["updates_stopped"] = m.updates_stopped;
  j["logp_diff_epoch0"] = m.logp_diff_epoch0;
  j["mean_ratio"] = m.mean_ratio;
  j["clip_fraction"] = m.clip_fraction;
  j["gamma_plus"] = m.gamma_plus;
  j["gamma_minus"] = m.gamma_minus;
  j["w_max"] = m.w_max;
  j["wall_clock"] = m.wall_clock;
  return j;
}

MetricsRecord metrics_from_json(const Json& j) {
  MetricsRecord m;
  m.iteration = j.at("iteration").get<int>();
  m.frames = j.at("frames").get<long long>();
  m.return_by_episode = j.at("return_by_episode").get<decltype(m.return_by_episode)>();
  m.success_by_episode = j.at("success_by_episode").get<decltype(m.success_by_episode)>();
  auto num = [&](const char* key, double& v) {
    if (j.contains(key)) v = j.at(key).get<double>();
  };
  num("policy_loss", m.policy_loss);
  num("value_loss", m.value_loss);
  num("entropy", m.entropy);
  num("recon_state", m.recon_state);
  num("recon_reward", m.recon_reward);
  num("recon_action", m.recon_action);
  num("recon_initial", m.recon_initial);
  num("kl", m.kl);
  num("planner_loss", m.planner_loss);
  num("intrinsic_mean", m.intrinsic_mean);
  num("intrinsic_max", m.intrinsic_max);
  num("alpha_mean", m.alpha_mean);
  num("grad_norm", m.grad_norm);
  if (j.contains("updates")) m.updates = j["updates"].get<int>();
  if (j.contains("updates_stopped")) m.updates_stopped = j["updates_stopped"].get<bool>();
  num("logp_diff_epoch0", m.logp_diff_epoch0);
  num("mean_ratio", m.mean_ratio);
  num("clip_fraction", m.clip_fraction);
  num("gamma_plus", m.gamma_plus);
  num("gamma_minus", m.gamma_minus);
  num("w_max", m.w_max);
  num("wall_clock", m.wall_clock);
  return m;
}

std::vector<MetricsRecord> read_metrics(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read metrics file " + file.string());
  std::vector<MetricsRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    // A crash can leave a torn last line; anything earlier is corruption.
    if (j.is_discarded()) {
      if (in.peek() == EOF) break;
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": bad record");
    }
    out.push_back(metrics_from_json(j));
  }
  return out;
}

double area_under_curve(const std::vector<MetricsRecord>& r) {
  if (r.empty()) return 0.0;
  if (r.size() == 1) return r[0].return_by_episode[3];
  double area = 0.0;
  for (std::size_t i = 1; i < r.size(); ++i) {
    area += 0.5 * (r[i].return_by_episode[3] + r[i - 1].return_by_episode[3]) *
            static_cast<double>(r[i].frames - r[i - 1].frames);
  }
  return area / static_cast<double>(r.back().frames - r.front().frames);
}

fs::path final_checkpoint(const fs::path& run_dir, std::uint64_t seed) {
  return run_dir / "checkpoints" / ("seed" + std::to_string(seed) + "_final.ckpt");
}

RunResult train(const ExperimentConfig& config, const TrainOptions& options) {
  validate(config);
  const std::string text = to_json(config).dump(2);
  const std::uint64_t hash = config_hash(config);
  RunResult result;
  const std::string name =
      options.run_name.empty() ? timestamp() + "-" + hash_hex(hash).substr(0, 8) : options.run_name;
  result.dir = options.out_root / name;
  fs::create_directories(result.dir / "checkpoints");
  write_text(result.dir / "config.json", text + "\n");

  std::mutex mu;
  auto run_seed = [&](std::uint64_t seed) {
    Trainer trainer(config.agent, config.env, seed);
    const fs::path metrics_path = result.dir / ("metrics_seed" + std::to_string(seed) + ".jsonl");
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open " + metrics_path.string());
    std::vector<MetricsRecord> records;
    auto save = [&](const fs::path& file) {
      std::ofstream out(file, std::ios::binary);
      trainer.save_checkpoint(out, text, hash);
    };
    while (trainer.frames() < config.run.frame_budget) {
      MetricsRecord m = trainer.iterate();
      metrics << metrics_to_json(m, seed, hash).dump() << "\n" << std::flush;
      records.push_back(m);
      if (options.on_record) {
        std::lock_guard<std::mutex> lock(mu);
        options.on_record(seed, m);
      }
      if (trainer.iteration() % config.run.checkpoint_every == 0) {
        save(result.dir / "checkpoints" /
             ("seed" + std::to_string(seed) + "_it" + std::to_string(trainer.iteration()) + ".ckpt"));
      }
      if (config.run.eval_every > 0 && trainer.iteration() % config.run.eval_every == 0) {
        EvalReport rep = evaluate(trainer.agent(), config.env, config.run.eval_tasks, seed);
        nlohmann::ordered_json e;
        e["seed"] = seed;
        e["iteration"] = trainer.iteration() - 1;
        e["frames"] = trainer.frames();
        e["eval_mean"] = rep.mean;
        e["eval_stderr"] = rep.stderr_;
        std::lock_guard<std::mutex> lock(mu);
        std::ofstream(result.dir / "eval.jsonl", std::ios::app) << e.dump() << "\n";
      }
    }
    save(final_checkpoint(result.dir, seed));
    std::lock_guard<std::mutex> lock(mu);
    result.metrics[seed] = std::move(records);
  };

  if (config.run.parallel && config.run.seeds.size() > 1) {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(config.run.seeds.size());
    for (std::size_t i = 0; i < config.run.seeds.size(); ++i) {
      workers.emplace_back([&, i] {
        try {
          run_seed(config.run.seeds[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::uint64_t seed : config.run.seeds) run_seed(seed);
  }
  return result;
}

HashMismatch::HashMismatch(std::uint64_t checkpoint, std::uint64_t config)
    : std::runtime_error("config hash mismatch: checkpoint " + hash_hex(checkpoint) + ", config " +
                         hash_hex(config)),
      checkpoint_(checkpoint),
      config_(config) {}

EvalReport evaluate_checkpoint(const fs::path& checkpoint, int n_tasks, std::uint64_t seed,
                               const ExperimentConfig* expected) {
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) {
    throw fs::filesystem_error("cannot open checkpoint", checkpoint,
                               std::make_error_code(std::errc::no_such_file_or_directory));
  }
  CheckpointHeader h = read_checkpoint_header(in);
  if (expected && config_hash(*expected) != h.config_hash) {
    throw HashMismatch(h.config_hash, config_hash(*expected));
  }
  ExperimentConfig config = from_json(Json::parse(h.config_text));
  if (config_hash(config) != h.config_hash) {
    throw binio::FormatError("checkpoint config text does not match its stored hash");
  }
  Agent agent(config.agent, 0);
  in.seekg(0);
  load_agent_parameters(in, agent);
  return evaluate(agent, config.env, n_tasks, seed);
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "tasks: " << r.n_tasks << "\n";
  if (r.n_tasks == 0) return os.str();
  os << "episode  mean_return  stderr\n";
  os << std::fixed << std::setprecision(4);
  for (int e = 0; e < env::kEpisodesPerTask; ++e) {
    os << "      " << e + 1 << "  " << std::setw(11) << r.mean[e] << "  " << r.stderr_[e];
    if (e == env::kEpisodesPerTask - 1) os << "  <- reported";
    os << "\n";
  }
  return os.str();
}

std::vector<std::pair<std::string, ExperimentConfig>> ablations(const ExperimentConfig& base) {
  std::vector<std::pair<std::string, ExperimentConfig>> out;
  out.emplace_back("full", base);
  ExperimentConfig no_mem = base;
  no_mem.agent.memory.enabled = false;
  out.emplace_back("no_mem", no_mem);
  ExperimentConfig no_value = base;
  no_value.agent.loss.c_plan = 0.0;
  out.emplace_back("no_value_pred", no_value);
  ExperimentConfig no_nstep = base;
  no_nstep.agent.model.n = 0;
  out.emplace_back("no_nstep", no_nstep);
  return out;
}

namespace {

struct Curve {
  std::string label;
  std::vector<double> frames, mean, lo, hi;
};

// Piecewise-linear value of a seed's curve at frame x (clamped at the ends).
double sample_curve(const std::vector<MetricsRecord>& r, double x) {
  if (x <= r.front().frames) return r.front().return_by_episode[3];
  for (std::size_t i = 1; i < r.size(); ++i) {
    if (x <= r[i].frames) {
      const double t = (x - r[i - 1].frames) / double(r[i].frames - r[i - 1].frames);
      return r[i - 1].return_by_episode[3] * (1 - t) + r[i].return_by_episode[3] * t;
    }
  }
  return r.back().return_by_episode[3];
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

Curve load_curve(const fs::path& dir) {
  std::vector<std::vector<MetricsRecord>> seeds;
  if (fs::is_directory(dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("metrics_seed", 0) == 0 && e.path().extension() == ".jsonl") {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto r = read_metrics(f);
      if (!r.empty()) seeds.push_back(std::move(r));
    }
  }
  if (seeds.empty()) throw std::runtime_error("no metrics records in " + dir.string());
  Curve c;
  c.label = dir.filename().string();
  if (c.label.empty()) c.label = dir.parent_path().filename().string();
  double end = 0.0;
  for (const auto& s : seeds) end = std::max(end, double(s.back().frames));
  const double start = seeds.front().front().frames;
  const int points = 100;
  for (int i = 0; i <= points; ++i) {
    const double x = start + (end - start) * i / points;
    double sum = 0.0, lo = 1e300, hi = -1e300;
    int n = 0;
    for (const auto& s : seeds) {
      if (x > s.back().frames) continue;
      const double v = sample_curve(s, x);
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      ++n;
    }
    if (n == 0) continue;
    c.frames.push_back(x);
    c.mean.push_back(sum / n);
    c.lo.push_back(lo);
    c.hi.push_back(hi);
  }
  return c;
}

}  // namespace

void plot_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_svg) {
  if (run_dirs.empty()) throw std::invalid_argument("plot: no run directories given");
  std::vector<Curve> curves;
  for (const auto& d : run_dirs) curves.push_back(load_curve(d));

  double x_max = 1.0, y_min = 0.0, y_max = 1.0;
  for (const Curve& c : curves) {
    x_max = std::max(x_max, c.frames.back());
    for (double v : c.lo) y_min = std::min(y_min, v);
    for (double v : c.hi) y_max = std::max(y_max, v);
  }
  const double W = 720, H = 440, left = 70, right = 180, top = 30, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + pw * x / x_max; };
  auto py = [&](double y) { return top + ph * (1.0 - (y - y_min) / (y_max - y_min)); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double x = x_max * i / 5, y = y_min + (y_max - y_min) * i / 5;
    svg << "<text x=\"" << px(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << std::setprecision(0) << x << std::setprecision(2) << "</text>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << y
        << "</text>\n";
    svg << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << py(y) << "\" y2=\""
        << py(y) << "\" stroke=\"#ddd\"/>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15
      << "\" text-anchor=\"middle\">frames</text>\n";
  svg << "<text transform=\"translate(18," << top + ph / 2
      << ") rotate(-90)\" text-anchor=\"middle\">episode-4 return</text>\n";

  for (std::size_t k = 0; k < curves.size(); ++k) {
    const Curve& c = curves[k];
    const char* color = kColors[k % 8];
    svg << "<g class=\"curve\">\n<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" points=\"";
    for (std::size_t i = 0; i < c.frames.size(); ++i) svg << px(c.frames[i]) << "," << py(c.hi[i]) << " ";
    for (std::size_t i = c.frames.size(); i-- > 0;) svg << px(c.frames[i]) << "," << py(c.lo[i]) << " ";
    svg << "\"/>\n<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << color << "\" points=\"";
    for (std::size_t i = 0; i < c.frames.size(); ++i) svg << px(c.frames[i]) << "," << py(c.mean[i]) << " ";
    svg << "\"/>\n";
    const double ly = top + 16 + 20.0 * k;
    svg << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 36 << "\" y1=\"" << ly
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 4 << "\">" << xml_escape(c.label)
        << "</text>\n</g>\n";
  }
  svg << "</svg>\n";
  write_text(out_svg, svg.str());
}

}  // namespace bimrl::harness
