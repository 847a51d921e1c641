#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "bimrl/harness.h"

using namespace bimrl;
using namespace bimrl::harness;
namespace fs = std::filesystem;

namespace {

// Scratch directory removed at scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("bimrl_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.env.params.episode_horizon = 8;
  ModelConfig& m = c.agent.model;
  m.obs_embed = m.encoder_hidden = m.h1 = m.h2 = m.h3 = 8;
  m.decoder_hidden = m.value_hidden = m.head_hidden = m.state_agg = m.combine_dim = 8;
  m.latent = 3;
  m.action_agg = 4;
  m.memory_heads = 2;
  m.memory_head_dim = 4;
  c.agent.optim.tasks_per_batch = 2;
  c.agent.optim.epochs = 1;
  c.agent.optim.num_minibatches = 1;
  c.run.seeds = {1};
  c.run.frame_budget = 300;
  c.run.checkpoint_every = 2;
  return c;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count(const std::string& haystack, const std::string& needle) {
  int n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos;
       pos = haystack.find(needle, pos + 1)) {
    ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("config defaults round trip and canonical form is idempotent") {
  ExperimentConfig c;
  Json j = to_json(c);
  ExperimentConfig back = from_json(j);
  CHECK(canonical_text(back) == canonical_text(c));
  CHECK(canonical_text(from_json(Json::parse(canonical_text(c)))) == canonical_text(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(j["run"]["eval_tasks"] == 100);
  CHECK(j["run"]["seeds"].size() == 3);
  CHECK(j["env"]["family"] == "MultiRoom");
  CHECK_NOTHROW(validate(c));
  // An empty object is the default config.
  CHECK(canonical_text(from_json(Json::object())) == canonical_text(c));
}

TEST_CASE("config hash follows every field") {
  ExperimentConfig a, b;
  b.agent.loss.c_plan = 0.25;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(hash_hex(config_hash(a)).size() == 16);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("unknown keys and wrong types are rejected with the field path") {
  Json j = to_json(ExperimentConfig{});
  j["model"]["hidden_size"] = 3;
  try {
    from_json(j);
    FAIL("accepted unknown key");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "model.hidden_size");
  }
  Json k = Json::object();
  k["extras"] = Json::object();
  CHECK_THROWS_AS(from_json(k), ConfigError);
  Json t = Json::object();
  t["optim"]["epochs"] = 2.5;
  try {
    from_json(t);
    FAIL("accepted a fractional integer");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "optim.epochs");
  }
  Json f = Json::object();
  f["env"]["family"] = "Maze";
  CHECK_THROWS_AS(from_json(f), ConfigError);
}

TEST_CASE("validation names the offending field") {
  ExperimentConfig c;
  c.agent.memory.top_fraction = 1.5;
  try {
    validate(c);
    FAIL("accepted top_fraction > 1");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "memory.top_fraction");
  }
  ExperimentConfig d;
  d.env.params.room_count = 1;
  try {
    validate(d);
    FAIL("accepted a one-room MultiRoom");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "env.room_count");
  }
}

TEST_CASE("overrides: file < environment < command line") {
  TempDir dir("overrides");
  const fs::path file = dir.path / "c.json";
  write_file(file, R"({"optim": {"lr": 0.001, "epochs": 2}, "loss": {"c_ent": 0.02}})");

  ExperimentConfig plain = load_config(file, {}, {});
  CHECK(plain.agent.optim.lr == 0.001);
  CHECK(plain.agent.optim.epochs == 2);

  const char* env_entries[] = {"BIMRL_OPTIM__LR=0.002", "BIMRL_LOSS__C_ENT=0.03", "PATH=/bin",
                               nullptr};
  auto env = env_overrides(const_cast<char**>(env_entries));
  REQUIRE(env.size() == 2);
  CHECK(env[0] == "loss.c_ent=0.03");
  CHECK(env[1] == "optim.lr=0.002");

  ExperimentConfig with_env = load_config(file, env, {});
  CHECK(with_env.agent.optim.lr == 0.002);
  CHECK(with_env.agent.loss.c_ent == 0.03);

  ExperimentConfig with_cli = load_config(file, env, {"optim.lr=0.005", "run.seeds=[7,8]"});
  CHECK(with_cli.agent.optim.lr == 0.005);
  CHECK(with_cli.agent.loss.c_ent == 0.03);
  CHECK(with_cli.run.seeds == std::vector<std::uint64_t>{7, 8});

  CHECK_THROWS_AS(load_config(file, {}, {"optim.lr=fast"}), ConfigError);
  CHECK_THROWS_AS(load_config(file, {}, {"lr=0.1"}), ConfigError);
  const char* bad_env[] = {"BIMRL_LR=1", nullptr};
  CHECK_THROWS_AS(env_overrides(const_cast<char**>(bad_env)), ConfigError);
  try {
    load_config(dir.path / "missing.json", {}, {});
    FAIL("missing file accepted");
  } catch (const fs::filesystem_error& e) {
    CHECK(e.path1().filename() == "missing.json");
  }
}

TEST_CASE("metrics records round trip with a fixed field order") {
  MetricsRecord m;
  m.iteration = 3;
  m.frames = 1234;
  m.return_by_episode = {0.1, 0.2, 0.3, 0.4};
  m.policy_loss = -0.5;
  m.kl = 0.01;
  auto j = metrics_to_json(m, 9, 0xfeedULL);
  const std::string line = j.dump();
  CHECK(line.rfind("{\"schema\":1,\"config_hash\":\"000000000000feed\",\"seed\":9,\"iteration\":3,", 0) == 0);
  MetricsRecord back = metrics_from_json(Json::parse(line));
  CHECK(back.iteration == 3);
  CHECK(back.frames == 1234);
  CHECK(back.return_by_episode == m.return_by_episode);
  CHECK(back.policy_loss == m.policy_loss);
  CHECK(back.kl == m.kl);

  TempDir dir("metrics");
  const fs::path file = dir.path / "metrics_seed1.jsonl";
  write_file(file, line + "\n" + line + "\n{\"schema\":1,\"iter");
  CHECK(read_metrics(file).size() == 2);
  write_file(file, line + "\ngarbage\n" + line + "\n");
  CHECK_THROWS(read_metrics(file));
}

TEST_CASE("area under the episode-4 curve") {
  std::vector<MetricsRecord> r(3);
  r[0].frames = 0;
  r[1].frames = 100;
  r[2].frames = 300;
  r[0].return_by_episode[3] = 0.0;
  r[1].return_by_episode[3] = 1.0;
  r[2].return_by_episode[3] = 1.0;
  // (0.5 * 100 + 1.0 * 200) / 300
  CHECK(area_under_curve(r) == doctest::Approx(250.0 / 300.0));
  CHECK(area_under_curve({}) == 0.0);
}

TEST_CASE("ablations change only their target field") {
  ExperimentConfig base;
  auto list = ablations(base);
  REQUIRE(list.size() == 4);
  CHECK(list[0].first == "full");
  CHECK(canonical_text(list[0].second) == canonical_text(base));
  CHECK(list[1].first == "no_mem");
  CHECK(!list[1].second.agent.memory.enabled);
  CHECK(list[2].first == "no_value_pred");
  CHECK(list[2].second.agent.loss.c_plan == 0.0);
  CHECK(list[3].first == "no_nstep");
  CHECK(list[3].second.agent.model.n == 0);
  for (std::size_t i = 1; i < list.size(); ++i) {
    Json a = to_json(base), b = to_json(list[i].second);
    int differences = 0;
    for (const auto& [section, body] : a.items()) {
      for (const auto& [key, value] : body.items()) differences += b[section][key] != value;
    }
    CHECK(differences == 1);
  }
}

TEST_CASE("training run artifacts, evaluation and plotting") {
  TempDir dir("train");
  ExperimentConfig c = small_config();
  c.run.seeds = {1, 2};
  TrainOptions opts;
  opts.out_root = dir.path;
  opts.run_name = "full";
  int callbacks = 0;
  opts.on_record = [&](std::uint64_t, const MetricsRecord&) { ++callbacks; };
  RunResult r = train(c, opts);
  CHECK(r.dir == dir.path / "full");
  CHECK(fs::exists(r.dir / "config.json"));
  CHECK(canonical_text(from_json(Json::parse(read_file(r.dir / "config.json")))) ==
        canonical_text(c));
  for (std::uint64_t seed : {1, 2}) {
    const fs::path mfile = r.dir / ("metrics_seed" + std::to_string(seed) + ".jsonl");
    auto records = read_metrics(mfile);
    CHECK(records.size() == r.metrics[seed].size());
    CHECK(records.back().frames >= c.run.frame_budget);
    for (std::size_t i = 0; i < records.size(); ++i) CHECK(records[i].iteration == int(i));
    CHECK(fs::exists(final_checkpoint(r.dir, seed)));
  }
  CHECK(callbacks == int(r.metrics[1].size() + r.metrics[2].size()));

  // Evaluation.
  const fs::path ckpt = final_checkpoint(r.dir, 1);
  EvalReport a = evaluate_checkpoint(ckpt, 3, 5, &c);
  EvalReport b = evaluate_checkpoint(ckpt, 3, 5);
  CHECK(a.per_task == b.per_task);
  CHECK(a.per_task.size() == 3);
  CHECK(count(format_report(a), "\n      ") == 4);
  EvalReport none = evaluate_checkpoint(ckpt, 0, 5);
  CHECK(none.n_tasks == 0);
  ExperimentConfig other = c;
  other.agent.optim.lr = 0.1;
  try {
    evaluate_checkpoint(ckpt, 1, 5, &other);
    FAIL("hash mismatch accepted");
  } catch (const HashMismatch& e) {
    CHECK(e.checkpoint_hash() == config_hash(c));
    CHECK(e.config_hash() == config_hash(other));
    CHECK(std::string(e.what()).find(hash_hex(config_hash(c))) != std::string::npos);
    CHECK(std::string(e.what()).find(hash_hex(config_hash(other))) != std::string::npos);
  }

  // Plotting leaves metrics untouched.
  const std::string before = read_file(r.dir / "metrics_seed1.jsonl");
  const fs::path svg = dir.path / "one.svg";
  plot_runs({r.dir}, svg);
  CHECK(fs::file_size(svg) > 0);
  CHECK(count(read_file(svg), "<g class=\"curve\">") == 1);
  CHECK(read_file(r.dir / "metrics_seed1.jsonl") == before);

  // Four run directories give four curves.
  std::vector<fs::path> dirs = {r.dir};
  for (const char* name : {"no_mem", "no_value_pred", "no_nstep"}) {
    fs::create_directories(dir.path / name);
    fs::copy_file(r.dir / "metrics_seed1.jsonl", dir.path / name / "metrics_seed1.jsonl");
    dirs.push_back(dir.path / name);
  }
  plot_runs(dirs, dir.path / "four.svg");
  CHECK(count(read_file(dir.path / "four.svg"), "<g class=\"curve\">") == 4);

  fs::create_directories(dir.path / "empty");
  try {
    plot_runs({dir.path / "empty"}, dir.path / "x.svg");
    FAIL("empty run directory accepted");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("empty") != std::string::npos);
  }
}

TEST_CASE("identical configs train identically") {
  TempDir dir("determinism");
  ExperimentConfig c = small_config();
  TrainOptions opts;
  opts.out_root = dir.path;
  opts.run_name = "a";
  train(c, opts);
  opts.run_name = "b";
  train(c, opts);
  auto strip = [](const std::string& text) {
    std::string out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      Json j = Json::parse(line);
      j.erase("wall_clock");
      out += j.dump() + "\n";
    }
    return out;
  };
  CHECK(strip(read_file(dir.path / "a" / "metrics_seed1.jsonl")) ==
        strip(read_file(dir.path / "b" / "metrics_seed1.jsonl")));
}
