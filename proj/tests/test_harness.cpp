#include <doctest.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "refil/harness.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using refil::RunConfig;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("refil_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_run(const fs::path& out, const std::string& algorithm = "refil") {
  RunConfig c;
  c.algorithm = algorithm;
  c.seed = 3;
  c.total_steps = 2000;
  c.eval_interval = 500;
  c.eval_episodes = 4;
  c.n_envs = 4;
  c.out_dir = out.string();
  c.env.n_agents = 2;
  c.env.n_cells = 3;
  c.env.n_groups = 1;
  c.env.episode_limit = 10;
  c.embed_dim = 8;
  c.heads = 2;
  c.hidden_dim = 4;
  c.mixing_dim = 4;
  c.learner.batch_size = 4;
  c.learner.buffer_capacity = 50;
  c.learner.epsilon_anneal_steps = 1000;
  c.learner.target_update_interval = 20;
  return c;
}

void write_metrics(const fs::path& dir, const std::vector<std::vector<double>>& rows) {
  fs::create_directories(dir);
  std::ofstream out(dir / "metrics.csv");
  out << "eval_index,env_steps,eval_win_rate\n";
  for (const auto& r : rows) out << r[0] << ',' << r[1] << ',' << r[2] << '\n';
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config round trip through JSON") {
  RunConfig c = tiny_run("somewhere", "refil-vdn");
  c.learner.lr = 0.00123;
  c.learner.partition_groups = 3;
  const RunConfig back = refil::run_config_from_json(refil::to_json(c));
  CHECK(refil::to_json(back) == refil::to_json(c));
  CHECK(back.learner.lr == 0.00123);
  CHECK(back.algorithm == "refil-vdn");
  CHECK(back.env.n_cells == 3);
}

TEST_CASE("defaults, unknown keys and overrides") {
  const RunConfig d = refil::run_config_from_json("{}");
  CHECK(d.learner.lr == 0.0005);
  CHECK(d.learner.batch_size == 32);
  CHECK(d.learner.buffer_capacity == 5000);
  CHECK(d.learner.target_update_interval == 200);
  CHECK(d.env.n_agents == 8);
  CHECK_THROWS(refil::run_config_from_json(R"({"learner": {"learning_rate": 1}})"));
  CHECK_THROWS(refil::run_config_from_json(R"({"bogus": 1})"));
  CHECK_THROWS(refil::run_config_from_json("not json"));

  RunConfig c;
  refil::apply_override(c, "learner.lr=0.01");
  refil::apply_override(c, "env.n_cells=9");
  refil::apply_override(c, "algorithm=qmix-attention");
  refil::apply_override(c, "learner.mixer=vdn");
  CHECK(c.learner.lr == 0.01);
  CHECK(c.env.n_cells == 9);
  CHECK(c.algorithm == "qmix-attention");
  CHECK(c.learner.mixer == refil::MixerKind::vdn);
  CHECK_THROWS(refil::apply_override(c, "learner.nope=1"));
  CHECK_THROWS(refil::apply_override(c, "learner.lr"));
  CHECK_THROWS(refil::apply_override(c, "env.n_cells=abc"));
}

TEST_CASE("algorithm names select mixer, partition and lambda") {
  RunConfig c;
  c.algorithm = "qmix-attention";
  c.apply_algorithm();
  CHECK(c.learner.lambda == 0.0);
  CHECK(c.learner.mixer == refil::MixerKind::qmix);
  c = RunConfig{};
  c.algorithm = "refil-vdn";
  c.apply_algorithm();
  CHECK(c.learner.lambda == 0.5);
  CHECK(c.learner.mixer == refil::MixerKind::vdn);
  c = RunConfig{};
  c.algorithm = "refil-fixed-oracle";
  c.apply_algorithm();
  CHECK(c.learner.partition == refil::PartitionStrategy::fixed_oracle);
  c = RunConfig{};
  c.algorithm = "refil-randomized-oracle";
  c.apply_algorithm();
  CHECK(c.learner.partition == refil::PartitionStrategy::randomized_oracle);
  c.algorithm = "mystery";
  CHECK_THROWS_AS(c.apply_algorithm(), std::invalid_argument);
}

TEST_CASE("output directory resolution honours the environment") {
  RunConfig c;
  c.seed = 7;
  c.algorithm = "refil";
  ::unsetenv(refil::kOutputRootEnv);
  CHECK(refil::resolve_output_dir(c) == fs::path("runs") / "refil-seed7");
  ::setenv(refil::kOutputRootEnv, "/tmp/elsewhere", 1);
  CHECK(refil::resolve_output_dir(c) == fs::path("/tmp/elsewhere") / "refil-seed7");
  c.out_dir = "named";
  CHECK(refil::resolve_output_dir(c) == fs::path("/tmp/elsewhere") / "named");
  c.out_dir = "/abs/dir";
  CHECK(refil::resolve_output_dir(c) == fs::path("/abs/dir"));
  ::unsetenv(refil::kOutputRootEnv);
}

TEST_CASE("checkpoint round trip and mismatches") {
  TempDir tmp("ckpt");
  RunConfig c = tiny_run(tmp.path);
  c.apply_algorithm();
  refil::QModel model(c.model_config(), 5);
  const fs::path ckpt = tmp.path / "model.ckpt";
  refil::save_checkpoint(ckpt, c, model.params());

  refil::QModel other(c.model_config(), 6);
  CHECK_FALSE(other.params().values_equal(model.params()));
  refil::load_checkpoint(ckpt, other.params());
  CHECK(other.params().values_equal(model.params()));
  CHECK(refil::to_json(refil::read_checkpoint_config(ckpt)) == refil::to_json(c));

  RunConfig wider = c;
  wider.embed_dim = 16;
  refil::QModel bigger(wider.model_config(), 5);
  CHECK_THROWS_WITH_AS(refil::load_checkpoint(ckpt, bigger.params()),
                       doctest::Contains("architecture mismatch"), std::runtime_error);
  CHECK_THROWS(refil::run_eval(ckpt, 2, wider));

  std::string bytes = slurp(ckpt);
  bytes[8] = static_cast<char>(refil::kCheckpointVersion + 1);
  std::ofstream(tmp.path / "future.ckpt", std::ios::binary) << bytes;
  CHECK_THROWS_WITH(refil::load_checkpoint(tmp.path / "future.ckpt", other.params()),
                    doctest::Contains("version"));
  std::ofstream(tmp.path / "junk.ckpt", std::ios::binary) << "not a checkpoint";
  CHECK_THROWS(refil::load_checkpoint(tmp.path / "junk.ckpt", other.params()));
  CHECK_THROWS(refil::load_checkpoint(tmp.path / "missing.ckpt", other.params()));
}

TEST_CASE("confidence intervals") {
  const double xs[] = {1, 2, 3, 4};
  const auto [m, ci] = refil::mean_ci95(xs);
  CHECK(m == 2.5);
  CHECK(ci == doctest::Approx(1.96 * std::sqrt(5.0 / 3.0) / 2.0));
  const double one[] = {3.0};
  CHECK(refil::mean_ci95(one).second == 0.0);
  CHECK_THROWS(refil::mean_ci95(std::span<const double>{}));
}

TEST_CASE("evaluation: errors and 1/sqrt(n) interval scaling") {
  RunConfig c = tiny_run("unused");
  c.apply_algorithm();
  refil::QModel model(c.model_config(), 1);
  CHECK_THROWS_AS(refil::evaluate(model, c.env, 0, 4, 1), std::invalid_argument);
  const auto small = refil::evaluate(model, c.env, 64, 4, 11);
  const auto large = refil::evaluate(model, c.env, 1024, 4, 11);
  CHECK(small.episodes == 64);
  CHECK(small.win_rate >= 0.0);
  CHECK(small.win_rate <= 1.0);
  REQUIRE(large.return_ci > 0.0);
  CHECK(small.return_ci / large.return_ci == doctest::Approx(4.0).epsilon(0.25));
  const auto again = refil::evaluate(model, c.env, 64, 4, 11);
  CHECK(again.mean_return == small.mean_return);
}

TEST_CASE("curve export") {
  TempDir tmp("export");
  write_metrics(tmp.path / "a", {{0, 0, 0.1}, {1, 100, 0.4}, {2, 200, 0.7}});
  write_metrics(tmp.path / "b", {{0, 0, 0.3}, {1, 100, 0.5}});
  write_metrics(tmp.path / "c", {{0, 0, 0.2}, {1, 100, 0.9}, {2, 200, 1.0}});

  const fs::path single = tmp.path / "single.csv";
  const fs::path one[] = {tmp.path / "a"};
  refil::export_curves(one, single);
  auto rows = read_csv(single);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0][0] == "eval_index");
  CHECK(rows[0][1] == "runs");
  CHECK(std::stod(rows[3][rows[0].size() - 2]) == doctest::Approx(0.7));

  const fs::path three[] = {tmp.path / "a", tmp.path / "b", tmp.path / "c"};
  refil::export_curves(three, tmp.path / "three.csv");
  rows = read_csv(tmp.path / "three.csv");
  REQUIRE(rows.size() == 3);  // header + indices present in all runs
  std::size_t mean_col = 0, ci_col = 0;
  for (std::size_t i = 0; i < rows[0].size(); ++i) {
    if (rows[0][i] == "eval_win_rate_mean") mean_col = i;
    if (rows[0][i] == "eval_win_rate_ci95") ci_col = i;
  }
  REQUIRE(mean_col > 0);
  CHECK(std::stod(rows[2][mean_col]) == doctest::Approx((0.4 + 0.5 + 0.9) / 3));
  CHECK(std::stod(rows[2][1]) == 3);
  // s = sqrt(((0.4-0.6)^2 + (0.5-0.6)^2 + (0.9-0.6)^2) / 2) = sqrt(0.07)
  CHECK(std::stod(rows[2][ci_col]) == doctest::Approx(1.96 * std::sqrt(0.07) / std::sqrt(3.0)));

  const fs::path same[] = {tmp.path / "a", tmp.path / "a"};
  refil::export_curves(same, tmp.path / "same.csv");
  rows = read_csv(tmp.path / "same.csv");
  for (std::size_t r = 1; r < rows.size(); ++r) CHECK(std::stod(rows[r][ci_col]) == 0.0);

  fs::create_directories(tmp.path / "bad");
  std::ofstream(tmp.path / "bad" / "metrics.csv") << "eval_index,other\n0,1\n";
  const fs::path mixed[] = {tmp.path / "a", tmp.path / "bad"};
  CHECK_THROWS_WITH(refil::export_curves(mixed, tmp.path / "x.csv"),
                    doctest::Contains("schema mismatch"));
  const fs::path missing[] = {tmp.path / "nope"};
  CHECK_THROWS(refil::export_curves(missing, tmp.path / "y.csv"));
}

TEST_CASE("seeded smoke runs are reproducible and well formed") {
  TempDir tmp("smoke");
  const auto a = refil::run_train(tiny_run(tmp.path / "a"));
  const auto b = refil::run_train(tiny_run(tmp.path / "b"));
  for (const char* f : {"metrics.csv", "train_log.csv"}) {
    CHECK(slurp(a.out_dir / f) == slurp(b.out_dir / f));
  }
  {
    // Checkpoints embed their own output directory; compare the tensors.
    RunConfig c = refil::read_checkpoint_config(a.out_dir / "model.ckpt");
    refil::QModel ma(c.model_config(), 0), mb(c.model_config(), 1);
    refil::load_checkpoint(a.out_dir / "model.ckpt", ma.params());
    refil::load_checkpoint(b.out_dir / "model.ckpt", mb.params());
    CHECK(ma.params().values_equal(mb.params()));
  }
  CHECK(fs::exists(a.out_dir / "config.json"));
  CHECK(refil::to_json(refil::load_run_config(a.out_dir / "config.json")) ==
        slurp(a.out_dir / "config.json"));
  REQUIRE(a.rows.size() >= 4);
  CHECK(a.rows.front().env_steps == 0);
  CHECK(a.rows.back().env_steps >= 2000);
  CHECK(a.rows.back().train_steps > 0);
  for (const auto& r : a.rows) {
    CHECK(r.eval_win_rate >= 0.0);
    CHECK(r.eval_win_rate <= 1.0);
  }
  const auto lines = read_csv(a.out_dir / "metrics.csv");
  CHECK(lines.size() == a.rows.size() + 1);

  const auto q = refil::run_train(tiny_run(tmp.path / "q", "qmix-attention"));
  for (const auto& r : q.rows) CHECK(r.loss_aux == 0.0);

  const auto eval = refil::run_eval(a.out_dir / "model.ckpt", 8);
  CHECK(eval.episodes == 8);
  CHECK_THROWS(refil::run_eval(a.out_dir / "model.ckpt", 0));

  RunConfig bad = tiny_run(tmp.path / "bad");
  bad.learner.lr = -1;
  CHECK_THROWS_AS(refil::run_train(bad), std::invalid_argument);
}

TEST_CASE("early stop predicate") {
  TempDir tmp("stop");
  const auto r = refil::run_train(tiny_run(tmp.path / "s"),
                                  [](const refil::MetricsRow& row) { return row.eval_index == 1; });
  CHECK(r.stopped_early);
  CHECK(r.rows.size() == 2);

  RunConfig capped = tiny_run(tmp.path / "capped");
  capped.max_train_steps = 7;
  const auto c = refil::run_train(capped);
  CHECK_FALSE(c.stopped_early);
  CHECK(c.rows.back().train_steps == 7);
  CHECK(c.rows.back().env_steps < 2000);
}

}  // TEST_SUITE
