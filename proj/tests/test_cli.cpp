// End-to-end checks of the command-line binary: artifact layout, manifest
// contents, rerun determinism, dream dumps, evaluation reports, and exit
// codes. Budgets are tiny; nothing here trains to competence.

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CRLAB_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliResult r;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("crlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

nlohmann::json read_json(const fs::path& path) {
  return nlohmann::json::parse(read_file(path));
}

// A permissive bounds table: nearest-neighbour lookup makes two entries
// enough for any cartpole context.
void write_demo_table(const fs::path& path) {
  nlohmann::json table;
  table["entries"] = {
      {{"context", {{"gravity", 9.8}, {"length", 0.5}}},
       {"expert_return", 500.0},
       {"random_return", 20.0}},
      {{"context", {{"gravity", 9.8}, {"length", 1.0}}},
       {"expert_return", 480.0},
       {"random_return", 18.0}}};
  std::ofstream(path) << table.dump(2);
}

std::string train_args(const std::string& extra, const fs::path& out) {
  return "train --steps 40 " + extra + " --out " + out.string();
}

}  // namespace

TEST_CASE("cli: train writes a manifest, metrics, and a final checkpoint") {
  const fs::path dir = fresh_dir("train_artifacts");
  auto r = run_cli(
      train_args("--regime single:length --mode crssm --seed 0", dir / "run"));
  CAPTURE(r.output);
  REQUIRE(r.code == 0);

  auto manifest = read_json(dir / "run" / "config.json");
  CHECK(manifest.at("mode") == "crssm");
  CHECK(manifest.at("regime").at("kind") == "single");
  CHECK(manifest.at("regime").at("varied_dim") == "length");
  CHECK(manifest.at("task") == "cartpole");
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);
  CHECK(fs::exists(dir / "run" / "metrics.jsonl"));
  CHECK(fs::exists(dir / "run" / "checkpoint_final.ckpt"));
}

TEST_CASE("cli: paper size profile records its GRU width in the manifest") {
  const fs::path dir = fresh_dir("train_paper");
  auto r = run_cli(train_args(
      "--regime single:length --mode crssm --seed 0 --size paper",
      dir / "run"));
  CAPTURE(r.output);
  REQUIRE(r.code == 0);
  auto manifest = read_json(dir / "run" / "config.json");
  CHECK(manifest.at("resolved_sizes").at("gru_units") == 512);
  CHECK(manifest.at("size_profile") == "paper");
}

TEST_CASE("cli: retraining from the emitted config reproduces metrics") {
  const fs::path dir = fresh_dir("train_rerun");
  auto r1 = run_cli(
      train_args("--regime dual --mode concat --seed 3", dir / "a"));
  REQUIRE(r1.code == 0);
  auto r2 = run_cli("train --config " + (dir / "a" / "config.json").string() +
                    " --out " + (dir / "b").string());
  CAPTURE(r2.output);
  REQUIRE(r2.code == 0);
  CHECK(read_file(dir / "a" / "metrics.jsonl") ==
        read_file(dir / "b" / "metrics.jsonl"));
}

TEST_CASE("cli: context-blind regimes imply hidden mode") {
  const fs::path dir = fresh_dir("train_hidden");
  auto r = run_cli(train_args("--regime default --seed 0", dir / "run"));
  CAPTURE(r.output);
  REQUIRE(r.code == 0);
  CHECK(read_json(dir / "run" / "config.json").at("mode") == "hidden");

  auto conflict = run_cli(
      train_args("--regime default --mode crssm --seed 0", dir / "bad"));
  CHECK(conflict.code == 2);
  CHECK(conflict.output.find("usage error") != std::string::npos);
}

TEST_CASE("cli: identity dreams have exactly zero divergence") {
  const fs::path dir = fresh_dir("dream");
  REQUIRE(run_cli(train_args("--regime single:length --mode crssm --seed 0",
                             dir / "run"))
              .code == 0);

  auto identity = run_cli("dream --checkpoint " + (dir / "run").string() +
                          " --factual 9.8,0.35 --counterfactual 9.8,0.35" +
                          " --out " + (dir / "id").string());
  CAPTURE(identity.output);
  REQUIRE(identity.code == 0);
  std::istringstream csv(read_file(dir / "id" / "divergence.csv"));
  std::string line;
  std::getline(csv, line);  // hash comment
  CHECK(line.rfind("# config_hash ", 0) == 0);
  std::getline(csv, line);
  CHECK(line == "step,divergence");
  int steps = 0;
  while (std::getline(csv, line)) {
    ++steps;
    CHECK(line.substr(line.find(',') + 1) == "0");
  }
  CHECK(steps == 15);

  auto shifted = run_cli("dream --checkpoint " + (dir / "run").string() +
                         " --factual 9.8,0.35 --counterfactual 9.8,0.75" +
                         " --out " + (dir / "cf").string());
  REQUIRE(shifted.code == 0);
  std::istringstream cf_csv(read_file(dir / "cf" / "divergence.csv"));
  std::getline(cf_csv, line);
  std::getline(cf_csv, line);
  double dmax = 0;
  int jsonl_lines = 0;
  while (std::getline(cf_csv, line))
    dmax = std::max(dmax, std::stod(line.substr(line.find(',') + 1)));
  CHECK(dmax > 0);
  std::istringstream jsonl(read_file(dir / "cf" / "dream.jsonl"));
  while (std::getline(jsonl, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("factual").at("obs").size() == 4);
    CHECK(j.at("counterfactual").contains("reward"));
    ++jsonl_lines;
  }
  CHECK(jsonl_lines == 15);
}

TEST_CASE("cli: hidden checkpoints cannot dream counterfactuals") {
  const fs::path dir = fresh_dir("dream_hidden");
  REQUIRE(run_cli(train_args("--regime default --seed 0", dir / "run")).code ==
          0);
  auto r = run_cli("dream --checkpoint " + (dir / "run").string() +
                   " --counterfactual 9.8,0.75 --out " + (dir / "d").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("hidden") != std::string::npos);
}

TEST_CASE("cli: evaluation artifacts carry one row per seed and grid cell") {
  const fs::path dir = fresh_dir("evaluate");
  REQUIRE(run_cli(train_args("--regime single:length --mode crssm --seed 0",
                             dir / "s0"))
              .code == 0);
  REQUIRE(run_cli(train_args("--regime single:length --mode crssm --seed 1",
                             dir / "s1"))
              .code == 0);
  write_demo_table(dir / "table.json");

  auto missing = run_cli("evaluate " + (dir / "s0").string() +
                         " --expert-table " + (dir / "nope.json").string() +
                         " --out " + (dir / "ev").string());
  CHECK(missing.code == 4);

  auto r = run_cli("evaluate " + (dir / "s0").string() + " " +
                   (dir / "s1").string() + " --expert-table " +
                   (dir / "table.json").string() + " --episodes 1 --out " +
                   (dir / "ev").string());
  CAPTURE(r.output);
  REQUIRE(r.code == 0);

  std::istringstream rows_csv(read_file(dir / "ev" / "eval_rows.csv"));
  std::string line;
  std::getline(rows_csv, line);
  CHECK(line ==
        "method,regime,seed,gravity,length,region,mean_return,"
        "normalized_score,config_hash");
  int rows = 0;
  while (std::getline(rows_csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2 * 14);  // seeds x single-variation grid

  auto summary = read_json(dir / "ev" / "eval_summary.json");
  CHECK(summary.at("method") == "crssm");
  CHECK(summary.at("eval_regime") == "single:length");
  CHECK(summary.at("grid_contexts") == 14);
  CHECK(summary.at("regions").contains("crssm"));
  const auto s0_hash =
      read_json(dir / "s0" / "config.json").at("config_hash");
  CHECK(summary.at("config_hashes").size() == 2);
  bool found = false;
  for (const auto& [seed, hash] : summary.at("config_hashes").items()) {
    (void)seed;
    if (hash == s0_hash) found = true;
  }
  CHECK(found);
  CHECK(read_file(dir / "ev" / "eval_curves.csv").rfind("# config_hashes ",
                                                        0) == 0);
}

TEST_CASE("cli: report merges are idempotent and reject tampered hashes") {
  const fs::path dir = fresh_dir("report");
  REQUIRE(run_cli(train_args("--regime single:length --mode crssm --seed 0",
                             dir / "s0"))
              .code == 0);
  write_demo_table(dir / "table.json");
  REQUIRE(run_cli("evaluate " + (dir / "s0").string() + " --expert-table " +
                  (dir / "table.json").string() + " --episodes 1 --out " +
                  (dir / "ev").string())
              .code == 0);

  auto once = run_cli("report " + (dir / "ev").string() + " --out " +
                      (dir / "r1").string());
  CAPTURE(once.output);
  REQUIRE(once.code == 0);
  auto twice = run_cli("report " + (dir / "ev").string() + " " +
                       (dir / "ev").string() + " --out " +
                       (dir / "r2").string());
  REQUIRE(twice.code == 0);
  CHECK(read_file(dir / "r1" / "report.csv") ==
        read_file(dir / "r2" / "report.csv"));
  CHECK(read_file(dir / "r1" / "poi.csv") ==
        read_file(dir / "r2" / "poi.csv"));

  // Single-variation evaluations have no mixed region, so that cell is empty.
  std::istringstream report(read_file(dir / "r1" / "report.csv"));
  std::string line;
  std::getline(report, line);
  CHECK(line.rfind("# config_hashes ", 0) == 0);
  std::getline(report, line);  // header
  std::getline(report, line);
  CHECK(line.substr(line.size() - 3) == ",,,");

  // Same run identity, different hash: unmergeable.
  std::istringstream rows(read_file(dir / "ev" / "eval_rows.csv"));
  std::ofstream tampered(dir / "tampered.csv");
  int i = 0;
  while (std::getline(rows, line) && i < 3) {
    if (i > 0) {
      auto cut = line.rfind(',');
      line = line.substr(0, cut) + ",deadbeefdeadbeef";
    }
    tampered << line << "\n";
    ++i;
  }
  tampered.close();
  auto clash = run_cli("report " + (dir / "ev").string() + " " +
                       (dir / "tampered.csv").string() + " --out " +
                       (dir / "r3").string());
  CHECK(clash.code == 2);
  CHECK(clash.output.find("hash mismatch") != std::string::npos);
}
