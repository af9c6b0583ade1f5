// Command-line front end: training runs, expert-table construction, the
// zero-shot evaluation protocol, counterfactual dream dumps, and report
// merging. Exit codes: 0 success, 2 usage error, 3 numerical abort, 4 IO
// error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crlab/eval.hpp"
#include "crlab/imagine.hpp"
#include "crlab/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace crlab;

namespace {

using F = float;  // scalar type for production training and evaluation

fs::path out_root() {
  if (const char* env = std::getenv("CRLAB_OUT_ROOT")) return fs::path(env);
  return fs::path("runs");
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

ContextVector parse_context(const std::string& text) {
  const auto comma = text.find(',');
  check_usage(comma != std::string::npos,
              "context must be <gravity>,<length>, e.g. 9.8,0.5");
  try {
    return {{"gravity", std::stod(text.substr(0, comma))},
            {"length", std::stod(text.substr(comma + 1))}};
  } catch (const std::exception&) {
    throw UsageError("context must be two numbers: <gravity>,<length>");
  }
}

TrainingRegime parse_regime(const std::string& text) {
  TrainingRegime r;
  if (text == "default") {
    r.kind = RegimeKind::DefaultContext;
  } else if (text == "dual") {
    r.kind = RegimeKind::DualVariation;
  } else if (text.rfind("single:", 0) == 0) {
    r.kind = RegimeKind::SingleVariation;
    r.varied_dim = text.substr(7);
    check_usage(!r.varied_dim.empty(),
                "single regime needs a dimension, e.g. single:length");
  } else if (text.rfind("expert:", 0) == 0) {
    r.kind = RegimeKind::Expert;
    r.expert_context = parse_context(text.substr(7));
  } else {
    throw UsageError("unknown regime '" + text +
                     "' (expected default, single:<dim>, dual, or "
                     "expert:<gravity>,<length>)");
  }
  return r;
}

std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string regime_label(const TrainingRegime& r) {
  switch (r.kind) {
    case RegimeKind::DefaultContext:
      return "default";
    case RegimeKind::DualVariation:
      return "dual";
    case RegimeKind::SingleVariation:
      return "single:" + r.varied_dim;
    case RegimeKind::Expert:
      return "expert:" + num(r.expert_context.at("gravity")) + "," +
             num(r.expert_context.at("length"));
  }
  return "?";
}

std::string path_token(std::string s) {
  for (char& c : s)
    if (c == ':' || c == ',') c = '_';
  return s;
}

// "default" agents are hidden-mode networks; the label tells the baselines
// apart in reports.
std::string method_label(const TrainConfig& cfg) {
  if (cfg.regime.kind == RegimeKind::DefaultContext) return "default";
  if (cfg.regime.kind == RegimeKind::Expert) return "expert";
  return to_string(cfg.mode);
}

fs::path checkpoint_path(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "checkpoint_final.ckpt";
  return p;
}

MatT<F> context_column(const ContextSpec& spec, const ContextVector& ctx) {
  auto cn = normalize_context(spec, ctx);
  MatT<F> m(Eigen::Index(cn.size()), 1);
  for (std::size_t d = 0; d < cn.size(); ++d)
    m(Eigen::Index(d), 0) = static_cast<F>(cn[d]);
  return m;
}

std::vector<ContextVector> eval_grid(const ContextSpec& spec,
                                     const TrainingRegime& er) {
  std::vector<ContextVector> grid;
  if (er.kind == RegimeKind::DualVariation) {
    for (double g : spec.dim("gravity").dual_eval)
      for (double l : spec.dim("length").dual_eval)
        grid.push_back({{"gravity", g}, {"length", l}});
  } else {
    for (double v : spec.dim(er.varied_dim).single_eval) {
      auto ctx = default_context(spec);
      ctx[er.varied_dim] = v;
      grid.push_back(ctx);
    }
  }
  return grid;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) {
      try {
        seeds.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw UsageError("bad seed list entry: " + item);
      }
    }
  check_usage(!seeds.empty(), "empty seed list");
  return seeds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string config, mode, regime, size, out;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  double early_stop = 0;
  CLI::Option *mode_opt = nullptr, *regime_opt = nullptr, *seed_opt = nullptr,
              *size_opt = nullptr, *steps_opt = nullptr, *out_opt = nullptr,
              *stop_opt = nullptr;
};

int cmd_train(const TrainFlags& f) {
  TrainConfig cfg;
  bool mode_given = false;
  if (!f.config.empty()) {
    auto j = read_json_file(f.config);
    cfg = TrainConfig::from_json(j);
    mode_given = j.contains("mode");
  }
  if (f.regime_opt->count()) cfg.regime = parse_regime(f.regime);
  if (f.mode_opt->count()) {
    cfg.mode = mode_from_string(f.mode);
    mode_given = true;
  }
  if (f.seed_opt->count()) cfg.seed = f.seed;
  if (f.size_opt->count()) cfg.size_profile = f.size;
  if (f.steps_opt->count()) cfg.env_step_budget = f.steps;
  if (f.stop_opt->count()) cfg.early_stop_return = f.early_stop;
  // Context-blind regimes imply hidden mode unless the caller insisted.
  if (!mode_given && (cfg.regime.kind == RegimeKind::DefaultContext ||
                      cfg.regime.kind == RegimeKind::Expert))
    cfg.mode = ConditioningMode::HIDDEN;
  cfg.validate();

  fs::path out = f.out_opt->count()
                     ? fs::path(f.out)
                     : out_root() / (path_token(regime_label(cfg.regime)) +
                                     "_" + to_string(cfg.mode) + "_s" +
                                     std::to_string(cfg.seed));
  run_training<F>(cfg, out);
  std::cout << "trained " << regime_label(cfg.regime) << "/"
            << to_string(cfg.mode) << " seed " << cfg.seed << " -> "
            << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// expert
// ---------------------------------------------------------------------------

struct ExpertFlags {
  std::vector<std::string> contexts;
  std::string seeds = "0,1,2";
  std::int64_t steps = 50000;
  double early_stop = 450;
  int episodes = 50;
  std::string size = "desk";
  std::string runs_root, out;
};

int cmd_expert(const ExpertFlags& f) {
  const ContextSpec spec = ContextSpec::cartpole();
  std::vector<ContextVector> contexts;
  for (const auto& text : f.contexts) {
    auto ctx = parse_context(text);
    validate_context(spec, ctx);
    contexts.push_back(ctx);
  }
  const auto seeds = parse_seed_list(f.seeds);
  const fs::path root = f.runs_root.empty() ? out_root() : fs::path(f.runs_root);
  const fs::path table_path =
      f.out.empty() ? root / "expert_table.json" : fs::path(f.out);

  ExpertTable table;
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& ctx : contexts) {
    double best_expert = -std::numeric_limits<double>::infinity();
    double best_random = -std::numeric_limits<double>::infinity();
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg;
      cfg.regime.kind = RegimeKind::Expert;
      cfg.regime.expert_context = ctx;
      cfg.mode = ConditioningMode::HIDDEN;
      cfg.seed = seed;
      cfg.size_profile = f.size;
      cfg.env_step_budget = f.steps;
      cfg.early_stop_return = f.early_stop;
      cfg.validate();

      const fs::path dir =
          root / ("expert_g" + num(ctx.at("gravity")) + "_l" +
                  num(ctx.at("length")) + "_s" + std::to_string(seed));
      if (!fs::exists(dir / "checkpoint_final.ckpt")) run_training<F>(cfg, dir);
      auto agent = load_agent<F>(dir / "checkpoint_final.ckpt");
      check_usage(agent.config.hash() == cfg.hash(),
                  "cached run at " + dir.string() +
                      " was trained with a different configuration");
      hashes[dir.filename().string()] = cfg.hash();

      double expert_ret = protocol_return(agent, ctx, seed, f.episodes);
      double random_ret = random_policy_return(spec, ctx, seed, f.episodes);
      best_expert = std::max(best_expert, expert_ret);
      best_random = std::max(best_random, random_ret);
      std::cout << "expert (" << num(ctx.at("gravity")) << ","
                << num(ctx.at("length")) << ") seed " << seed << ": return "
                << expert_ret << ", random " << random_ret << "\n";
    }
    table.entries.push_back({ctx, best_expert, best_random});
  }
  table.validate(spec);

  nlohmann::json j = table.to_json();
  j["config_hashes"] = hashes;
  fs::create_directories(table_path.parent_path().empty()
                             ? fs::path(".")
                             : table_path.parent_path());
  write_text(table_path, j.dump(2) + "\n");
  std::cout << "expert table (" << table.entries.size() << " contexts) -> "
            << table_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateFlags {
  std::vector<std::string> runs;
  std::string table, eval_regime, out;
  int episodes = 10;
};

int cmd_evaluate(const EvaluateFlags& f) {
  const ContextSpec spec = ContextSpec::cartpole();
  ExpertTable table = ExpertTable::load(f.table);
  table.validate(spec);

  std::vector<LoadedAgent<F>> agents;
  for (const auto& arg : f.runs)
    agents.push_back(load_agent<F>(checkpoint_path(arg)));

  // The runs must be seeds of one configuration, not a grab bag.
  auto sans_seed = [](const TrainConfig& c) {
    auto j = c.to_json();
    j.erase("seed");
    return j.dump();
  };
  std::set<std::uint64_t> seen_seeds;
  for (const auto& agent : agents) {
    check_usage(sans_seed(agent.config) == sans_seed(agents.front().config),
                "runs differ in more than the training seed");
    check_usage(seen_seeds.insert(agent.config.seed).second,
                "duplicate training seed " +
                    std::to_string(agent.config.seed) + " among runs");
  }

  TrainingRegime er;
  if (f.eval_regime.empty()) {
    er = agents.front().config.regime;
    check_usage(er.kind == RegimeKind::SingleVariation ||
                    er.kind == RegimeKind::DualVariation,
                "training regime has no evaluation grid; pass --eval-regime");
  } else {
    er = parse_regime(f.eval_regime);
    check_usage(er.kind == RegimeKind::SingleVariation ||
                    er.kind == RegimeKind::DualVariation,
                "--eval-regime must be dual or single:<dim>");
  }
  if (er.kind == RegimeKind::SingleVariation) spec.dim(er.varied_dim);

  const auto grid = eval_grid(spec, er);
  const std::string method = method_label(agents.front().config);
  const std::string label = regime_label(er);

  std::vector<ReturnRow> raw;
  for (const auto& agent : agents) {
    auto rows = run_protocol(agent, method, label, grid, f.episodes,
                             {agent.config.seed}, agent.config.hash());
    raw.insert(raw.end(), rows.begin(), rows.end());
    std::cout << "evaluated seed " << agent.config.seed << " on "
              << grid.size() << " contexts\n";
  }

  Rng rng(2026);
  EvalReport rep = aggregate_report(raw, table, spec, er, rng);

  const fs::path out = f.out.empty()
                           ? out_root() / ("eval_" + method + "_" +
                                           path_token(label))
                           : fs::path(f.out);
  fs::create_directories(out);

  std::ostringstream rows_csv;
  rep.write_csv(rows_csv);
  write_text(out / "eval_rows.csv", rows_csv.str());

  nlohmann::json summary = rep.summary_json();
  summary["method"] = method;
  summary["eval_regime"] = label;
  summary["episodes"] = f.episodes;
  summary["grid_contexts"] = grid.size();
  write_text(out / "eval_summary.json", summary.dump(2) + "\n");

  std::ostringstream curves;
  curves << "# config_hashes";
  for (const auto& agent : agents) curves << " " << agent.config.hash();
  curves << "\n";
  rep.write_curves_csv(curves);
  write_text(out / "eval_curves.csv", curves.str());

  for (const auto& [m, regions] : rep.regions)
    for (const auto& [region, s] : regions) {
      std::cout << m << " " << label << " region " << region
                << ": iqm " << s.iqm_score;
      if (s.has_ci) std::cout << " [" << s.ci_low << ", " << s.ci_high << "]";
      std::cout << " (" << s.contexts << " contexts x " << s.seeds
                << " seeds)\n";
    }
  std::cout << "reports -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// dream
// ---------------------------------------------------------------------------

struct DreamFlags {
  std::string checkpoint, factual, counterfactual, out;
  int horizon = 15;
  int warmup = 5;
  std::uint64_t seed = 0;
};

int cmd_dream(const DreamFlags& f) {
  auto agent = load_agent<F>(checkpoint_path(f.checkpoint));
  const ContextSpec& spec = agent.spec;
  ContextVector ctx_f = f.factual.empty() ? default_context(spec)
                                          : parse_context(f.factual);
  ContextVector ctx_cf = parse_context(f.counterfactual);
  validate_context(spec, ctx_f);
  validate_context(spec, ctx_cf);
  check_usage(f.horizon >= 1 && f.warmup >= 1,
              "horizon and warmup must be >= 1");

  const MatT<F> cn_f = context_column(spec, ctx_f);
  const MatT<F> cn_cf = context_column(spec, ctx_cf);
  const int action_dim = agent.wm.sizes.action_dim;

  // Real warmup rollout under the factual context; the greedy policy picks
  // actions from the filtered state.
  Rng rng(f.seed);
  CartPole env(spec, ctx_f);
  std::array<double, 4> obs = env.reset(rng.next_u64());
  auto fstate = agent.wm.initial_filter_state(1);
  MatT<F> prev_action = MatT<F>::Zero(action_dim, 1);
  auto policy = greedy_policy<F>(&agent.ac, &agent.params, cn_f);

  auto obs_col = [](const std::array<double, 4>& o) {
    MatT<F> m(4, 1);
    for (int d = 0; d < 4; ++d) m(d, 0) = static_cast<F>(o[std::size_t(d)]);
    return m;
  };

  std::vector<MatT<F>> obs_seq{obs_col(obs)};
  std::vector<MatT<F>> act_seq{prev_action};
  for (int t = 0; t + 1 < f.warmup && !env.episode_over(); ++t) {
    fstate = agent.wm.filter_step(agent.params, fstate, obs_col(obs),
                                  prev_action, cn_f, rng);
    MatT<F> a = policy(fstate.h, fstate.z, rng);
    Eigen::Index best;
    a.col(0).maxCoeff(&best);
    StepResult sr = env.step(int(best));
    obs = sr.observation;
    prev_action.setZero();
    prev_action(best, 0) = F(1);
    obs_seq.push_back(obs_col(obs));
    act_seq.push_back(prev_action);
  }

  auto pair = dream_counterfactual<F>(
      agent.wm, agent.params, obs_seq, act_seq, cn_f, cn_cf,
      [&](const MatT<F>& c) {
        return greedy_policy<F>(&agent.ac, &agent.params, c);
      },
      f.horizon, rng);
  const auto divergence = decoded_divergence(pair.factual,
                                             pair.counterfactual, 4);

  const fs::path out = f.out.empty() ? out_root() / "dream" : fs::path(f.out);
  fs::create_directories(out);
  const std::string hash = agent.config.hash();

  auto branch_json = [](const ImaginedTrajectory<F>& tr, int step) {
    MatT<F> phys = decoded_physical_obs(tr, step, 4);
    nlohmann::json b;
    b["obs"] = {double(phys(0, 0)), double(phys(1, 0)), double(phys(2, 0)),
                double(phys(3, 0))};
    b["reward"] = double(tr.reward[std::size_t(step)](0, 0));
    b["cont"] = double(tr.cont[std::size_t(step)](0, 0));
    return b;
  };

  std::ostringstream jsonl;
  for (int step = 0; step < pair.factual.horizon(); ++step) {
    nlohmann::json line;
    line["step"] = step + 1;
    line["factual"] = branch_json(pair.factual, step);
    line["counterfactual"] = branch_json(pair.counterfactual, step);
    line["config_hash"] = hash;
    jsonl << line.dump() << "\n";
  }
  write_text(out / "dream.jsonl", jsonl.str());

  std::ostringstream csv;
  csv << "# config_hash " << hash << "\n";
  csv << "step,divergence\n";
  csv.precision(17);
  for (std::size_t i = 0; i < divergence.size(); ++i)
    csv << (i + 1) << "," << divergence[i] << "\n";
  write_text(out / "divergence.csv", csv.str());

  double dmax = 0;
  for (double d : divergence) dmax = std::max(dmax, d);
  std::cout << "dreamed " << pair.factual.horizon() << " steps from ("
            << num(ctx_f.at("gravity")) << "," << num(ctx_f.at("length"))
            << ") vs (" << num(ctx_cf.at("gravity")) << ","
            << num(ctx_cf.at("length")) << "); max divergence " << dmax
            << " -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct CsvRow {
  std::array<std::string, 9> field;  // raw text, for exact dedup
  std::uint64_t seed = 0;
  double gravity = 0, length = 0, mean_return = 0, normalized = 0;
  const std::string& method() const { return field[0]; }
  const std::string& regime() const { return field[1]; }
  const std::string& region() const { return field[5]; }
  const std::string& hash() const { return field[8]; }
};

std::vector<CsvRow> read_rows_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  check_usage(bool(std::getline(is, line)) &&
                  line == "method,regime,seed,gravity,length,region,"
                          "mean_return,normalized_score,config_hash",
              path.string() + ": not an evaluation rows file");
  std::vector<CsvRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    CsvRow row;
    std::stringstream ss(line);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',') && i < row.field.size())
      row.field[i++] = item;
    check_usage(i == row.field.size(), path.string() + ": malformed row");
    try {
      row.seed = std::stoull(row.field[2]);
      row.gravity = std::stod(row.field[3]);
      row.length = std::stod(row.field[4]);
      row.mean_return = std::stod(row.field[6]);
      row.normalized = std::stod(row.field[7]);
    } catch (const std::exception&) {
      throw UsageError(path.string() + ": malformed row");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct ReportFlags {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_report(const ReportFlags& f) {
  std::vector<CsvRow> rows;
  for (const auto& arg : f.inputs) {
    fs::path p(arg);
    if (fs::is_directory(p)) p /= "eval_rows.csv";
    auto part = read_rows_csv(p);
    rows.insert(rows.end(), part.begin(), part.end());
  }

  // Dedupe identical measurements; any disagreement between artifacts that
  // claim the same (method, regime, seed, context) cell is unmergeable.
  std::map<std::string, CsvRow> merged;
  std::map<std::string, std::string> run_hash;
  for (const auto& row : rows) {
    const std::string run_key =
        row.method() + "|" + row.regime() + "|" + row.field[2];
    auto [it, fresh] = run_hash.emplace(run_key, row.hash());
    check_usage(fresh || it->second == row.hash(),
                "config hash mismatch across artifacts for " + run_key);
    const std::string key =
        run_key + "|" + row.field[3] + "|" + row.field[4];
    auto [mit, inserted] = merged.emplace(key, row);
    check_usage(inserted || mit->second.field == row.field,
                "conflicting measurements for " + key);
  }

  // regime -> method -> region -> seed -> normalized scores
  std::map<std::string,
           std::map<std::string,
                    std::map<std::string,
                             std::map<std::uint64_t, std::vector<double>>>>>
      grouped;
  // regime -> method -> task -> scores (for pairwise comparisons)
  std::map<std::string,
           std::map<std::string, std::map<std::string, std::vector<double>>>>
      tasks;
  std::set<std::string> hashes;
  for (const auto& [key, row] : merged) {
    (void)key;
    grouped[row.regime()][row.method()][row.region()][row.seed].push_back(
        row.normalized);
    tasks[row.regime()][row.method()]
         [row.field[3] + "," + row.field[4]].push_back(row.normalized);
    hashes.insert(row.hash());
  }

  std::ostringstream csv, poi_csv;
  csv << "# config_hashes";
  for (const auto& h : hashes) csv << " " << h;
  csv << "\n";
  poi_csv << csv.str();
  csv << "method,regime,iqm_I,ci_low_I,ci_high_I,iqm_E,ci_low_E,ci_high_E,"
         "iqm_I+E,ci_low_I+E,ci_high_I+E\n";
  poi_csv << "regime,method_x,method_y,poi,ci_low,ci_high\n";
  csv.precision(10);
  poi_csv.precision(10);

  nlohmann::json j;
  j["config_hashes"] = std::vector<std::string>(hashes.begin(), hashes.end());
  for (const auto& [regime, methods] : grouped) {
    for (const auto& [method, regions] : methods) {
      csv << method << "," << regime;
      for (const char* region : {"I", "E", "I+E"}) {
        auto it = regions.find(region);
        if (it == regions.end()) {
          csv << ",,,";
          continue;
        }
        std::vector<double> all;
        for (const auto& [seed, scores] : it->second)
          all.insert(all.end(), scores.begin(), scores.end());
        const double point = iqm(all);
        nlohmann::json cell;
        cell["iqm"] = point;
        csv << "," << point;
        if (it->second.size() >= 2) {
          Rng rng(2026);
          auto [lo, hi] =
              stratified_bootstrap_ci(it->second, 2000, 0.95, rng);
          csv << "," << lo << "," << hi;
          cell["ci_low"] = lo;
          cell["ci_high"] = hi;
        } else {
          csv << ",,";
        }
        j["regimes"][regime][method][region] = cell;
      }
      csv << "\n";
    }

    // Pairwise probability of improvement over the shared task grid.
    for (const auto& [mx, tx] : tasks[regime])
      for (const auto& [my, ty] : tasks[regime]) {
        if (mx == my) continue;
        bool same_tasks = tx.size() == ty.size();
        if (same_tasks)
          for (const auto& [task, scores] : tx) {
            (void)scores;
            if (!ty.count(task)) {
              same_tasks = false;
              break;
            }
          }
        if (!same_tasks) continue;
        Rng rng(2026);
        PoiResult poi = probability_of_improvement(tx, ty, rng);
        poi_csv << regime << "," << mx << "," << my << "," << poi.p << ","
                << poi.ci_low << "," << poi.ci_high << "\n";
        j["poi"][regime][mx][my] = {{"p", poi.p},
                                    {"ci_low", poi.ci_low},
                                    {"ci_high", poi.ci_high}};
      }
  }

  const fs::path out = f.out.empty() ? out_root() / "report" : fs::path(f.out);
  fs::create_directories(out);
  write_text(out / "report.csv", csv.str());
  write_text(out / "poi.csv", poi_csv.str());
  write_text(out / "report.json", j.dump(2) + "\n");
  std::cout << "merged " << merged.size() << " measurements -> "
            << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contextual world-model RL laboratory"};
  app.require_subcommand(1);
  int rc = 0;

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train one agent");
  train->add_option("--config", tf.config, "JSON config file");
  tf.mode_opt = train->add_option("--mode", tf.mode,
                                  "conditioning mode: crssm, concat, hidden");
  tf.regime_opt = train->add_option(
      "--regime", tf.regime,
      "default | single:<dim> | dual | expert:<gravity>,<length>");
  tf.seed_opt = train->add_option("--seed", tf.seed, "training seed");
  tf.size_opt = train->add_option("--size", tf.size, "desk or paper");
  tf.steps_opt = train->add_option("--steps", tf.steps, "environment budget");
  tf.stop_opt = train->add_option("--early-stop", tf.early_stop,
                                  "stop once the last-10 mean return hits");
  tf.out_opt = train->add_option("--out", tf.out, "output directory");
  train->callback([&] { rc = cmd_train(tf); });

  ExpertFlags xf;
  auto* expert = app.add_subcommand(
      "expert", "train fixed-context reference agents and tabulate bounds");
  expert->add_option("--context", xf.contexts, "<gravity>,<length> (repeat)")
      ->required();
  expert->add_option("--seeds", xf.seeds, "comma list, best-of across seeds");
  expert->add_option("--steps", xf.steps, "environment budget per run");
  expert->add_option("--early-stop", xf.early_stop, "per-run stop threshold");
  expert->add_option("--episodes", xf.episodes, "evaluation episodes");
  expert->add_option("--size", xf.size, "desk or paper");
  expert->add_option("--runs-root", xf.runs_root,
                     "where per-context runs live (reused when present)");
  expert->add_option("--out", xf.out, "table path");
  expert->callback([&] { rc = cmd_expert(xf); });

  EvaluateFlags ef;
  auto* evaluate = app.add_subcommand(
      "evaluate", "run the zero-shot protocol for one method's seed runs");
  evaluate->add_option("runs", ef.runs, "run directories or checkpoints")
      ->required();
  evaluate->add_option("--expert-table", ef.table, "bounds table")->required();
  evaluate->add_option("--eval-regime", ef.eval_regime,
                       "dual or single:<dim> (default: training regime)");
  evaluate->add_option("--episodes", ef.episodes, "episodes per context");
  evaluate->add_option("--out", ef.out, "output directory");
  evaluate->callback([&] { rc = cmd_evaluate(ef); });

  DreamFlags df;
  auto* dream = app.add_subcommand(
      "dream", "factual vs counterfactual imagination from a trained model");
  dream->add_option("--checkpoint", df.checkpoint, "run dir or checkpoint")
      ->required();
  dream->add_option("--factual", df.factual,
                    "<gravity>,<length> (default: task default)");
  dream->add_option("--counterfactual", df.counterfactual,
                    "<gravity>,<length>")
      ->required();
  dream->add_option("--horizon", df.horizon, "imagined steps");
  dream->add_option("--warmup", df.warmup, "real observations before dreaming");
  dream->add_option("--seed", df.seed, "rollout seed");
  dream->add_option("--out", df.out, "output directory");
  dream->callback([&] { rc = cmd_dream(df); });

  ReportFlags rf;
  auto* report = app.add_subcommand(
      "report", "merge evaluation artifacts into aggregate tables");
  report->add_option("inputs", rf.inputs, "eval dirs or eval_rows.csv files")
      ->required();
  report->add_option("--out", rf.out, "output directory");
  report->callback([&] { rc = cmd_report(rf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "internal contract violated: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return rc;
}
