#include "crlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace crlab {

// ---------------------------------------------------------------------------
// Expert table
// ---------------------------------------------------------------------------

void ExpertTable::validate(const ContextSpec& spec) const {
  for (const auto& e : entries) {
    validate_context(spec, e.context);
    check(e.expert_return >= e.random_return,
          "expert table: expert below random");
  }
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (std::size_t j = i + 1; j < entries.size(); ++j)
      check(entries[i].context != entries[j].context,
            "expert table: duplicate context");
}

nlohmann::json ExpertTable::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"context", e.context},
                   {"expert_return", e.expert_return},
                   {"random_return", e.random_return}});
  return {{"entries", std::move(arr)}};
}

ExpertTable ExpertTable::from_json(const nlohmann::json& j) {
  ExpertTable t;
  for (const auto& e : j.at("entries"))
    t.entries.push_back({e.at("context").get<ContextVector>(),
                         e.at("expert_return").get<double>(),
                         e.at("random_return").get<double>()});
  return t;
}

void ExpertTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write expert table: " + path.string());
  out << to_json().dump(2) << "\n";
}

ExpertTable ExpertTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read expert table: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("expert table is not valid JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

const ExpertEntry& nearest_expert(const ContextVector& ctx,
                                  const ExpertTable& table,
                                  const ContextSpec& spec) {
  check_usage(!table.entries.empty(), "nearest_expert: empty table");
  validate_context(spec, ctx);
  const ExpertEntry* best = nullptr;
  double best_d2 = 0;
  for (const auto& e : table.entries) {
    double d2 = 0;
    for (const auto& d : spec.dims) {
      const double width = d.train_high - d.train_low;
      const double diff = (ctx.at(d.name) - e.context.at(d.name)) / width;
      d2 += diff * diff;
    }
    if (best == nullptr || d2 < best_d2) {
      best = &e;
      best_d2 = d2;
    }
  }
  return *best;
}

double normalize_score(double ret, const ExpertEntry& entry) {
  check_usage(entry.expert_return > entry.random_return,
              "normalize_score: degenerate expert entry (expert == random)");
  return (ret - entry.random_return) /
         (entry.expert_return - entry.random_return);
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

double iqm(std::vector<double> scores) {
  check_usage(!scores.empty(), "iqm: empty sample");
  std::sort(scores.begin(), scores.end());
  const std::size_t drop = scores.size() / 4;
  double sum = 0;
  for (std::size_t i = drop; i < scores.size() - drop; ++i) sum += scores[i];
  return sum / double(scores.size() - 2 * drop);
}

std::pair<double, double> stratified_bootstrap_ci(
    const std::map<std::uint64_t, std::vector<double>>& scores_by_seed,
    int resamples, double level, Rng& rng) {
  check_usage(scores_by_seed.size() >= 2,
              "bootstrap: need at least two seeds to stratify");
  check_usage(resamples >= 1 && level > 0 && level < 1,
              "bootstrap: bad resample count or level");
  std::vector<const std::vector<double>*> strata;
  strata.reserve(scores_by_seed.size());
  for (const auto& [seed, scores] : scores_by_seed) {
    check_usage(!scores.empty(), "bootstrap: seed with no scores");
    strata.push_back(&scores);
  }
  const int m = int(strata.size());
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  std::vector<double> pool;
  for (int r = 0; r < resamples; ++r) {
    pool.clear();
    for (int k = 0; k < m; ++k) {
      const auto& s = *strata[std::size_t(rng.uniform_int(m))];
      pool.insert(pool.end(), s.begin(), s.end());
    }
    stats[std::size_t(r)] = iqm(pool);
  }
  const double alpha = (1.0 - level) / 2.0;
  return {percentile(stats, 100.0 * alpha), percentile(stats, 100.0 * (1.0 - alpha))};
}

namespace {

double poi_point(const std::map<std::string, std::vector<double>>& x_by_task,
                 const std::map<std::string, std::vector<double>>& y_by_task,
                 const std::vector<std::size_t>* x_idx,
                 const std::vector<std::size_t>* y_idx) {
  double task_sum = 0;
  for (const auto& [task, xs] : x_by_task) {
    const auto& ys = y_by_task.at(task);
    const std::size_t nx = x_idx ? x_idx->size() : xs.size();
    const std::size_t ny = y_idx ? y_idx->size() : ys.size();
    double wins = 0;
    for (std::size_t i = 0; i < nx; ++i)
      for (std::size_t j = 0; j < ny; ++j) {
        const double x = xs[x_idx ? (*x_idx)[i] : i];
        const double y = ys[y_idx ? (*y_idx)[j] : j];
        if (x > y)
          wins += 1;
        else if (x == y)
          wins += 0.5;
      }
    task_sum += wins / double(nx * ny);
  }
  return task_sum / double(x_by_task.size());
}

}  // namespace

PoiResult probability_of_improvement(
    const std::map<std::string, std::vector<double>>& x_by_task,
    const std::map<std::string, std::vector<double>>& y_by_task, Rng& rng,
    int resamples, double level) {
  check_usage(!x_by_task.empty(), "poi: no tasks");
  check_usage(x_by_task.size() == y_by_task.size(), "poi: task sets differ");
  std::size_t nx = 0, ny = 0;
  for (const auto& [task, xs] : x_by_task) {
    auto it = y_by_task.find(task);
    check_usage(it != y_by_task.end(), "poi: task sets differ: " + task);
    check_usage(!xs.empty() && !it->second.empty(), "poi: empty task scores");
    if (nx == 0) {
      nx = xs.size();
      ny = it->second.size();
    }
    check_usage(xs.size() == nx && it->second.size() == ny,
                "poi: ragged per-task seed counts");
  }

  PoiResult out;
  out.p = poi_point(x_by_task, y_by_task, nullptr, nullptr);

  // Resampling seeds on both sides; a drawn seed keeps all its tasks.
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  std::vector<std::size_t> xi(nx), yi(ny);
  for (int r = 0; r < resamples; ++r) {
    for (auto& i : xi) i = std::size_t(rng.uniform_int(int(nx)));
    for (auto& j : yi) j = std::size_t(rng.uniform_int(int(ny)));
    stats[std::size_t(r)] = poi_point(x_by_task, y_by_task, &xi, &yi);
  }
  const double alpha = (1.0 - level) / 2.0;
  out.ci_low = percentile(stats, 100.0 * alpha);
  out.ci_high = percentile(stats, 100.0 * (1.0 - alpha));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

namespace {

std::string context_key(const ContextVector& ctx) {
  std::ostringstream os;
  for (const auto& [k, v] : ctx) os << k << "=" << v << ";";
  return os.str();
}

}  // namespace

EvalReport aggregate_report(const std::vector<ReturnRow>& raw,
                            const ExpertTable& table, const ContextSpec& spec,
                            const TrainingRegime& regime, Rng& rng) {
  check_usage(!raw.empty(), "aggregate_report: no measurements");
  table.validate(spec);
  EvalReport report;
  report.rows.reserve(raw.size());

  for (const auto& r : raw) {
    check(r.mean_return >= 0.0 && r.mean_return <= 500.0,
          "aggregate_report: return outside CartPole bounds");
    const ExpertEntry& e = nearest_expert(r.context, table, spec);
    ReportRow row;
    row.method = r.method;
    row.regime_label = r.regime_label;
    row.seed = r.seed;
    row.gravity = r.context.at("gravity");
    row.length = r.context.at("length");
    row.region = classify_region(r.context, spec, regime);
    row.mean_return = r.mean_return;
    row.normalized_score = normalize_score(r.mean_return, e);
    row.config_hash = r.config_hash;
    report.rows.push_back(std::move(row));
  }

  // Per-(method, region) aggregates.
  std::map<std::string,
           std::map<std::string, std::map<std::uint64_t, std::vector<double>>>>
      grouped;
  for (const auto& row : report.rows)
    grouped[row.method][to_string(row.region)][row.seed].push_back(
        row.normalized_score);
  for (const auto& [method, by_region] : grouped)
    for (const auto& [region, by_seed] : by_region) {
      RegionSummary s;
      std::vector<double> all;
      std::size_t n_ctx = 0;
      for (const auto& [seed, scores] : by_seed) {
        all.insert(all.end(), scores.begin(), scores.end());
        n_ctx = std::max(n_ctx, scores.size());
      }
      s.iqm_score = iqm(all);
      s.contexts = int(n_ctx);
      s.seeds = int(by_seed.size());
      if (by_seed.size() >= 2) {
        auto [lo, hi] = stratified_bootstrap_ci(by_seed, 2000, 0.95, rng);
        s.ci_low = lo;
        s.ci_high = hi;
        s.has_ci = true;
      }
      report.regions[method][region] = s;
    }

  // Pairwise probability of improvement over tasks = contexts.
  std::map<std::string, std::map<std::string, std::vector<double>>> by_method;
  for (const auto& r : raw) {
    const ExpertEntry& e = nearest_expert(r.context, table, spec);
    by_method[r.method][context_key(r.context)].push_back(
        normalize_score(r.mean_return, e));
  }
  for (const auto& [mx, tx] : by_method)
    for (const auto& [my, ty] : by_method) {
      if (mx == my) continue;
      if (tx.size() != ty.size()) continue;  // different context sets
      report.poi[mx][my] = probability_of_improvement(tx, ty, rng);
    }
  return report;
}

nlohmann::json EvalReport::summary_json() const {
  nlohmann::json j;
  for (const auto& [method, by_region] : regions)
    for (const auto& [region, s] : by_region) {
      nlohmann::json e = {{"iqm", s.iqm_score},
                          {"contexts", s.contexts},
                          {"seeds", s.seeds}};
      if (s.has_ci) {
        e["ci_low"] = s.ci_low;
        e["ci_high"] = s.ci_high;
      }
      j["regions"][method][region] = std::move(e);
    }
  for (const auto& [mx, by_y] : poi)
    for (const auto& [my, p] : by_y)
      j["poi"][mx][my] = {
          {"p", p.p}, {"ci_low", p.ci_low}, {"ci_high", p.ci_high}};
  std::map<std::string, std::string> hashes;
  for (const auto& row : rows)
    hashes[row.method + "/s" + std::to_string(row.seed)] = row.config_hash;
  j["config_hashes"] = std::move(hashes);
  return j;
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "method,regime,seed,gravity,length,region,mean_return,"
         "normalized_score,config_hash\n";
  for (const auto& r : rows)
    out << r.method << ',' << r.regime_label << ',' << r.seed << ','
        << r.gravity << ',' << r.length << ',' << to_string(r.region) << ','
        << r.mean_return << ',' << r.normalized_score << ',' << r.config_hash
        << "\n";
}

void EvalReport::write_curves_csv(std::ostream& out) const {
  struct Acc {
    double ret = 0, score = 0;
    int n = 0;
    Region region = Region::Interpolation;
  };
  std::map<std::string, std::map<std::pair<double, double>, Acc>> curves;
  for (const auto& r : rows) {
    Acc& a = curves[r.method][{r.gravity, r.length}];
    a.ret += r.mean_return;
    a.score += r.normalized_score;
    a.region = r.region;
    ++a.n;
  }
  out << "method,gravity,length,region,mean_return,normalized_score\n";
  for (const auto& [method, pts] : curves)
    for (const auto& [gl, a] : pts)
      out << method << ',' << gl.first << ',' << gl.second << ','
          << to_string(a.region) << ',' << a.ret / a.n << ','
          << a.score / a.n << "\n";
}

// ---------------------------------------------------------------------------
// Random-policy bound
// ---------------------------------------------------------------------------

double random_policy_return(const ContextSpec& spec, const ContextVector& ctx,
                            std::uint64_t seed, int episodes) {
  check_usage(episodes >= 1, "protocol: episodes must be >= 1");
  Rng rng(seed);
  double total = 0;
  for (int e = 0; e < episodes; ++e) {
    CartPole env(spec, ctx);
    env.reset(rng.next_u64());
    double ep_return = 0;
    while (!env.episode_over()) ep_return += env.step(rng.uniform_int(2)).reward;
    total += ep_return;
  }
  return total / episodes;
}

}  // namespace crlab
