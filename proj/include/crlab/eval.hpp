#pragma once

// Zero-shot evaluation: greedy rollout protocol, expert/random bounding
// tables, score normalization, and the aggregation statistics (IQM,
// stratified bootstrap confidence intervals, probability of improvement).

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "crlab/env.hpp"
#include "crlab/trainer.hpp"
#include "json.hpp"

namespace crlab {

// ---------------------------------------------------------------------------
// Expert / random bounds
// ---------------------------------------------------------------------------

struct ExpertEntry {
  ContextVector context;
  double expert_return = 0;
  double random_return = 0;
};

struct ExpertTable {
  std::vector<ExpertEntry> entries;

  void validate(const ContextSpec& spec) const;
  nlohmann::json to_json() const;
  static ExpertTable from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ExpertTable load(const std::filesystem::path& path);
};

// Nearest entry under Euclidean distance with each dimension scaled by its
// training-range width; ties resolve to the earliest entry.
const ExpertEntry& nearest_expert(const ContextVector& ctx,
                                  const ExpertTable& table,
                                  const ContextSpec& spec);

// (return - random) / (expert - random).
double normalize_score(double ret, const ExpertEntry& entry);

// ---------------------------------------------------------------------------
// Aggregation statistics
// ---------------------------------------------------------------------------

// Interquartile mean: drop floor(n/4) values from each end of the sorted
// sample, average the rest.
double iqm(std::vector<double> scores);

// Percentile interval of the IQM under seed-level resampling: strata are
// seeds, and a resampled seed brings all of its contexts' scores with it.
std::pair<double, double> stratified_bootstrap_ci(
    const std::map<std::uint64_t, std::vector<double>>& scores_by_seed,
    int resamples, double level, Rng& rng);

struct PoiResult {
  double p = 0;
  double ci_low = 0, ci_high = 0;
};

// Mean over tasks of P(X > Y) + 0.5 P(X = Y) across all seed pairings;
// interval by stratified bootstrap over each side's seeds.
PoiResult probability_of_improvement(
    const std::map<std::string, std::vector<double>>& x_by_task,
    const std::map<std::string, std::vector<double>>& y_by_task, Rng& rng,
    int resamples = 2000, double level = 0.95);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// One protocol measurement: mean return of a method's seed on one context.
struct ReturnRow {
  std::string method;
  std::string regime_label;
  std::uint64_t seed = 0;
  ContextVector context;
  double mean_return = 0;
  std::string config_hash;
};

struct RegionSummary {
  double iqm_score = 0;
  double ci_low = 0, ci_high = 0;
  bool has_ci = false;
  int contexts = 0;
  int seeds = 0;
};

struct ReportRow {
  std::string method;
  std::string regime_label;
  std::uint64_t seed = 0;
  double gravity = 0, length = 0;
  Region region = Region::Interpolation;
  double mean_return = 0;
  double normalized_score = 0;
  std::string config_hash;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  // method -> region label -> aggregate
  std::map<std::string, std::map<std::string, RegionSummary>> regions;
  // x method -> y method -> probability x beats y
  std::map<std::string, std::map<std::string, PoiResult>> poi;

  nlohmann::json summary_json() const;
  void write_csv(std::ostream& out) const;
  // Seed-aggregated return-vs-context curves (plot-ready long format).
  void write_curves_csv(std::ostream& out) const;
};

// Normalizes every measurement against its nearest expert, groups by region,
// and aggregates. Empty region groups are absent from the summary.
EvalReport aggregate_report(const std::vector<ReturnRow>& raw,
                            const ExpertTable& table, const ContextSpec& spec,
                            const TrainingRegime& regime, Rng& rng);

// ---------------------------------------------------------------------------
// Rollout protocol
// ---------------------------------------------------------------------------

// Mean return of the greedy policy over `episodes` episodes; fully
// deterministic given (seed, context).
template <class S>
double protocol_return(const LoadedAgent<S>& agent, const ContextVector& ctx,
                       std::uint64_t seed, int episodes) {
  validate_context(agent.spec, ctx);
  check_usage(episodes >= 1, "protocol: episodes must be >= 1");
  auto cn_vec = normalize_context(agent.spec, ctx);
  MatT<S> cn(Eigen::Index(cn_vec.size()), 1);
  for (std::size_t d = 0; d < cn_vec.size(); ++d)
    cn(Eigen::Index(d), 0) = static_cast<S>(cn_vec[d]);
  auto policy = greedy_policy<S>(&agent.ac, &agent.params, cn);
  const int action_dim = agent.wm.sizes.action_dim;

  Rng rng(seed);
  double total = 0;
  for (int e = 0; e < episodes; ++e) {
    CartPole env(agent.spec, ctx);
    std::array<double, 4> obs = env.reset(rng.next_u64());
    auto fstate = agent.wm.initial_filter_state(1);
    MatT<S> prev_action = MatT<S>::Zero(action_dim, 1);
    double ep_return = 0;
    while (!env.episode_over()) {
      MatT<S> obs_col(4, 1);
      for (int d = 0; d < 4; ++d)
        obs_col(d, 0) = static_cast<S>(obs[std::size_t(d)]);
      fstate = agent.wm.filter_step(agent.params, fstate, obs_col, prev_action,
                                    cn, rng);
      MatT<S> a = policy(fstate.h, fstate.z, rng);
      Eigen::Index best;
      a.col(0).maxCoeff(&best);
      StepResult sr = env.step(int(best));
      ep_return += sr.reward;
      obs = sr.observation;
      prev_action.setZero();
      prev_action(best, 0) = S(1);
    }
    total += ep_return;
  }
  return total / episodes;
}

// One row per (seed, context).
template <class S>
std::vector<ReturnRow> run_protocol(const LoadedAgent<S>& agent,
                                    const std::string& method,
                                    const std::string& regime_label,
                                    const std::vector<ContextVector>& contexts,
                                    int episodes,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::string& config_hash) {
  check_usage(!contexts.empty() && !seeds.empty(),
              "protocol: need contexts and seeds");
  std::vector<ReturnRow> rows;
  rows.reserve(contexts.size() * seeds.size());
  for (std::uint64_t seed : seeds)
    for (const auto& ctx : contexts)
      rows.push_back({method, regime_label, seed, ctx,
                      protocol_return(agent, ctx, seed, episodes),
                      config_hash});
  return rows;
}

// Mean return of the uniform-random policy; no model involved.
double random_policy_return(const ContextSpec& spec, const ContextVector& ctx,
                            std::uint64_t seed, int episodes);

}  // namespace crlab
