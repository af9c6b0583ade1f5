#pragma once

// Latent imagination: roll the world model forward from posterior start
// states using the policy and the learned prior — real observations are never
// consulted past the start (nothing here can reach the encoder). Also the
// counterfactual variant that replays the same dream under a different
// context.

#include <functional>
#include <vector>

#include "crlab/worldmodel.hpp"

namespace crlab {

// Maps (h, z) to a one-hot action matrix; context handling lives inside the
// callback because the actor's context rule differs from the world model's.
template <class S>
using PolicyFn =
    std::function<MatT<S>(const MatT<S>& h, const MatT<S>& z, Rng& rng)>;

// Builds a policy bound to one context (for counterfactual branches).
template <class S>
using ContextPolicy = std::function<PolicyFn<S>(const MatT<S>& ctx_norm)>;

template <class S>
struct ImaginedTrajectory {
  MatT<S> ctx_norm;                  // ctx_dim x n, constant along the rollout
  std::vector<MatT<S>> h, z;         // horizon+1 states, start first
  std::vector<MatT<S>> action;       // horizon one-hot actions
  std::vector<MatT<S>> reward;       // horizon rows (1 x n), physical scale
  std::vector<MatT<S>> cont;         // horizon rows (1 x n), P(continue)
  std::vector<MatT<S>> decoded_obs;  // horizon head outputs (channel space)
  int horizon() const { return static_cast<int>(action.size()); }
};

// Decoded physical observation at imagined step `step` (1-based states; step
// ranges over [0, horizon)): symexp of the observation rows, context
// reconstruction rows dropped.
template <class S>
MatT<S> decoded_physical_obs(const ImaginedTrajectory<S>& tr, int step,
                             int obs_dim) {
  check(step >= 0 && step < tr.horizon(), "decoded_physical_obs: step");
  return symexp_mat(MatT<S>(tr.decoded_obs[std::size_t(step)].topRows(obs_dim)));
}

template <class S>
ImaginedTrajectory<S> imagine(const WorldModel<S>& wm, const ParamStore<S>& ps,
                              const MatT<S>& h0, const MatT<S>& z0,
                              const MatT<S>& ctx_norm,
                              const PolicyFn<S>& policy, int horizon,
                              Rng& rng) {
  check(horizon >= 0, "imagine: negative horizon");
  const auto n = h0.cols();
  check(h0.rows() == wm.sizes.gru_units && z0.rows() == wm.z_dim() &&
            z0.cols() == n,
        "imagine: start state shape");
  check(ctx_norm.rows() == wm.sizes.ctx_dim && ctx_norm.cols() == n,
        "imagine: context shape");

  ImaginedTrajectory<S> tr;
  tr.ctx_norm = ctx_norm;
  tr.h.push_back(h0);
  tr.z.push_back(z0);
  if (horizon == 0) return tr;

  using Var = typename Tape<S>::Var;
  Tape<S> t(false);
  TapeParams<S> p(t, ps);
  Var ctx;
  if (wm.mode == ConditioningMode::CRSSM) ctx = t.constant(ctx_norm);

  Var h_prev = t.constant(h0);
  Var z_prev = t.constant(z0);
  std::vector<Var> hs, zs;
  for (int step = 0; step < horizon; ++step) {
    MatT<S> a = policy(t.val(h_prev), t.val(z_prev), rng);
    check(a.rows() == wm.sizes.action_dim && a.cols() == n,
          "imagine: policy action shape");
    Var h = wm.sequence_model(t, p, h_prev, z_prev, t.constant(a), ctx);
    Var z = categorical_sample_st(t, wm.prior_logits(t, p, h),
                                  wm.sizes.latent_groups,
                                  wm.sizes.latent_classes,
                                  static_cast<S>(wm.sizes.unimix), rng);
    tr.action.push_back(std::move(a));
    tr.h.push_back(t.val(h));
    tr.z.push_back(t.val(z));
    hs.push_back(h);
    zs.push_back(z);
    h_prev = h;
    z_prev = z;
  }

  // Reward/continue/observation heads decoded once on the stacked states.
  Var h_all = t.concat_cols(std::span<const Var>(hs));
  Var z_all = t.concat_cols(std::span<const Var>(zs));
  Var ctx_all;
  if (wm.mode == ConditioningMode::CRSSM) {
    MatT<S> tiled(wm.sizes.ctx_dim, Eigen::Index(horizon) * n);
    for (int step = 0; step < horizon; ++step)
      tiled.middleCols(Eigen::Index(step) * n, n) = ctx_norm;
    ctx_all = t.constant(tiled);
  }
  auto heads = wm.decode(t, p, h_all, z_all, ctx_all);

  auto bins = reward_bin_edges<S>(wm.sizes.reward_bins);
  MatT<S> reward_probs = t.val(t.softmax_groups(heads.reward_logits, 1,
                                                wm.sizes.reward_bins));
  MatT<S> reward_all = symexp_mat(
      twohot_expectation_row(reward_probs, std::span<const S>(bins)));
  MatT<S> cont_all = t.val(t.sigmoid(heads.cont_logit));
  const MatT<S>& obs_all = t.val(heads.obs_mean);

  for (int step = 0; step < horizon; ++step) {
    tr.reward.push_back(reward_all.middleCols(Eigen::Index(step) * n, n));
    tr.cont.push_back(cont_all.middleCols(Eigen::Index(step) * n, n));
    tr.decoded_obs.push_back(obs_all.middleCols(Eigen::Index(step) * n, n));
  }
  return tr;
}

template <class S>
struct DreamPair {
  ImaginedTrajectory<S> factual, counterfactual;
};

// Infers the start state from an observation prefix under the factual
// context, then dreams the same rollout under both contexts. The two branches
// consume identical rng draws, so any divergence is attributable to the
// context switch alone.
template <class S>
DreamPair<S> dream_counterfactual(const WorldModel<S>& wm,
                                  const ParamStore<S>& ps,
                                  const std::vector<MatT<S>>& obs,
                                  const std::vector<MatT<S>>& prev_actions,
                                  const MatT<S>& ctx_f, const MatT<S>& ctx_cf,
                                  const ContextPolicy<S>& policy_for,
                                  int horizon, Rng& rng) {
  if (wm.mode == ConditioningMode::HIDDEN)
    throw UsageError(
        "dream_counterfactual: hidden mode has no context input to switch");
  check(ctx_f.rows() == wm.sizes.ctx_dim && ctx_cf.rows() == wm.sizes.ctx_dim &&
            ctx_f.cols() == ctx_cf.cols(),
        "dream_counterfactual: context shape");

  SequenceInputs<S> in;
  in.obs = obs;
  in.prev_action = prev_actions;
  in.ctx_norm = ctx_f;
  Tape<S> t(false);
  TapeParams<S> p(t, ps);
  auto rollout = wm.observe_sequence(t, p, in, rng);
  MatT<S> h_start = t.val(rollout.h.back());
  MatT<S> z_start = t.val(rollout.z.back());

  Rng branch_f = rng;  // identical streams for the two branches
  Rng branch_cf = rng;
  DreamPair<S> out;
  out.factual = imagine(wm, ps, h_start, z_start, ctx_f, policy_for(ctx_f),
                        horizon, branch_f);
  out.counterfactual = imagine(wm, ps, h_start, z_start, ctx_cf,
                               policy_for(ctx_cf), horizon, branch_cf);
  return out;
}

// Mean L2 distance between decoded physical observations per step.
template <class S>
std::vector<double> decoded_divergence(const ImaginedTrajectory<S>& a,
                                       const ImaginedTrajectory<S>& b,
                                       int obs_dim) {
  check(a.horizon() == b.horizon(), "decoded_divergence: horizon mismatch");
  std::vector<double> out;
  for (int step = 0; step < a.horizon(); ++step) {
    MatT<S> da = decoded_physical_obs(a, step, obs_dim);
    MatT<S> db = decoded_physical_obs(b, step, obs_dim);
    double acc = 0;
    for (Eigen::Index c = 0; c < da.cols(); ++c)
      acc += static_cast<double>((da.col(c) - db.col(c)).norm());
    out.push_back(acc / static_cast<double>(da.cols()));
  }
  return out;
}

}  // namespace crlab
