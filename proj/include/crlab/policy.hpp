#pragma once

// Actor-critic trained purely on imagined trajectories: categorical actor,
// twohot critic over symlog values, lambda-returns, percentile return
// normalization, and an EMA-regularized critic target.

#include <algorithm>
#include <span>
#include <vector>

#include "crlab/imagine.hpp"
#include "crlab/worldmodel.hpp"

namespace crlab {

// Column-wise softmax on plain matrices (no tape).
template <class S>
MatT<S> softmax_cols(const MatT<S>& logits) {
  MatT<S> out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    auto col = logits.col(c);
    MatT<S> e = (col.array() - col.maxCoeff()).exp().matrix();
    out.col(c) = e / e.sum();
  }
  return out;
}

// Linear-interpolation percentile of an unsorted sample, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  check(!v.empty(), "percentile: empty sample");
  check(q >= 0.0 && q <= 100.0, "percentile: q out of range");
  std::sort(v.begin(), v.end());
  double rank = q / 100.0 * static_cast<double>(v.size() - 1);
  auto lo = static_cast<std::size_t>(rank);
  auto hi = std::min(lo + 1, v.size() - 1);
  double w = rank - static_cast<double>(lo);
  return v[lo] * (1.0 - w) + v[hi] * w;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

template <class S>
class ActorCritic {
 public:
  using Var = typename Tape<S>::Var;
  using Mat = MatT<S>;

  ModelSizes sizes;
  ConditioningMode mode;

  ActorCritic(ModelSizes sz, ConditioningMode m) : sizes(sz), mode(m) {}

  // The context reaches the policy only when the world model itself is
  // context-conditioned; the concat baseline's policy sees just the latent.
  bool context_in_input() const { return mode == ConditioningMode::CRSSM; }

  int input_dim() const {
    return sizes.gru_units + sizes.latent_groups * sizes.latent_classes +
           (context_in_input() ? sizes.ctx_dim : 0);
  }

  void register_params(ParamStore<S>& ps, Rng& rng) const {
    add_mlp(ps, "ac/actor", input_dim(), sizes.mlp_units, sizes.mlp_layers,
            rng);
    add_dense_head(ps, "ac/actor/head", sizes.mlp_units, sizes.action_dim,
                   rng);
    add_mlp(ps, "ac/critic", input_dim(), sizes.mlp_units, sizes.mlp_layers,
            rng);
    add_dense_head(ps, "ac/critic/head", sizes.mlp_units, sizes.reward_bins,
                   rng);
    init_ema(ps);
  }

  // The EMA critic starts as an exact copy.
  static void init_ema(ParamStore<S>& ps) {
    std::vector<std::pair<std::string, Mat>> copies;
    for (const auto& [name, value] : ps.entries)
      if (name.rfind("ac/critic/", 0) == 0)
        copies.emplace_back("ac/ema/" + name.substr(10), value);
    for (auto& [name, value] : copies) {
      if (ps.has(name))
        ps.at(name) = value;
      else
        ps.add(name, value);
    }
  }

  Var input(Tape<S>& t, Var h, Var z, Var ctx) const {
    return context_in_input() ? t.concat_rows({h, z, ctx})
                              : t.concat_rows({h, z});
  }

  Var actor_logits(Tape<S>& t, TapeParams<S>& p, Var h, Var z, Var ctx) const {
    return dense_head(
        t, p, "ac/actor/head",
        mlp(t, p, "ac/actor", sizes.mlp_layers, input(t, h, z, ctx)));
  }

  Var critic_logits(Tape<S>& t, TapeParams<S>& p, Var h, Var z, Var ctx,
                    const std::string& net = "ac/critic") const {
    return dense_head(t, p, net + "/head",
                      mlp(t, p, net, sizes.mlp_layers, input(t, h, z, ctx)));
  }

  // No-grad value estimate: symexp of the twohot expectation.
  Mat values(const ParamStore<S>& ps, const Mat& h, const Mat& z,
             const Mat& ctx_norm, const std::string& net = "ac/critic") const {
    Tape<S> t(false);
    TapeParams<S> p(t, ps);
    Var ctx;
    if (context_in_input()) ctx = t.constant(ctx_norm);
    Var logits = critic_logits(t, p, t.constant(h), t.constant(z), ctx, net);
    auto bins = reward_bin_edges<S>(sizes.reward_bins);
    return symexp_mat(twohot_expectation_row(softmax_cols(t.val(logits)),
                                             std::span<const S>(bins)));
  }
};

// Samples actions from the actor's softmax (no unimix on actions).
template <class S>
PolicyFn<S> sampling_policy(const ActorCritic<S>* ac, const ParamStore<S>* ps,
                            MatT<S> ctx_norm) {
  return [ac, ps, ctx = std::move(ctx_norm)](const MatT<S>& h,
                                             const MatT<S>& z, Rng& rng) {
    Tape<S> t(false);
    TapeParams<S> p(t, *ps);
    typename Tape<S>::Var cv;
    if (ac->context_in_input()) cv = t.constant(ctx);
    MatT<S> probs = softmax_cols(
        t.val(ac->actor_logits(t, p, t.constant(h), t.constant(z), cv)));
    MatT<S> a = MatT<S>::Zero(probs.rows(), probs.cols());
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      std::span<const S> col(probs.data() + c * probs.rows(),
                             std::size_t(probs.rows()));
      a(Eigen::Index(rng.categorical(col)), c) = S(1);
    }
    return a;
  };
}

// Argmax actions for evaluation; consumes no rng draws.
template <class S>
PolicyFn<S> greedy_policy(const ActorCritic<S>* ac, const ParamStore<S>* ps,
                          MatT<S> ctx_norm) {
  return [ac, ps, ctx = std::move(ctx_norm)](const MatT<S>& h,
                                             const MatT<S>& z, Rng&) {
    Tape<S> t(false);
    TapeParams<S> p(t, *ps);
    typename Tape<S>::Var cv;
    if (ac->context_in_input()) cv = t.constant(ctx);
    const MatT<S>& logits =
        t.val(ac->actor_logits(t, p, t.constant(h), t.constant(z), cv));
    MatT<S> a = MatT<S>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      Eigen::Index best;
      logits.col(c).maxCoeff(&best);
      a(best, c) = S(1);
    }
    return a;
  };
}

// ---------------------------------------------------------------------------
// Lambda-returns: R_t = r_t + gamma * n_t * ((1-lambda) v_{t+1} + lambda
// R_{t+1}), bootstrapped with R_H = v_H.
// ---------------------------------------------------------------------------

template <class S>
std::vector<typename Tape<S>::Var> lambda_returns(
    Tape<S>& t, std::span<const typename Tape<S>::Var> rewards,
    std::span<const typename Tape<S>::Var> values,
    std::span<const typename Tape<S>::Var> cont, S gamma, S lam) {
  const std::size_t H = rewards.size();
  check(H >= 1, "lambda_returns: empty horizon");
  check(values.size() == H + 1, "lambda_returns: need horizon+1 values");
  check(cont.size() == H, "lambda_returns: continue count");

  std::vector<typename Tape<S>::Var> out(H);
  auto next = values[H];
  for (std::size_t i = H; i-- > 0;) {
    auto mix = t.add(t.scale(values[i + 1], S(1) - lam), t.scale(next, lam));
    out[i] = t.add(rewards[i], t.scale(t.mul(cont[i], mix), gamma));
    next = out[i];
  }
  return out;
}

// Plain-matrix wrapper used wherever returns are targets, not variables.
template <class S>
std::vector<MatT<S>> lambda_returns_value(const std::vector<MatT<S>>& rewards,
                                          const std::vector<MatT<S>>& values,
                                          const std::vector<MatT<S>>& cont,
                                          S gamma, S lam) {
  Tape<S> t(false);
  using Var = typename Tape<S>::Var;
  auto lift = [&](const std::vector<MatT<S>>& ms) {
    std::vector<Var> vs;
    vs.reserve(ms.size());
    for (const auto& m : ms) vs.push_back(t.constant(m));
    return vs;
  };
  auto r = lift(rewards), v = lift(values), n = lift(cont);
  auto ret = lambda_returns(t, std::span<const Var>(r), std::span<const Var>(v),
                            std::span<const Var>(n), gamma, lam);
  std::vector<MatT<S>> out;
  out.reserve(ret.size());
  for (auto var : ret) out.push_back(t.val(var));
  return out;
}

// ---------------------------------------------------------------------------
// Return normalization: running decayed percentile range, divisor floored at
// the limit so small returns are never amplified.
// ---------------------------------------------------------------------------

struct ReturnNormalizer {
  double scale = 0.0;
  double decay = 0.99;
  double limit = 1.0;

  // Folds a batch of returns into the running range and returns the divisor.
  double update(std::span<const double> returns) {
    std::vector<double> v(returns.begin(), returns.end());
    double range = percentile(v, 95.0) - percentile(v, 5.0);
    scale = decay * scale + (1.0 - decay) * range;
    return divisor();
  }

  double divisor() const { return std::max(limit, scale); }
};

// ---------------------------------------------------------------------------
// Losses. Elements are weighted by the cumulative continue product so steps
// after a predicted termination contribute (almost) nothing.
// ---------------------------------------------------------------------------

template <class S>
struct ActorLossValue {
  typename Tape<S>::Var loss;
  double entropy = 0;  // weighted mean policy entropy, for metrics
};

// logits: action_dim x m; actions: one-hot constants; advantages/weights:
// 1 x m constants (advantages already normalized and detached).
template <class S>
ActorLossValue<S> actor_loss(Tape<S>& t, typename Tape<S>::Var logits,
                             const MatT<S>& actions, const MatT<S>& advantages,
                             const MatT<S>& weights, S entropy_scale) {
  const auto m = t.val(logits).cols();
  check(actions.cols() == m && advantages.cols() == m && weights.cols() == m,
        "actor_loss: column mismatch");
  const int action_dim = static_cast<int>(t.val(logits).rows());

  auto logp = t.log_softmax_groups(logits, 1, action_dim);
  auto logp_taken = t.sum_over_rows(t.mul(logp, t.constant(actions)));
  auto probs = t.softmax_groups(logits, 1, action_dim);
  auto entropy = t.neg(t.sum_over_rows(t.mul(probs, logp)));

  auto gain = t.add(t.mul(logp_taken, t.constant(advantages)),
                    t.scale(entropy, entropy_scale));
  auto weighted = t.mul(gain, t.constant(weights));
  auto loss = t.scale(t.neg(t.sum_all(weighted)), S(1) / S(m));

  ActorLossValue<S> out;
  out.loss = loss;
  out.entropy = static_cast<double>(
      (t.val(entropy).array() * weights.array()).sum() /
      std::max(S(1e-12), weights.sum()));
  return out;
}

// Twohot cross-entropy against the symlog lambda-returns plus one unit of
// cross-entropy against the EMA critic's (detached) distribution.
template <class S>
typename Tape<S>::Var critic_loss(Tape<S>& t, typename Tape<S>::Var logits,
                                  const MatT<S>& target_returns,
                                  const MatT<S>& ema_probs,
                                  const MatT<S>& weights,
                                  std::span<const S> bins,
                                  S regularizer_scale = S(1)) {
  const auto m = t.val(logits).cols();
  check(target_returns.cols() == m && ema_probs.cols() == m &&
            weights.cols() == m,
        "critic_loss: column mismatch");
  const int nbins = static_cast<int>(bins.size());

  MatT<S> targets =
      twohot_encode_row(MatT<S>(symlog_mat(target_returns)), bins);
  auto logp = t.log_softmax_groups(logits, 1, nbins);
  auto ce_target = t.neg(t.sum_over_rows(t.mul(t.constant(targets), logp)));
  auto ce_ema = t.neg(t.sum_over_rows(t.mul(t.constant(ema_probs), logp)));
  auto elem = t.add(ce_target, t.scale(ce_ema, regularizer_scale));
  return t.scale(t.sum_all(t.mul(elem, t.constant(weights))), S(1) / S(m));
}

// ema <- decay * ema + (1 - decay) * critic, parameter-wise.
template <class S>
void ema_update(ParamStore<S>& ps, double decay) {
  for (auto& [name, value] : ps.entries) {
    if (name.rfind("ac/ema/", 0) != 0) continue;
    const MatT<S>& live = ps.at("ac/critic/" + name.substr(7));
    value = static_cast<S>(decay) * value + static_cast<S>(1.0 - decay) * live;
  }
}

// Cumulative continue-product weights for imagined steps: w_0 = 1, then
// w_t = prod_{u<t} cont_u. Returns horizon rows (1 x n).
template <class S>
std::vector<MatT<S>> continue_weights(const ImaginedTrajectory<S>& tr) {
  std::vector<MatT<S>> w;
  check(!tr.h.empty(), "continue_weights: empty trajectory");
  const auto n = tr.h.front().cols();
  MatT<S> acc = MatT<S>::Ones(1, n);
  for (int step = 0; step < tr.horizon(); ++step) {
    w.push_back(acc);
    acc = acc.cwiseProduct(tr.cont[std::size_t(step)]);
  }
  return w;
}

}  // namespace crlab
