#pragma once

// Recurrent state-space world model with explicit context conditioning.
//
// Three modes share one architecture:
//   CRSSM  — context enters the GRU input and every decoder head;
//   CONCAT — context is appended to the observation channels (encoder input
//            and reconstruction target) and appears nowhere else;
//   HIDDEN — context appears nowhere.
//
// Per step: h_t = GRU(h_{t-1}, [z_{t-1}; a_{t-1}; (c)]), prior p(z|h_t),
// posterior q(z|h_t, obs channels), decoders p(obs), p(reward), p(continue)
// from [h_t; z_t; (c)].

#include <string>
#include <vector>

#include "crlab/common.hpp"
#include "crlab/nn.hpp"
#include "crlab/tensor.hpp"

namespace crlab {

enum class ConditioningMode { CRSSM, CONCAT, HIDDEN };

inline const char* to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::CRSSM:
      return "crssm";
    case ConditioningMode::CONCAT:
      return "concat";
    case ConditioningMode::HIDDEN:
      return "hidden";
  }
  return "?";
}

inline ConditioningMode mode_from_string(const std::string& s) {
  if (s == "crssm") return ConditioningMode::CRSSM;
  if (s == "concat") return ConditioningMode::CONCAT;
  if (s == "hidden") return ConditioningMode::HIDDEN;
  throw UsageError("unknown conditioning mode: " + s);
}

struct ModelSizes {
  int obs_dim = 4;
  int ctx_dim = 2;
  int action_dim = 2;
  int gru_units = 128;
  int mlp_units = 128;
  int mlp_layers = 2;
  int latent_groups = 8;
  int latent_classes = 8;
  int reward_bins = 255;
  double unimix = 0.01;

  static ModelSizes desk() { return ModelSizes{}; }

  static ModelSizes paper() {
    ModelSizes s;
    s.gru_units = 512;
    s.mlp_units = 512;
    s.latent_groups = 32;
    s.latent_classes = 32;
    return s;
  }
};

struct LossScales {
  double recon = 1.0;
  double dyn = 0.5;
  double rep = 0.1;
  double free_bits = 1.0;
};

inline constexpr double kLnTwoPi = 1.8378770664093453;

// Reward and value heads share one symlog-space bin layout.
template <class S>
std::vector<S> reward_bin_edges(int count) {
  return uniform_bins<S>(count, S(-20), S(20));
}

template <class S>
struct DecodedHeads {
  typename Tape<S>::Var obs_mean;       // obs target dim x n
  typename Tape<S>::Var reward_logits;  // reward_bins x n
  typename Tape<S>::Var cont_logit;     // 1 x n
};

template <class S>
struct SequenceInputs {
  // T entries each; matrices have one column per batch element.
  std::vector<MatT<S>> obs;          // raw observations, obs_dim x n
  std::vector<MatT<S>> prev_action;  // one-hot, action_dim x n
  MatT<S> ctx_norm;                  // normalized context, ctx_dim x n
};

template <class S>
struct SequenceTargets {
  // Stacked over steps, t-major: column t*n + j.
  MatT<S> obs_channels;  // obs target dim x (T*n)
  MatT<S> reward;        // 1 x (T*n), raw rewards
  MatT<S> cont;          // 1 x (T*n), {0,1}
  MatT<S> mask;          // 1 x (T*n), {0,1}
};

template <class S>
struct Rollout {
  int T = 0;
  int batch = 0;
  std::vector<typename Tape<S>::Var> h;  // per step, gru_units x n
  std::vector<typename Tape<S>::Var> z;  // per step, (L*K) x n
  typename Tape<S>::Var h_all, z_all;    // stacked over steps
  typename Tape<S>::Var post_probs_all;  // (L*K) x (T*n)
  typename Tape<S>::Var post_logits_all;
  typename Tape<S>::Var prior_logits_all, prior_probs_all;
  DecodedHeads<S> heads;  // decoded on the stacked states
};

template <class S>
struct WmLossValue {
  typename Tape<S>::Var total;
  double recon_obs = 0, recon_reward = 0, recon_cont = 0;
  double kl_dyn = 0, kl_rep = 0;          // floored means (as optimized)
  double kl_dyn_raw = 0, kl_rep_raw = 0;  // pre-floor means
};

template <class S>
class WorldModel {
 public:
  using Var = typename Tape<S>::Var;
  using Mat = MatT<S>;

  ModelSizes sizes;
  ConditioningMode mode;

  WorldModel(ModelSizes sz, ConditioningMode m) : sizes(sz), mode(m) {}

  int z_dim() const { return sizes.latent_groups * sizes.latent_classes; }
  int obs_target_dim() const {
    return sizes.obs_dim +
           (mode == ConditioningMode::CONCAT ? sizes.ctx_dim : 0);
  }
  int gru_input_dim() const {
    return z_dim() + sizes.action_dim +
           (mode == ConditioningMode::CRSSM ? sizes.ctx_dim : 0);
  }
  int decoder_input_dim() const {
    return sizes.gru_units + z_dim() +
           (mode == ConditioningMode::CRSSM ? sizes.ctx_dim : 0);
  }
  int encoder_input_dim() const { return sizes.gru_units + obs_target_dim(); }

  void register_params(ParamStore<S>& ps, Rng& rng) const {
    add_gru(ps, "wm/gru", gru_input_dim(), sizes.gru_units, rng);
    add_mlp(ps, "wm/prior", sizes.gru_units, sizes.mlp_units, sizes.mlp_layers,
            rng);
    add_dense_head(ps, "wm/prior/head", sizes.mlp_units, z_dim(), rng);
    add_mlp(ps, "wm/enc", encoder_input_dim(), sizes.mlp_units,
            sizes.mlp_layers, rng);
    add_dense_head(ps, "wm/enc/head", sizes.mlp_units, z_dim(), rng);
    add_mlp(ps, "wm/dec", decoder_input_dim(), sizes.mlp_units,
            sizes.mlp_layers, rng);
    add_dense_head(ps, "wm/dec/obs", sizes.mlp_units, obs_target_dim(), rng);
    add_dense_head(ps, "wm/dec/reward", sizes.mlp_units, sizes.reward_bins,
                   rng);
    add_dense_head(ps, "wm/dec/cont", sizes.mlp_units, 1, rng);
  }

  // h = 0, z = class-0 one-hots.
  std::pair<Mat, Mat> initial_state(int batch) const {
    check(batch >= 1, "initial_state: batch must be >= 1");
    Mat h = Mat::Zero(sizes.gru_units, batch);
    Mat z = Mat::Zero(z_dim(), batch);
    for (int g = 0; g < sizes.latent_groups; ++g)
      z.row(Eigen::Index(g) * sizes.latent_classes).setOnes();
    return {h, z};
  }

  // Symlog observation channels; CONCAT appends the normalized context. The
  // result serves as both encoder input and reconstruction target.
  Mat observation_channels(const Mat& obs_raw, const Mat& ctx_norm) const {
    check(obs_raw.rows() == sizes.obs_dim, "observation_channels: obs dim");
    Mat enc = symlog_mat(obs_raw);
    if (mode != ConditioningMode::CONCAT) return enc;
    check(ctx_norm.rows() == sizes.ctx_dim && ctx_norm.cols() == enc.cols(),
          "observation_channels: ctx shape");
    Mat out(enc.rows() + ctx_norm.rows(), enc.cols());
    out.topRows(enc.rows()) = enc;
    out.bottomRows(ctx_norm.rows()) = ctx_norm;
    return out;
  }

  Var sequence_model(Tape<S>& t, TapeParams<S>& p, Var h_prev, Var z_prev,
                     Var action, Var ctx) const {
    Var input = mode == ConditioningMode::CRSSM
                    ? t.concat_rows({z_prev, action, ctx})
                    : t.concat_rows({z_prev, action});
    return gru_cell(t, p, "wm/gru", h_prev, input);
  }

  Var prior_logits(Tape<S>& t, TapeParams<S>& p, Var h) const {
    return dense_head(t, p, "wm/prior/head",
                      mlp(t, p, "wm/prior", sizes.mlp_layers, h));
  }

  Var encoder_logits(Tape<S>& t, TapeParams<S>& p, Var h,
                     Var obs_channels_var) const {
    auto input = t.concat_rows({h, obs_channels_var});
    return dense_head(t, p, "wm/enc/head",
                      mlp(t, p, "wm/enc", sizes.mlp_layers, input));
  }

  DecodedHeads<S> decode(Tape<S>& t, TapeParams<S>& p, Var h, Var z,
                         Var ctx) const {
    Var input = mode == ConditioningMode::CRSSM ? t.concat_rows({h, z, ctx})
                                                : t.concat_rows({h, z});
    auto trunk = mlp(t, p, "wm/dec", sizes.mlp_layers, input);
    DecodedHeads<S> heads;
    heads.obs_mean = dense_head(t, p, "wm/dec/obs", trunk);
    heads.reward_logits = dense_head(t, p, "wm/dec/reward", trunk);
    heads.cont_logit = dense_head(t, p, "wm/dec/cont", trunk);
    return heads;
  }

  // Filtering recursion over a segment: per step GRU + posterior sample; the
  // prior and the decoders run once on the column-stacked states.
  Rollout<S> observe_sequence(Tape<S>& t, TapeParams<S>& p,
                              const SequenceInputs<S>& in, Rng& rng) const {
    const int T = static_cast<int>(in.obs.size());
    check(T >= 1, "observe_sequence: empty segment");
    check(in.prev_action.size() == std::size_t(T),
          "observe_sequence: action count");
    const int n = static_cast<int>(in.obs[0].cols());

    Rollout<S> r;
    r.T = T;
    r.batch = n;

    Var ctx;
    if (mode == ConditioningMode::CRSSM) ctx = t.constant(in.ctx_norm);

    auto [h0, z0] = initial_state(n);
    Var h_prev = t.constant(h0);
    Var z_prev = t.constant(z0);

    std::vector<Var> post_probs_steps, post_logits_steps;
    for (int step = 0; step < T; ++step) {
      Var a = t.constant(in.prev_action[step]);
      Var h = sequence_model(t, p, h_prev, z_prev, a, ctx);
      Var obs_ch =
          t.constant(observation_channels(in.obs[step], in.ctx_norm));
      Var post_l = encoder_logits(t, p, h, obs_ch);
      Var post_probs;
      Var z = categorical_sample_st(t, post_l, sizes.latent_groups,
                                    sizes.latent_classes,
                                    static_cast<S>(sizes.unimix), rng,
                                    &post_probs);
      r.h.push_back(h);
      r.z.push_back(z);
      post_probs_steps.push_back(post_probs);
      post_logits_steps.push_back(post_l);
      h_prev = h;
      z_prev = z;
    }

    r.h_all = t.concat_cols(std::span<const Var>(r.h));
    r.z_all = t.concat_cols(std::span<const Var>(r.z));
    r.post_probs_all =
        t.concat_cols(std::span<const Var>(post_probs_steps));
    r.post_logits_all =
        t.concat_cols(std::span<const Var>(post_logits_steps));

    r.prior_logits_all = prior_logits(t, p, r.h_all);
    check(t.val(r.prior_logits_all).allFinite(),
          "observe_sequence: non-finite prior logits");
    Var prior_probs = t.softmax_groups(r.prior_logits_all,
                                       sizes.latent_groups,
                                       sizes.latent_classes);
    if (sizes.unimix > 0) {
      prior_probs =
          t.add_scalar(t.scale(prior_probs, S(1) - static_cast<S>(sizes.unimix)),
                       static_cast<S>(sizes.unimix) /
                           static_cast<S>(sizes.latent_classes));
    }
    r.prior_probs_all = prior_probs;

    Var ctx_all;
    if (mode == ConditioningMode::CRSSM) {
      Mat tiled(sizes.ctx_dim, Eigen::Index(T) * n);
      for (int step = 0; step < T; ++step)
        tiled.middleCols(Eigen::Index(step) * n, n) = in.ctx_norm;
      ctx_all = t.constant(tiled);
    }
    r.heads = decode(t, p, r.h_all, r.z_all, ctx_all);
    return r;
  }

  // Targets stacked in the same t-major order as the rollout.
  SequenceTargets<S> stack_targets(const SequenceInputs<S>& in,
                                   const std::vector<MatT<S>>& reward,
                                   const std::vector<MatT<S>>& cont,
                                   const std::vector<MatT<S>>& mask) const {
    const int T = static_cast<int>(in.obs.size());
    const int n = static_cast<int>(in.obs[0].cols());
    SequenceTargets<S> tg;
    tg.obs_channels.resize(obs_target_dim(), Eigen::Index(T) * n);
    tg.reward.resize(1, Eigen::Index(T) * n);
    tg.cont.resize(1, Eigen::Index(T) * n);
    tg.mask.resize(1, Eigen::Index(T) * n);
    for (int step = 0; step < T; ++step) {
      tg.obs_channels.middleCols(Eigen::Index(step) * n, n) =
          observation_channels(in.obs[step], in.ctx_norm);
      tg.reward.middleCols(Eigen::Index(step) * n, n) = reward[step];
      tg.cont.middleCols(Eigen::Index(step) * n, n) = cont[step];
      tg.mask.middleCols(Eigen::Index(step) * n, n) = mask[step];
    }
    return tg;
  }

  WmLossValue<S> world_model_loss(Tape<S>& t, const Rollout<S>& r,
                                  const SequenceTargets<S>& tg,
                                  const LossScales& scales,
                                  std::span<const S> reward_bins) const {
    const S valid = tg.mask.sum();
    check(valid > 0, "world_model_loss: empty mask");
    Var mask = t.constant(tg.mask);
    auto masked_mean = [&](Var row) {
      return t.scale(t.sum_all(t.mul(row, mask)), S(1) / valid);
    };

    // Unit-variance Gaussian on the symlog observation channels.
    Var obs_err = t.sub(r.heads.obs_mean, t.constant(tg.obs_channels));
    Var obs_nll = t.add_scalar(
        t.scale(t.sum_over_rows(t.square(obs_err)), S(0.5)),
        static_cast<S>(0.5 * kLnTwoPi * obs_target_dim()));

    // Twohot cross-entropy over symlog rewards.
    Mat reward_targets =
        twohot_encode_row(Mat(symlog_mat(tg.reward)), reward_bins);
    Var reward_lp = t.log_softmax_groups(r.heads.reward_logits, 1,
                                         sizes.reward_bins);
    Var reward_nll = t.neg(
        t.sum_over_rows(t.mul(t.constant(reward_targets), reward_lp)));

    // Bernoulli continue head: softplus(l) - target * l.
    Var cont_target = t.constant(tg.cont);
    Var cont_nll = t.sub(t.softplus(r.heads.cont_logit),
                         t.mul(cont_target, r.heads.cont_logit));

    Var kl_dyn_row = categorical_kl(t, t.stopgrad(r.post_probs_all),
                                    r.prior_probs_all);
    Var kl_rep_row = categorical_kl(t, r.post_probs_all,
                                    t.stopgrad(r.prior_probs_all));
    const S min_kl = std::min(t.val(kl_dyn_row).minCoeff(),
                              t.val(kl_rep_row).minCoeff());
    if (min_kl < S(-1e-6))
      throw NumericalError("world_model_loss: negative KL " +
                           std::to_string(static_cast<double>(min_kl)));

    const S fb = static_cast<S>(scales.free_bits);
    Var kl_dyn_fl = t.maximum(kl_dyn_row, fb);
    Var kl_rep_fl = t.maximum(kl_rep_row, fb);

    Var m_obs = masked_mean(obs_nll);
    Var m_rew = masked_mean(reward_nll);
    Var m_cont = masked_mean(cont_nll);
    Var m_dyn = masked_mean(kl_dyn_fl);
    Var m_rep = masked_mean(kl_rep_fl);

    Var recon = t.add(t.add(m_obs, m_rew), m_cont);
    Var total = t.add(
        t.scale(recon, static_cast<S>(scales.recon)),
        t.add(t.scale(m_dyn, static_cast<S>(scales.dyn)),
              t.scale(m_rep, static_cast<S>(scales.rep))));
    if (!std::isfinite(static_cast<double>(t.scalar(total))))
      throw NumericalError("world_model_loss: non-finite total loss");

    WmLossValue<S> out;
    out.total = total;
    out.recon_obs = static_cast<double>(t.scalar(m_obs));
    out.recon_reward = static_cast<double>(t.scalar(m_rew));
    out.recon_cont = static_cast<double>(t.scalar(m_cont));
    out.kl_dyn = static_cast<double>(t.scalar(m_dyn));
    out.kl_rep = static_cast<double>(t.scalar(m_rep));
    // Raw (pre-floor) means, masked.
    auto raw_mean = [&](Var row) {
      Tape<S>* tp = &t;
      return static_cast<double>(
          tp->scalar(tp->scale(tp->sum_all(tp->mul(tp->stopgrad(row), mask)),
                               S(1) / valid)));
    };
    out.kl_dyn_raw = raw_mean(kl_dyn_row);
    out.kl_rep_raw = raw_mean(kl_rep_row);
    return out;
  }

  // One no-grad filtering step for action selection during data collection
  // and evaluation. Matrices carry one column per environment instance.
  struct FilterState {
    Mat h, z;
  };

  FilterState initial_filter_state(int batch) const {
    auto [h, z] = initial_state(batch);
    return {h, z};
  }

  FilterState filter_step(const ParamStore<S>& ps, const FilterState& prev,
                          const Mat& obs_raw, const Mat& prev_action,
                          const Mat& ctx_norm, Rng& rng) const {
    Tape<S> t(false);
    TapeParams<S> p(t, ps);
    Var ctx;
    if (mode == ConditioningMode::CRSSM) ctx = t.constant(ctx_norm);
    Var h = sequence_model(t, p, t.constant(prev.h), t.constant(prev.z),
                           t.constant(prev_action), ctx);
    Var post_l = encoder_logits(
        t, p, h, t.constant(observation_channels(obs_raw, ctx_norm)));
    Var z = categorical_sample_st(t, post_l, sizes.latent_groups,
                                  sizes.latent_classes,
                                  static_cast<S>(sizes.unimix), rng);
    return {t.val(h), t.val(z)};
  }
};

}  // namespace crlab
