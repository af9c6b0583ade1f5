#include "crlab/enumerable.hpp"

#include <cmath>

namespace crlab {

namespace {

using Mat = MatT<double>;
using WM = WorldModel<double>;
using T = Tape<double>;

void check_inputs(const EnumerableModelSpec& spec,
                  const std::vector<Mat>& obs, const std::vector<Mat>& actions,
                  const Mat& ctx_norm) {
  spec.validate();
  check(static_cast<int>(obs.size()) == spec.horizon,
        "enumerable: observation count != horizon");
  check(actions.size() == obs.size(), "enumerable: action count != horizon");
  for (const auto& o : obs)
    check(o.rows() == spec.sizes.obs_dim && o.cols() == 1,
          "enumerable: observation shape");
  for (const auto& a : actions)
    check(a.rows() == spec.sizes.action_dim && a.cols() == 1,
          "enumerable: action shape");
  check(ctx_norm.rows() == spec.sizes.ctx_dim && ctx_norm.cols() == 1,
        "enumerable: context shape");
}

// Per-node quantities shared by both enumerations: the deterministic state
// after consuming (z_prev, a_t), the prior over the next class, the filtering
// posterior, and the emission log-density for each candidate class.
struct NodeEval {
  Mat h;                       // gru_units x 1
  Eigen::VectorXd log_prior;   // K
  Eigen::VectorXd log_post;    // K
  Eigen::VectorXd emission;    // K, ln p(o_t | h, class k)
};

struct Enumerator {
  const EnumerableModelSpec& spec;
  const WM model;
  const std::vector<Mat>& obs;
  const std::vector<Mat>& actions;
  const Mat& ctx_norm;
  T tape{false};
  TapeParams<double> params{tape, spec.params};

  Enumerator(const EnumerableModelSpec& s, const std::vector<Mat>& o,
             const std::vector<Mat>& a, const Mat& c)
      : spec(s), model(s.sizes, s.mode), obs(o), actions(a), ctx_norm(c) {}

  NodeEval eval(int t, const Mat& h_prev, const Mat& z_prev) {
    const int K = spec.num_classes();
    typename T::Var ctx;
    if (spec.mode == ConditioningMode::CRSSM) ctx = tape.constant(ctx_norm);

    auto h = model.sequence_model(tape, params, tape.constant(h_prev),
                                  tape.constant(z_prev),
                                  tape.constant(actions[t]), ctx);
    Mat obs_ch = model.observation_channels(obs[t], ctx_norm);
    auto prior_l = model.prior_logits(tape, params, h);
    auto post_l =
        model.encoder_logits(tape, params, h, tape.constant(obs_ch));

    auto smoothed = [&](typename T::Var logits) {
      auto p = tape.softmax_groups(logits, 1, K);
      return tape.add_scalar(tape.scale(p, 1.0 - spec.sizes.unimix),
                             spec.sizes.unimix / K);
    };
    Eigen::VectorXd prior_p = tape.val(smoothed(prior_l)).col(0);
    Eigen::VectorXd post_p = tape.val(smoothed(post_l)).col(0);

    // All K candidate emissions in one batched decode.
    Mat h_rep = tape.val(h).replicate(1, K);
    Mat z_id = Mat::Identity(K, K);
    typename T::Var ctx_rep;
    if (spec.mode == ConditioningMode::CRSSM)
      ctx_rep = tape.constant(Mat(ctx_norm.replicate(1, K)));
    auto heads = model.decode(tape, params, tape.constant(h_rep),
                              tape.constant(z_id), ctx_rep);
    const Mat& mean = tape.val(heads.obs_mean);
    const int D = model.obs_target_dim();

    NodeEval out;
    out.h = tape.val(h);
    out.log_prior = prior_p.array().log();
    out.log_post = post_p.array().log();
    out.emission.resize(K);
    for (int k = 0; k < K; ++k) {
      double sq = (mean.col(k) - obs_ch.col(0)).squaredNorm();
      out.emission(k) = -0.5 * sq - 0.5 * D * kLnTwoPi;
    }
    return out;
  }
};

double logsumexp(const Eigen::VectorXd& v) {
  double mx = v.maxCoeff();
  return std::log((v.array() - mx).exp().sum()) + mx;
}

}  // namespace

void EnumerableModelSpec::validate() const {
  check(sizes.latent_groups == 1, "enumerable: latent_groups must be 1");
  check(sizes.latent_classes >= 1, "enumerable: need at least one class");
  check(horizon >= 1, "enumerable: need at least one step");
  double paths = std::pow(static_cast<double>(sizes.latent_classes), horizon);
  if (paths > 1e5)
    throw ContractError("enumerable: " + std::to_string(paths) +
                        " latent paths exceed the enumeration budget of 1e5");
  check(params.has("wm/gru/wx"), "enumerable: parameters not registered");
}

EnumerableModelSpec random_enumerable(int num_classes, int horizon,
                                      ConditioningMode mode, Rng& rng) {
  EnumerableModelSpec spec;
  spec.sizes.obs_dim = 3;
  spec.sizes.ctx_dim = 2;
  spec.sizes.action_dim = 2;
  spec.sizes.gru_units = 5;
  spec.sizes.mlp_units = 4;
  spec.sizes.mlp_layers = 1;
  spec.sizes.latent_groups = 1;
  spec.sizes.latent_classes = num_classes;
  spec.mode = mode;
  spec.horizon = horizon;

  WM model(spec.sizes, mode);
  model.register_params(spec.params, rng);
  for (auto& [name, value] : spec.params.entries)
    for (Eigen::Index j = 0; j < value.cols(); ++j)
      for (Eigen::Index i = 0; i < value.rows(); ++i)
        value(i, j) += rng.uniform(-0.2, 0.2);

  spec.validate();
  return spec;
}

double exact_loglik(const EnumerableModelSpec& spec,
                    const std::vector<Mat>& obs,
                    const std::vector<Mat>& actions, const Mat& ctx_norm) {
  check_inputs(spec, obs, actions, ctx_norm);
  Enumerator en(spec, obs, actions, ctx_norm);
  const int K = spec.num_classes();

  // f(t, h, z) = ln sum over class sequences from step t of
  //              prod prior * prod emission.
  auto rec = [&](auto&& self, int t, const Mat& h_prev,
                 const Mat& z_prev) -> double {
    NodeEval nv = en.eval(t, h_prev, z_prev);
    Eigen::VectorXd vals(K);
    for (int k = 0; k < K; ++k) {
      double tail = 0.0;
      if (t + 1 < spec.horizon) {
        Mat z = Mat::Zero(K, 1);
        z(k, 0) = 1.0;
        tail = self(self, t + 1, nv.h, z);
      }
      vals(k) = nv.log_prior(k) + nv.emission(k) + tail;
    }
    return logsumexp(vals);
  };

  WM model(spec.sizes, spec.mode);
  auto [h0, z0] = model.initial_state(1);
  return rec(rec, 0, h0, z0);
}

ExactElbo exact_elbo(const EnumerableModelSpec& spec,
                     const std::vector<Mat>& obs,
                     const std::vector<Mat>& actions, const Mat& ctx_norm) {
  check_inputs(spec, obs, actions, ctx_norm);
  Enumerator en(spec, obs, actions, ctx_norm);
  const int K = spec.num_classes();

  // Expectations under the filtering posterior q, taken exactly by recursion:
  // reconstruction collects emission terms, complexity collects ln q - ln p.
  auto rec = [&](auto&& self, int t, const Mat& h_prev,
                 const Mat& z_prev) -> std::pair<double, double> {
    NodeEval nv = en.eval(t, h_prev, z_prev);
    double recon = 0, compl_ = 0;
    for (int k = 0; k < K; ++k) {
      double q = std::exp(nv.log_post(k));
      std::pair<double, double> tail{0.0, 0.0};
      if (t + 1 < spec.horizon) {
        Mat z = Mat::Zero(K, 1);
        z(k, 0) = 1.0;
        tail = self(self, t + 1, nv.h, z);
      }
      recon += q * (nv.emission(k) + tail.first);
      compl_ += q * (nv.log_post(k) - nv.log_prior(k) + tail.second);
    }
    return {recon, compl_};
  };

  WM model(spec.sizes, spec.mode);
  auto [h0, z0] = model.initial_state(1);
  auto [recon, compl_] = rec(rec, 0, h0, z0);
  return ExactElbo{recon, compl_};
}

}  // namespace crlab
