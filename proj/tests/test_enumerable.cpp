#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "crlab/enumerable.hpp"

using namespace crlab;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Independent enumerator. Recodes the forward math with raw Eigen directly
// from the layer definitions and walks every class sequence with an odometer,
// instead of the shared-prefix recursion used by the library.
// ---------------------------------------------------------------------------
namespace indep {

Vec dense_block(const ParamStore<double>& ps, const std::string& name,
                const Vec& x) {
  Vec pre = ps.at(name + "/w") * x;
  double mu = pre.mean();
  double var = (pre.array() - mu).square().mean();
  Vec xhat = (pre.array() - mu) / std::sqrt(var + 1e-3);
  Vec affine = xhat.array() * ps.at(name + "/ln_g").col(0).array() +
               ps.at(name + "/ln_b").col(0).array();
  return affine.array() / (1.0 + (-affine.array()).exp());
}

Vec mlp(const ParamStore<double>& ps, const std::string& name, int layers,
        Vec x) {
  for (int i = 0; i < layers; ++i)
    x = dense_block(ps, name + "/l" + std::to_string(i), x);
  return x;
}

Vec head(const ParamStore<double>& ps, const std::string& name, const Vec& x) {
  return ps.at(name + "/w") * x + ps.at(name + "/b").col(0);
}

Vec gru(const ParamStore<double>& ps, const Vec& h, const Vec& x) {
  const int u = static_cast<int>(h.size());
  Vec px = ps.at("wm/gru/wx") * x;
  Vec ph = ps.at("wm/gru/wh") * h;
  Vec b = ps.at("wm/gru/b").col(0);
  auto sig = [](const Vec& v) { return Vec(1.0 / (1.0 + (-v.array()).exp())); };
  Vec r = sig(px.segment(0, u) + ph.segment(0, u) + b.segment(0, u));
  Vec upd = sig(px.segment(u, u) + ph.segment(u, u) + b.segment(u, u));
  Vec cand = (px.segment(2 * u, u).array() +
              r.array() * ph.segment(2 * u, u).array() +
              b.segment(2 * u, u).array())
                 .tanh();
  return ((1.0 - upd.array()) * h.array() + upd.array() * cand.array());
}

Vec smoothed_probs(const Vec& logits, double unimix) {
  Vec p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  return (1.0 - unimix) * p +
         Vec::Constant(p.size(), unimix / double(p.size()));
}

Vec obs_channels(const EnumerableModelSpec& spec, const Vec& obs,
                 const Vec& ctx) {
  Vec sy = obs.array().sign() * (obs.array().abs() + 1.0).log();
  if (spec.mode != ConditioningMode::CONCAT) return sy;
  Vec out(sy.size() + ctx.size());
  out << sy, ctx;
  return out;
}

struct StepDists {
  Vec h;
  Vec prior, post;  // K, smoothed
  Vec emission;     // K
};

StepDists step(const EnumerableModelSpec& spec, const Vec& h_prev,
               const Vec& z_prev, const Vec& action, const Vec& obs,
               const Vec& ctx) {
  const auto& ps = spec.params;
  const int K = spec.num_classes();
  Vec gin(z_prev.size() + action.size() +
          (spec.mode == ConditioningMode::CRSSM ? ctx.size() : 0));
  if (spec.mode == ConditioningMode::CRSSM)
    gin << z_prev, action, ctx;
  else
    gin << z_prev, action;

  StepDists d;
  d.h = gru(ps, h_prev, gin);
  d.prior = smoothed_probs(
      head(ps, "wm/prior/head",
           mlp(ps, "wm/prior", spec.sizes.mlp_layers, d.h)),
      spec.sizes.unimix);
  Vec och = obs_channels(spec, obs, ctx);
  Vec ein(d.h.size() + och.size());
  ein << d.h, och;
  d.post = smoothed_probs(
      head(ps, "wm/enc/head", mlp(ps, "wm/enc", spec.sizes.mlp_layers, ein)),
      spec.sizes.unimix);
  d.emission.resize(K);
  for (int k = 0; k < K; ++k) {
    Vec z = Vec::Zero(K);
    z(k) = 1.0;
    Vec din(d.h.size() + K +
            (spec.mode == ConditioningMode::CRSSM ? ctx.size() : 0));
    if (spec.mode == ConditioningMode::CRSSM)
      din << d.h, z, ctx;
    else
      din << d.h, z;
    Vec mean = head(ps, "wm/dec/obs",
                    mlp(ps, "wm/dec", spec.sizes.mlp_layers, din));
    d.emission(k) = -0.5 * (mean - och).squaredNorm() -
                    0.5 * double(och.size()) * kLnTwoPi;
  }
  return d;
}

struct PathSums {
  double loglik;           // logsumexp over paths of prior + emission
  double prior_total;      // sum over paths of the path prior probability
  double elbo_recon;       // E_q of emission sums
  double elbo_complexity;  // E_q of ln q - ln p sums
};

PathSums enumerate(const EnumerableModelSpec& spec, const std::vector<Mat>& obs,
                   const std::vector<Mat>& actions, const Mat& ctx_norm) {
  const int K = spec.num_classes();
  const int H = spec.horizon;
  const Vec ctx = ctx_norm.col(0);

  long paths = 1;
  for (int t = 0; t < H; ++t) paths *= K;

  std::vector<double> path_vals;
  path_vals.reserve(std::size_t(paths));
  double prior_total = 0, recon = 0, compl_ = 0;

  std::vector<int> ks(std::size_t(H), 0);
  for (long idx = 0; idx < paths; ++idx) {
    long rem = idx;
    for (int t = 0; t < H; ++t) {
      ks[std::size_t(t)] = int(rem % K);
      rem /= K;
    }
    Vec h = Vec::Zero(spec.sizes.gru_units);
    Vec z = Vec::Zero(K);
    z(0) = 1.0;
    double lp = 0, le = 0, lq = 0;
    for (int t = 0; t < H; ++t) {
      StepDists d = step(spec, h, z, actions[std::size_t(t)].col(0),
                         obs[std::size_t(t)].col(0), ctx);
      int k = ks[std::size_t(t)];
      lp += std::log(d.prior(k));
      lq += std::log(d.post(k));
      le += d.emission(k);
      h = d.h;
      z.setZero();
      z(k) = 1.0;
    }
    path_vals.push_back(lp + le);
    prior_total += std::exp(lp);
    double q = std::exp(lq);
    recon += q * le;
    compl_ += q * (lq - lp);
  }

  double mx = *std::max_element(path_vals.begin(), path_vals.end());
  double s = 0;
  for (double v : path_vals) s += std::exp(v - mx);

  PathSums out;
  out.loglik = mx + std::log(s);
  out.prior_total = prior_total;
  out.elbo_recon = recon;
  out.elbo_complexity = compl_;
  return out;
}

}  // namespace indep

namespace {

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

struct Problem {
  EnumerableModelSpec spec;
  std::vector<Mat> obs, actions;
  Mat ctx;
};

Problem random_problem(int K, int H, ConditioningMode mode, Rng& rng) {
  Problem pb;
  pb.spec = random_enumerable(K, H, mode, rng);
  for (int t = 0; t < H; ++t) {
    pb.obs.push_back(random_mat(pb.spec.sizes.obs_dim, 1, rng, -2.0, 2.0));
    Mat a = Mat::Zero(pb.spec.sizes.action_dim, 1);
    a(rng.uniform_int(pb.spec.sizes.action_dim), 0) = 1.0;
    pb.actions.push_back(a);
  }
  pb.ctx = random_mat(pb.spec.sizes.ctx_dim, 1, rng, 0.0, 1.0);
  return pb;
}

}  // namespace

TEST_CASE("exact log-likelihood matches an independently coded enumerator") {
  Rng rng(301);
  for (auto mode : {ConditioningMode::CRSSM, ConditioningMode::CONCAT,
                    ConditioningMode::HIDDEN}) {
    CAPTURE(to_string(mode));
    for (int rep = 0; rep < 5; ++rep) {
      Problem pb = random_problem(2, 3, mode, rng);
      double lib = exact_loglik(pb.spec, pb.obs, pb.actions, pb.ctx);
      auto ref = indep::enumerate(pb.spec, pb.obs, pb.actions, pb.ctx);
      CHECK(lib == doctest::Approx(ref.loglik).epsilon(1e-10));
    }
  }
}

TEST_CASE("exact ELBO matches the independent enumerator") {
  Rng rng(302);
  for (int rep = 0; rep < 5; ++rep) {
    Problem pb = random_problem(3, 3, ConditioningMode::CRSSM, rng);
    auto lib = exact_elbo(pb.spec, pb.obs, pb.actions, pb.ctx);
    auto ref = indep::enumerate(pb.spec, pb.obs, pb.actions, pb.ctx);
    CHECK(lib.reconstruction ==
          doctest::Approx(ref.elbo_recon).epsilon(1e-10));
    CHECK(lib.complexity ==
          doctest::Approx(ref.elbo_complexity).epsilon(1e-10));
  }
}

TEST_CASE("single class, single step: log-likelihood is the emission density") {
  Rng rng(303);
  Problem pb = random_problem(1, 1, ConditioningMode::HIDDEN, rng);
  double lib = exact_loglik(pb.spec, pb.obs, pb.actions, pb.ctx);

  // K = 1 forces prior probability 1, so only the Gaussian term remains.
  Vec h0 = Vec::Zero(pb.spec.sizes.gru_units);
  Vec z0 = Vec::Ones(1);
  auto d = indep::step(pb.spec, h0, z0, pb.actions[0].col(0), pb.obs[0].col(0),
                       pb.ctx.col(0));
  CHECK(d.prior(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(lib == doctest::Approx(d.emission(0)).epsilon(1e-12));
}

TEST_CASE("latent path probabilities sum to one before emission weighting") {
  Rng rng(304);
  for (int rep = 0; rep < 3; ++rep) {
    Problem pb = random_problem(3, 4, ConditioningMode::CRSSM, rng);
    auto ref = indep::enumerate(pb.spec, pb.obs, pb.actions, pb.ctx);
    CHECK(ref.prior_total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("evidence bound holds on 100 random instances") {
  Rng rng(305);
  const ConditioningMode modes[] = {ConditioningMode::CRSSM,
                                    ConditioningMode::CONCAT,
                                    ConditioningMode::HIDDEN};
  for (int rep = 0; rep < 100; ++rep) {
    int K = 1 + int(rng.uniform_int(3));
    int H = 1 + int(rng.uniform_int(4));
    Problem pb = random_problem(K, H, modes[rng.uniform_int(3)], rng);
    auto bound = exact_elbo(pb.spec, pb.obs, pb.actions, pb.ctx);
    double ll = exact_loglik(pb.spec, pb.obs, pb.actions, pb.ctx);
    CAPTURE(rep);
    CAPTURE(K);
    CAPTURE(H);
    CHECK(ll - bound.elbo() >= -1e-8);
    CHECK(bound.complexity >= -1e-12);
  }
}

TEST_CASE("library evaluations are deterministic") {
  Rng rng(306);
  Problem pb = random_problem(2, 4, ConditioningMode::CONCAT, rng);
  CHECK(exact_loglik(pb.spec, pb.obs, pb.actions, pb.ctx) ==
        exact_loglik(pb.spec, pb.obs, pb.actions, pb.ctx));
  auto a = exact_elbo(pb.spec, pb.obs, pb.actions, pb.ctx);
  auto b = exact_elbo(pb.spec, pb.obs, pb.actions, pb.ctx);
  CHECK(a.elbo() == b.elbo());
}

TEST_CASE("instances beyond the enumeration budget are refused") {
  Rng rng(307);
  CHECK_THROWS_AS(random_enumerable(10, 6, ConditioningMode::CRSSM, rng),
                  ContractError);
  // 10^5 paths sits exactly on the budget and is allowed.
  CHECK_NOTHROW(random_enumerable(10, 5, ConditioningMode::CRSSM, rng));

  Problem pb = random_problem(2, 2, ConditioningMode::CRSSM, rng);
  SUBCASE("shape mismatches are rejected") {
    auto bad_obs = pb.obs;
    bad_obs.pop_back();
    CHECK_THROWS_AS(exact_loglik(pb.spec, bad_obs, pb.actions, pb.ctx),
                    ContractError);
  }
}
