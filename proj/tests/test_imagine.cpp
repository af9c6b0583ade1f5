#include <doctest.h>

#include <Eigen/Dense>
#include <limits>

#include "crlab/imagine.hpp"

using namespace crlab;
using Mat = Eigen::MatrixXd;
using WM = WorldModel<double>;

namespace {

ModelSizes tiny() {
  ModelSizes s;
  s.obs_dim = 3;
  s.ctx_dim = 2;
  s.action_dim = 2;
  s.gru_units = 6;
  s.mlp_units = 5;
  s.mlp_layers = 2;
  s.latent_groups = 2;
  s.latent_classes = 3;
  s.reward_bins = 11;
  return s;
}

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

PolicyFn<double> random_policy(int action_dim) {
  return [action_dim](const Mat& h, const Mat&, Rng& rng) {
    Mat a = Mat::Zero(action_dim, h.cols());
    for (Eigen::Index j = 0; j < h.cols(); ++j)
      a(Eigen::Index(rng.uniform_int(std::uint64_t(action_dim))), j) = 1.0;
    return a;
  };
}

PolicyFn<double> constant_policy(int action_dim, int which) {
  return [action_dim, which](const Mat& h, const Mat&, Rng&) {
    Mat a = Mat::Zero(action_dim, h.cols());
    a.row(which).setOnes();
    return a;
  };
}

bool identical(const ImaginedTrajectory<double>& a,
               const ImaginedTrajectory<double>& b) {
  if (a.horizon() != b.horizon()) return false;
  for (std::size_t i = 0; i < a.h.size(); ++i)
    if (a.h[i] != b.h[i] || a.z[i] != b.z[i]) return false;
  for (int i = 0; i < a.horizon(); ++i) {
    std::size_t u = std::size_t(i);
    if (a.action[u] != b.action[u] || a.reward[u] != b.reward[u] ||
        a.cont[u] != b.cont[u] || a.decoded_obs[u] != b.decoded_obs[u])
      return false;
  }
  return true;
}

struct Setup {
  ModelSizes sizes = tiny();
  WM model;
  ParamStore<double> ps;
  Mat h0, z0, ctx;

  explicit Setup(ConditioningMode mode, int n = 3, std::uint64_t seed = 11)
      : model(tiny(), mode) {
    Rng rng(seed);
    model.register_params(ps, rng);
    // A start state off the initial-state manifold.
    h0 = random_mat(sizes.gru_units, n, rng, -0.5, 0.5);
    z0 = Mat::Zero(model.z_dim(), n);
    for (int g = 0; g < sizes.latent_groups; ++g)
      for (int j = 0; j < n; ++j)
        z0(g * sizes.latent_classes +
               int(rng.uniform_int(std::uint64_t(sizes.latent_classes))),
           j) = 1.0;
    ctx = random_mat(sizes.ctx_dim, n, rng, 0.0, 1.0);
  }
};

}  // namespace

TEST_CASE("horizon zero keeps only the start state") {
  Setup su(ConditioningMode::CRSSM);
  Rng rng(3);
  auto tr = imagine(su.model, su.ps, su.h0, su.z0, su.ctx,
                    random_policy(su.sizes.action_dim), 0, rng);
  CHECK(tr.horizon() == 0);
  CHECK(tr.h.size() == 1);
  CHECK(tr.z.size() == 1);
  CHECK(tr.reward.empty());
  CHECK(tr.h[0] == su.h0);
  CHECK(tr.z[0] == su.z0);
}

TEST_CASE("imagination is deterministic given the rng") {
  Setup su(ConditioningMode::CRSSM);
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    return imagine(su.model, su.ps, su.h0, su.z0, su.ctx,
                   random_policy(su.sizes.action_dim), 8, rng);
  };
  CHECK(identical(run(5), run(5)));
  CHECK_FALSE(identical(run(5), run(6)));
}

TEST_CASE("trajectory shapes and ranges") {
  Setup su(ConditioningMode::CONCAT);
  Rng rng(4);
  const int H = 7;
  auto tr = imagine(su.model, su.ps, su.h0, su.z0, su.ctx,
                    random_policy(su.sizes.action_dim), H, rng);
  CHECK(tr.h.size() == std::size_t(H + 1));
  CHECK(tr.z.size() == std::size_t(H + 1));
  CHECK(tr.action.size() == std::size_t(H));
  CHECK(tr.reward.size() == std::size_t(H));
  CHECK(tr.cont.size() == std::size_t(H));
  CHECK(tr.decoded_obs.size() == std::size_t(H));
  for (int t = 0; t < H; ++t) {
    std::size_t u = std::size_t(t);
    CHECK(tr.cont[u].minCoeff() > 0.0);
    CHECK(tr.cont[u].maxCoeff() < 1.0);
    CHECK(tr.reward[u].allFinite());
    // CONCAT observation head carries obs + context channels.
    CHECK(tr.decoded_obs[u].rows() == su.sizes.obs_dim + su.sizes.ctx_dim);
    // Latents stay one-hot per group.
    for (Eigen::Index j = 0; j < tr.z[u + 1].cols(); ++j)
      for (int g = 0; g < su.sizes.latent_groups; ++g)
        CHECK(tr.z[u + 1]
                  .col(j)
                  .segment(g * su.sizes.latent_classes,
                           su.sizes.latent_classes)
                  .sum() == 1.0);
  }
}

TEST_CASE("recorded actions are the policy's actions") {
  Setup su(ConditioningMode::HIDDEN);
  Rng rng(5);
  auto tr = imagine(su.model, su.ps, su.h0, su.z0, su.ctx,
                    constant_policy(su.sizes.action_dim, 1), 5, rng);
  for (const auto& a : tr.action) {
    CHECK(a.row(0).isZero());
    CHECK(a.row(1) == Mat::Ones(1, a.cols()));
  }
}

TEST_CASE("the encoder is unreachable from the imagination path") {
  Setup su(ConditioningMode::CRSSM);
  auto run = [&] {
    Rng rng(9);
    return imagine(su.model, su.ps, su.h0, su.z0, su.ctx,
                   random_policy(su.sizes.action_dim), 10, rng);
  };
  auto clean = run();
  for (auto& [name, value] : su.ps.entries)
    if (name.rfind("wm/enc", 0) == 0)
      value.setConstant(std::numeric_limits<double>::quiet_NaN());
  auto poisoned = run();
  CHECK(identical(clean, poisoned));
}

TEST_CASE("identity counterfactual reproduces the factual dream bitwise") {
  for (auto mode : {ConditioningMode::CRSSM, ConditioningMode::CONCAT}) {
    CAPTURE(to_string(mode));
    Setup su(mode, 1);
    Rng drng(21);
    std::vector<Mat> obs, acts;
    for (int t = 0; t < 4; ++t) {
      obs.push_back(random_mat(su.sizes.obs_dim, 1, drng, -1.0, 1.0));
      Mat a = Mat::Zero(su.sizes.action_dim, 1);
      if (t > 0) a(drng.uniform_int(2), 0) = 1.0;
      acts.push_back(a);
    }
    Mat ctx = random_mat(su.sizes.ctx_dim, 1, drng, 0.0, 1.0);

    ContextPolicy<double> pf = [&](const Mat&) {
      return random_policy(su.sizes.action_dim);
    };
    Rng rng(33);
    auto pair = dream_counterfactual(su.model, su.ps, obs, acts, ctx, ctx, pf,
                                     12, rng);
    CHECK(identical(pair.factual, pair.counterfactual));
    auto div =
        decoded_divergence(pair.factual, pair.counterfactual, su.sizes.obs_dim);
    for (double d : div) CHECK(d == 0.0);
  }
}

TEST_CASE("context switch separates dreams in crssm mode") {
  Setup su(ConditioningMode::CRSSM, 1);
  Rng drng(22);
  std::vector<Mat> obs, acts;
  for (int t = 0; t < 3; ++t) {
    obs.push_back(random_mat(su.sizes.obs_dim, 1, drng));
    acts.push_back(Mat::Zero(su.sizes.action_dim, 1));
    if (t > 0) acts.back()(0, 0) = 1.0;
  }
  Mat ctx_f = Mat::Zero(su.sizes.ctx_dim, 1);
  ctx_f << 0.2, 0.5;
  Mat ctx_cf = Mat::Zero(su.sizes.ctx_dim, 1);
  ctx_cf << 0.9, 0.5;

  ContextPolicy<double> pf = [&](const Mat&) {
    return constant_policy(su.sizes.action_dim, 0);
  };
  Rng rng(44);
  auto pair = dream_counterfactual(su.model, su.ps, obs, acts, ctx_f, ctx_cf,
                                   pf, 10, rng);
  auto div =
      decoded_divergence(pair.factual, pair.counterfactual, su.sizes.obs_dim);
  for (double d : div) CHECK(d > 0.0);
  // Both branches start from the same inferred state.
  CHECK(pair.factual.h[0] == pair.counterfactual.h[0]);
  CHECK(pair.factual.z[0] == pair.counterfactual.z[0]);
}

TEST_CASE("hidden mode cannot dream counterfactuals") {
  Setup su(ConditioningMode::HIDDEN, 1);
  Rng drng(23);
  std::vector<Mat> obs = {random_mat(su.sizes.obs_dim, 1, drng)};
  std::vector<Mat> acts = {Mat::Zero(su.sizes.action_dim, 1)};
  Mat ctx = random_mat(su.sizes.ctx_dim, 1, drng, 0.0, 1.0);
  ContextPolicy<double> pf = [&](const Mat&) {
    return constant_policy(su.sizes.action_dim, 0);
  };
  Rng rng(1);
  CHECK_THROWS_AS(dream_counterfactual(su.model, su.ps, obs, acts, ctx, ctx,
                                       pf, 5, rng),
                  UsageError);
}
