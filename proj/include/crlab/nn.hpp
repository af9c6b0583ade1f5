#pragma once

// Network building blocks on top of the tape: parameter store, dense /
// GRU layers, straight-through categorical sampling, symlog/twohot value
// coding, Adam with global-norm clipping, and a finite-difference checker.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "crlab/common.hpp"
#include "crlab/tensor.hpp"

namespace crlab {

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// ParameterStore
// ---------------------------------------------------------------------------

template <class S>
struct ParamStore {
  using Mat = MatT<S>;

  std::map<std::string, Mat> entries;

  bool has(const std::string& name) const { return entries.count(name) > 0; }

  Mat& at(const std::string& name) {
    auto it = entries.find(name);
    check(it != entries.end(), "params: unknown name " + name);
    return it->second;
  }
  const Mat& at(const std::string& name) const {
    auto it = entries.find(name);
    check(it != entries.end(), "params: unknown name " + name);
    return it->second;
  }

  void add(const std::string& name, Mat value) {
    check(!has(name), "params: duplicate name " + name);
    entries.emplace(name, std::move(value));
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : entries) n += v.size();
    return n;
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& [k, v] : entries)
      out.entries.emplace(k, v.template cast<T>());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Initialization: truncated normal with fan-in scaling, zeros for biases.
// ---------------------------------------------------------------------------

inline double trunc_normal_draw(Rng& rng) {
  double v;
  do {
    v = rng.normal();
  } while (std::abs(v) > 2.0);
  return v;
}

template <class S>
MatT<S> trunc_normal_fanin(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  double std = 1.0 / std::sqrt(static_cast<double>(cols));
  MatT<S> w(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      w(i, j) = static_cast<S>(std * trunc_normal_draw(rng));
  return w;
}

// ---------------------------------------------------------------------------
// Layer registration + tape-side application.
//
// TapeParams binds store entries to tape leaves on first use, so a weight
// used at several timesteps accumulates one gradient.
// ---------------------------------------------------------------------------

template <class S>
struct TapeParams {
  using Var = typename Tape<S>::Var;

  Tape<S>& tape;
  const ParamStore<S>& store;
  std::map<std::string, Var> bound;

  TapeParams(Tape<S>& t, const ParamStore<S>& s) : tape(t), store(s) {}

  Var operator()(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    Var v = tape.leaf(store.at(name));
    bound.emplace(name, v);
    return v;
  }

  std::map<std::string, MatT<S>> grads() const {
    std::map<std::string, MatT<S>> g;
    for (const auto& [name, var] : bound)
      if (tape.has_grad(var)) g.emplace(name, tape.grad(var));
    return g;
  }
};

// Hidden block: SiLU(LayerNorm(W x) * gamma + beta). Kernel has no separate
// bias; the LayerNorm offset provides it.
template <class S>
void add_dense_block(ParamStore<S>& ps, const std::string& name, int in,
                     int out, Rng& rng) {
  ps.add(name + "/w", trunc_normal_fanin<S>(out, in, rng));
  ps.add(name + "/ln_g", MatT<S>::Ones(out, 1));
  ps.add(name + "/ln_b", MatT<S>::Zero(out, 1));
}

template <class S>
typename Tape<S>::Var dense_block(Tape<S>& t, TapeParams<S>& p,
                                  const std::string& name,
                                  typename Tape<S>::Var x) {
  auto pre = t.matmul(p(name + "/w"), x);
  auto normed = t.layer_norm(pre);
  auto affine =
      t.add_colvec(t.mul_colvec(normed, p(name + "/ln_g")), p(name + "/ln_b"));
  return t.silu(affine);
}

// Output head: plain affine map, identity activation.
template <class S>
void add_dense_head(ParamStore<S>& ps, const std::string& name, int in,
                    int out, Rng& rng) {
  ps.add(name + "/w", trunc_normal_fanin<S>(out, in, rng));
  ps.add(name + "/b", MatT<S>::Zero(out, 1));
}

template <class S>
typename Tape<S>::Var dense_head(Tape<S>& t, TapeParams<S>& p,
                                 const std::string& name,
                                 typename Tape<S>::Var x) {
  return t.add_colvec(t.matmul(p(name + "/w"), x), p(name + "/b"));
}

template <class S>
void add_mlp(ParamStore<S>& ps, const std::string& name, int in, int hidden,
             int layers, Rng& rng) {
  for (int i = 0; i < layers; ++i) {
    add_dense_block(ps, name + "/l" + std::to_string(i), i == 0 ? in : hidden,
                    hidden, rng);
  }
}

template <class S>
typename Tape<S>::Var mlp(Tape<S>& t, TapeParams<S>& p,
                          const std::string& name, int layers,
                          typename Tape<S>::Var x) {
  auto h = x;
  for (int i = 0; i < layers; ++i)
    h = dense_block(t, p, name + "/l" + std::to_string(i), h);
  return h;
}

// GRU: r,u = sigmoid gates, candidate = tanh(Wc x + r * (Uc h) + bc),
// h' = (1-u)*h + u*candidate. Update gate 0 keeps the state.
template <class S>
void add_gru(ParamStore<S>& ps, const std::string& name, int in, int units,
             Rng& rng) {
  ps.add(name + "/wx", trunc_normal_fanin<S>(3 * units, in, rng));
  ps.add(name + "/wh", trunc_normal_fanin<S>(3 * units, units, rng));
  ps.add(name + "/b", MatT<S>::Zero(3 * units, 1));
}

template <class S>
typename Tape<S>::Var gru_cell(Tape<S>& t, TapeParams<S>& p,
                               const std::string& name,
                               typename Tape<S>::Var h,
                               typename Tape<S>::Var x) {
  const int units = static_cast<int>(t.val(h).rows());
  auto px = t.matmul(p(name + "/wx"), x);
  auto ph = t.matmul(p(name + "/wh"), h);
  auto b = p(name + "/b");
  auto gate = [&](int idx, bool with_h) {
    auto part = t.add_colvec(
        with_h
            ? t.add(t.slice_rows(px, idx * units, units),
                    t.slice_rows(ph, idx * units, units))
            : t.slice_rows(px, idx * units, units),
        t.slice_rows(b, idx * units, units));
    return part;
  };
  auto r = t.sigmoid(gate(0, true));
  auto u = t.sigmoid(gate(1, true));
  auto cand = t.tanh_(t.add_colvec(
      t.add(t.slice_rows(px, 2 * units, units),
            t.mul(r, t.slice_rows(ph, 2 * units, units))),
      t.slice_rows(b, 2 * units, units)));
  auto keep = t.mul(t.add_scalar(t.neg(u), S(1)), h);
  return t.add(keep, t.mul(u, cand));
}

// ---------------------------------------------------------------------------
// Straight-through categorical sampling over L groups of K classes.
// ---------------------------------------------------------------------------

// probs_out receives the unimix-smoothed probabilities (for KL terms).
template <class S>
typename Tape<S>::Var categorical_sample_st(Tape<S>& t,
                                            typename Tape<S>::Var logits,
                                            int groups, int klass, S unimix,
                                            Rng& rng,
                                            typename Tape<S>::Var* probs_out =
                                                nullptr) {
  check(t.val(logits).allFinite(), "categorical_sample_st: non-finite logits");
  auto probs = t.softmax_groups(logits, groups, klass);
  if (unimix > S(0)) {
    probs = t.add_scalar(t.scale(probs, S(1) - unimix),
                         unimix / static_cast<S>(klass));
  }
  if (probs_out) *probs_out = probs;
  const auto& pv = t.val(probs);
  MatT<S> onehot = MatT<S>::Zero(pv.rows(), pv.cols());
  for (Eigen::Index c = 0; c < pv.cols(); ++c) {
    for (int g = 0; g < groups; ++g) {
      const S* col = pv.data() + c * pv.rows() + Eigen::Index(g) * klass;
      int k = rng.categorical(std::span<const S>(col, klass));
      onehot(Eigen::Index(g) * klass + k, c) = S(1);
    }
  }
  // value == one-hot, gradient == gradient of the smoothed probabilities
  auto delta = t.constant(onehot - pv);
  return t.add(delta, probs);
}

// KL(p || q) summed over the feature rows: 1 x n per-column divergences.
// Inputs are (smoothed, strictly positive) probability matrices.
template <class S>
typename Tape<S>::Var categorical_kl(Tape<S>& t, typename Tape<S>::Var p,
                                     typename Tape<S>::Var q) {
  auto diff = t.sub(t.log_(p), t.log_(q));
  return t.sum_over_rows(t.mul(p, diff));
}

// ---------------------------------------------------------------------------
// Symlog helpers on matrices, twohot coding.
// ---------------------------------------------------------------------------

template <class S>
MatT<S> symlog_mat(const MatT<S>& x) {
  return x.unaryExpr([](S v) { return symlog(v); });
}

template <class S>
MatT<S> symexp_mat(const MatT<S>& x) {
  return x.unaryExpr([](S v) { return symexp(v); });
}

template <class S>
std::vector<S> uniform_bins(int count, S lo, S hi) {
  std::vector<S> bins(count);
  for (int i = 0; i < count; ++i)
    bins[i] = lo + (hi - lo) * static_cast<S>(i) / static_cast<S>(count - 1);
  return bins;
}

template <class S>
void check_bins(std::span<const S> bins) {
  check(bins.size() >= 2, "twohot: need at least two bins");
  for (std::size_t i = 1; i < bins.size(); ++i)
    check(bins[i] > bins[i - 1], "twohot: bins not strictly increasing");
}

template <class S>
Eigen::Matrix<S, Eigen::Dynamic, 1> twohot_encode(S value,
                                                  std::span<const S> bins) {
  check_bins(bins);
  const int B = static_cast<int>(bins.size());
  Eigen::Matrix<S, Eigen::Dynamic, 1> out =
      Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(B);
  S v = std::clamp(value, bins[0], bins[B - 1]);
  auto it = std::upper_bound(bins.begin(), bins.end(), v);
  int hi = std::clamp(static_cast<int>(it - bins.begin()), 1, B - 1);
  int lo = hi - 1;
  S width = bins[hi] - bins[lo];
  S w_hi = (v - bins[lo]) / width;
  out(lo) = S(1) - w_hi;
  out(hi) = w_hi;
  return out;
}

template <class S>
S twohot_expectation(const Eigen::Matrix<S, Eigen::Dynamic, 1>& probs,
                     std::span<const S> bins) {
  check_bins(bins);
  check(probs.size() == Eigen::Index(bins.size()),
        "twohot_expectation: size mismatch");
  S acc = S(0);
  for (Eigen::Index i = 0; i < probs.size(); ++i) acc += probs(i) * bins[i];
  return acc;
}

// Columns of `values` (1 x n) encoded as a B x n twohot target matrix.
template <class S>
MatT<S> twohot_encode_row(const MatT<S>& values, std::span<const S> bins) {
  check(values.rows() == 1, "twohot_encode_row: expected 1 x n");
  MatT<S> out(Eigen::Index(bins.size()), values.cols());
  for (Eigen::Index c = 0; c < values.cols(); ++c)
    out.col(c) = twohot_encode(values(0, c), bins);
  return out;
}

// Expected bin value per column of a B x n probability matrix: 1 x n row.
template <class S>
MatT<S> twohot_expectation_row(const MatT<S>& probs, std::span<const S> bins) {
  check_bins(bins);
  check(probs.rows() == Eigen::Index(bins.size()),
        "twohot_expectation_row: size mismatch");
  MatT<S> out(1, probs.cols());
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    S acc = S(0);
    for (Eigen::Index i = 0; i < probs.rows(); ++i)
      acc += probs(i, c) * bins[std::size_t(i)];
    out(0, c) = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam with global-norm clipping.
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double adam_epsilon = 1e-8;
  double clip_norm = 1000.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
};

template <class S>
struct Adam {
  using Mat = MatT<S>;

  OptimizerConfig cfg;
  std::map<std::string, Mat> m, v;
  std::int64_t t = 0;

  explicit Adam(OptimizerConfig c) : cfg(c) {
    check(cfg.learning_rate > 0 && cfg.adam_epsilon > 0 && cfg.clip_norm > 0,
          "adam: config must be strictly positive");
  }

  static double global_norm(const std::map<std::string, Mat>& grads) {
    double sq = 0;
    for (const auto& [k, g] : grads)
      sq += static_cast<double>(g.template cast<double>().squaredNorm());
    return std::sqrt(sq);
  }

  void step(ParamStore<S>& store, std::map<std::string, Mat> grads) {
    for (const auto& [name, g] : grads) {
      if (!g.allFinite())
        throw NumericalError("adam: non-finite gradient for " + name);
      check(store.at(name).rows() == g.rows() &&
                store.at(name).cols() == g.cols(),
            "adam: gradient shape mismatch for " + name);
    }
    double norm = global_norm(grads);
    if (norm > cfg.clip_norm) {
      S k = static_cast<S>(cfg.clip_norm / norm);
      for (auto& [name, g] : grads) g *= k;
    }
    ++t;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    for (auto& [name, g] : grads) {
      Mat& mm = moment(m, name, g);
      Mat& vv = moment(v, name, g);
      mm = b1 * mm + (S(1) - b1) * g;
      vv = (b2 * vv).eval();
      vv.array() += (S(1) - b2) * g.array().square();
      Mat mhat = mm / static_cast<S>(bc1);
      Mat vhat = vv / static_cast<S>(bc2);
      Mat upd = (mhat.array() /
                 (vhat.array().sqrt() + static_cast<S>(cfg.adam_epsilon)))
                    .matrix();
      store.at(name) -= static_cast<S>(cfg.learning_rate) * upd;
      if (!store.at(name).allFinite())
        throw NumericalError("adam: non-finite parameter after update: " +
                             name);
    }
  }

 private:
  Mat& moment(std::map<std::string, Mat>& side, const std::string& name,
              const Mat& like) {
    auto it = side.find(name);
    if (it == side.end())
      it = side.emplace(name, Mat::Zero(like.rows(), like.cols())).first;
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Central finite-difference gradient checking (used by the test suite and
// available to callers who extend the op set).
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

// f re-evaluates the scalar objective at a perturbed input; analytic is the
// tape's gradient at x0.
template <class F>
FdReport fd_check(F&& f, const Eigen::MatrixXd& x0,
                  const Eigen::MatrixXd& analytic, double h = 1e-5) {
  check(x0.rows() == analytic.rows() && x0.cols() == analytic.cols(),
        "fd_check: shape mismatch");
  FdReport rep;
  Eigen::MatrixXd x = x0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double keep = x(i, j);
      x(i, j) = keep + h;
      double fp = f(x);
      x(i, j) = keep - h;
      double fm = f(x);
      x(i, j) = keep;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic(i, j);
      double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace crlab
