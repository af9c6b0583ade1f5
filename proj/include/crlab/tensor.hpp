#pragma once

// Reverse-mode autodiff on dense matrices. Convention: rows = features,
// columns = batch elements, so a dense layer is one GEMM per call.
//
// A Tape owns every intermediate value of one forward pass. Ops append nodes;
// backward() walks the nodes in reverse. Construct with grad=false to get a
// plain (and faster) forward evaluator running the same code paths.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "crlab/common.hpp"

namespace crlab {

template <class S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  using Arr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(bool grad = true) : grad_(grad) {}

  bool grad_enabled() const { return grad_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  const Mat& val(Var v) const { return node(v).val; }

  const Mat& grad(Var v) const {
    const Node& n = node(v);
    check(n.grad.size() > 0, "tensor: gradient was never populated");
    return n.grad;
  }

  bool has_grad(Var v) const { return node(v).grad.size() > 0; }

  Var constant(Mat v) { return push(std::move(v), false, {}); }

  // A differentiable input; its grad is available after backward().
  Var leaf(Mat v) { return push(std::move(v), grad_, {}); }

  // --- arithmetic ----------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check(A.cols() == B.rows(), "matmul: inner dimensions differ");
    Mat out = A * B;
    return binary(std::move(out), a, b, [a, b](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a).noalias() += g * t.val(b).transpose();
      if (t.wants(b)) t.acc(b).noalias() += t.val(a).transpose() * g;
    });
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Mat out = val(a) + val(b);
    return binary(std::move(out), a, b, [a, b](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a) += g;
      if (t.wants(b)) t.acc(b) += g;
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Mat out = val(a) - val(b);
    return binary(std::move(out), a, b, [a, b](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a) += g;
      if (t.wants(b)) t.acc(b) -= g;
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Mat out = val(a).cwiseProduct(val(b));
    return binary(std::move(out), a, b, [a, b](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a).array() += g.array() * t.val(b).array();
      if (t.wants(b)) t.acc(b).array() += g.array() * t.val(a).array();
    });
  }

  // a: m x n, bias: m x 1, broadcast over columns.
  Var add_colvec(Var a, Var bias) {
    const Mat& A = val(a);
    const Mat& B = val(bias);
    check(B.cols() == 1 && B.rows() == A.rows(), "add_colvec: bias shape");
    Mat out = A.colwise() + B.col(0);
    return binary(std::move(out), a, bias, [a, bias](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a) += g;
      if (t.wants(bias)) t.acc(bias) += g.rowwise().sum();
    });
  }

  // a: m x n, s: m x 1; row i scaled by s_i.
  Var mul_colvec(Var a, Var s) {
    const Mat& A = val(a);
    const Mat& V = val(s);
    check(V.cols() == 1 && V.rows() == A.rows(), "mul_colvec: scale shape");
    Mat out = V.col(0).asDiagonal() * A;
    return binary(std::move(out), a, s, [a, s](Tape& t) {
      const Mat& g = t.out_grad();
      if (t.wants(a)) t.acc(a) += t.val(s).col(0).asDiagonal() * g;
      if (t.wants(s)) t.acc(s) += g.cwiseProduct(t.val(a)).rowwise().sum();
    });
  }

  Var scale(Var a, S k) {
    Mat out = val(a) * k;
    return unary(std::move(out), a,
                 [a, k](Tape& t) { t.acc(a) += t.out_grad() * k; });
  }

  Var add_scalar(Var a, S k) {
    Mat out = (val(a).array() + k).matrix();
    return unary(std::move(out), a,
                 [a](Tape& t) { t.acc(a) += t.out_grad(); });
  }

  Var neg(Var a) { return scale(a, S(-1)); }

  // --- shape ---------------------------------------------------------------

  Var concat_rows(std::span<const Var> parts) {
    check(!parts.empty(), "concat_rows: empty");
    Eigen::Index rows = 0, cols = val(parts[0]).cols();
    for (Var p : parts) {
      check(val(p).cols() == cols, "concat_rows: column counts differ");
      rows += val(p).rows();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    bool any = false;
    for (Var p : parts) any = any || node(p).needs_grad;
    return push(std::move(out), grad_ && any, [ps](Tape& t) {
      const Mat& g = t.out_grad();
      Eigen::Index r = 0;
      for (Var p : ps) {
        Eigen::Index h = t.val(p).rows();
        if (t.wants(p)) t.acc(p) += g.middleRows(r, h);
        r += h;
      }
    });
  }

  Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var slice_rows(Var a, int r0, int nrows) {
    const Mat& A = val(a);
    check(r0 >= 0 && r0 + nrows <= A.rows(), "slice_rows: out of range");
    Mat out = A.middleRows(r0, nrows);
    return unary(std::move(out), a, [a, r0, nrows](Tape& t) {
      t.acc(a).middleRows(r0, nrows) += t.out_grad();
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    check(!parts.empty(), "concat_cols: empty");
    Eigen::Index cols = 0, rows = val(parts[0]).rows();
    for (Var p : parts) {
      check(val(p).rows() == rows, "concat_cols: row counts differ");
      cols += val(p).cols();
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    bool any = false;
    for (Var p : parts) any = any || node(p).needs_grad;
    return push(std::move(out), grad_ && any, [ps](Tape& t) {
      const Mat& g = t.out_grad();
      Eigen::Index c = 0;
      for (Var p : ps) {
        Eigen::Index w = t.val(p).cols();
        if (t.wants(p)) t.acc(p) += g.middleCols(c, w);
        c += w;
      }
    });
  }

  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var slice_cols(Var a, int c0, int ncols) {
    const Mat& A = val(a);
    check(c0 >= 0 && c0 + ncols <= A.cols(), "slice_cols: out of range");
    Mat out = A.middleCols(c0, ncols);
    return unary(std::move(out), a, [a, c0, ncols](Tape& t) {
      t.acc(a).middleCols(c0, ncols) += t.out_grad();
    });
  }

  // --- pointwise nonlinearities --------------------------------------------

  Var sigmoid(Var a) {
    Mat out = (((-val(a).array()).exp() + S(1)).inverse()).matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      const Arr y = t.out_val().array();
      t.acc(a).array() += t.out_grad().array() * y * (S(1) - y);
    });
  }

  Var tanh_(Var a) {
    Mat out = val(a).array().tanh().matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      const Arr y = t.out_val().array();
      t.acc(a).array() += t.out_grad().array() * (S(1) - y.square());
    });
  }

  Var silu(Var a) {
    Arr sig = ((-val(a).array()).exp() + S(1)).inverse();
    Mat out = (val(a).array() * sig).matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      const Arr x = t.val(a).array();
      const Arr sg = ((-x).exp() + S(1)).inverse();
      t.acc(a).array() += t.out_grad().array() * (sg + x * sg * (S(1) - sg));
    });
  }

  Var exp_(Var a) {
    Mat out = val(a).array().exp().matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a).array() += t.out_grad().array() * t.out_val().array();
    });
  }

  Var log_(Var a) {
    Mat out = val(a).array().log().matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a).array() += t.out_grad().array() / t.val(a).array();
    });
  }

  Var square(Var a) {
    Mat out = val(a).array().square().matrix();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a).array() += t.out_grad().array() * S(2) * t.val(a).array();
    });
  }

  Var softplus(Var a) {
    Mat out = val(a).unaryExpr(
        [](S x) { return x > S(20) ? x : S(std::log1p(std::exp(x))); });
    return unary(std::move(out), a, [a](Tape& t) {
      const Arr sg = ((-t.val(a).array()).exp() + S(1)).inverse();
      t.acc(a).array() += t.out_grad().array() * sg;
    });
  }

  // max(a, c); subgradient passes where a >= c.
  Var maximum(Var a, S c) {
    Mat out = val(a).cwiseMax(c);
    return unary(std::move(out), a, [a, c](Tape& t) {
      const Arr mask = (t.val(a).array() >= c).template cast<S>();
      t.acc(a).array() += t.out_grad().array() * mask;
    });
  }

  Var stopgrad(Var a) { return constant(val(a)); }

  // --- normalization -------------------------------------------------------

  // Per-column standardization over the feature rows (no affine part).
  Var layer_norm(Var a, S eps = S(1e-3)) {
    const Mat& A = val(a);
    Row mu = A.colwise().mean();
    Mat centered = A.rowwise() - mu;
    Row var = centered.array().square().colwise().mean().matrix();
    Row istd = (var.array() + eps).rsqrt().matrix();
    Mat out = centered * istd.asDiagonal();
    Mat xhat = out;
    return unary(std::move(out), a,
                 [a, xhat = std::move(xhat), istd = std::move(istd)](Tape& t) {
                   const Mat& g = t.out_grad();
                   Row gmean = g.colwise().mean();
                   Row gxmean =
                       (g.array() * xhat.array()).colwise().mean().matrix();
                   Mat dx = g.rowwise() - gmean;
                   dx.noalias() -= xhat * gxmean.asDiagonal();
                   t.acc(a).noalias() += dx * istd.asDiagonal();
                 });
  }

  // --- grouped softmax (rows = groups * klass, softmax within each group) ---

  Var softmax_groups(Var a, int groups, int klass) {
    const Mat& A = val(a);
    check(A.rows() == Eigen::Index(groups) * klass, "softmax_groups: rows");
    Mat out(A.rows(), A.cols());
    for (int gi = 0; gi < groups; ++gi) {
      auto block = A.middleRows(Eigen::Index(gi) * klass, klass);
      Row mx = block.colwise().maxCoeff();
      Mat e = (block.rowwise() - mx).array().exp().matrix();
      Row zinv = e.colwise().sum().array().inverse().matrix();
      out.middleRows(Eigen::Index(gi) * klass, klass) = e * zinv.asDiagonal();
    }
    return unary(std::move(out), a, [a, groups, klass](Tape& t) {
      const Mat& g = t.out_grad();
      const Mat& p = t.out_val();
      Mat dx(p.rows(), p.cols());
      for (int gi = 0; gi < groups; ++gi) {
        auto pg = p.middleRows(Eigen::Index(gi) * klass, klass);
        auto gg = g.middleRows(Eigen::Index(gi) * klass, klass);
        Row dot = (pg.array() * gg.array()).colwise().sum().matrix();
        dx.middleRows(Eigen::Index(gi) * klass, klass) =
            pg.cwiseProduct(gg) - pg * dot.asDiagonal();
      }
      t.acc(a) += dx;
    });
  }

  Var log_softmax_groups(Var a, int groups, int klass) {
    const Mat& A = val(a);
    check(A.rows() == Eigen::Index(groups) * klass,
          "log_softmax_groups: rows");
    Mat out(A.rows(), A.cols());
    for (int gi = 0; gi < groups; ++gi) {
      auto block = A.middleRows(Eigen::Index(gi) * klass, klass);
      Row mx = block.colwise().maxCoeff();
      Mat shifted = block.rowwise() - mx;
      Row lse = shifted.array().exp().colwise().sum().log().matrix();
      out.middleRows(Eigen::Index(gi) * klass, klass) =
          shifted.rowwise() - lse;
    }
    return unary(std::move(out), a, [a, groups, klass](Tape& t) {
      const Mat& g = t.out_grad();
      const Mat& lp = t.out_val();
      Mat dx(lp.rows(), lp.cols());
      for (int gi = 0; gi < groups; ++gi) {
        auto lpg = lp.middleRows(Eigen::Index(gi) * klass, klass);
        auto gg = g.middleRows(Eigen::Index(gi) * klass, klass);
        Row gsum = gg.colwise().sum();
        dx.middleRows(Eigen::Index(gi) * klass, klass) =
            gg - lpg.array().exp().matrix() * gsum.asDiagonal();
      }
      t.acc(a) += dx;
    });
  }

  // --- reductions ----------------------------------------------------------

  Var sum_over_rows(Var a) {  // m x n -> 1 x n
    Mat out = val(a).colwise().sum();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a) += t.out_grad().row(0).replicate(t.val(a).rows(), 1);
    });
  }

  Var sum_over_cols(Var a) {  // m x n -> m x 1
    Mat out = val(a).rowwise().sum();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a) += t.out_grad().col(0).replicate(1, t.val(a).cols());
    });
  }

  Var sum_all(Var a) {  // -> 1 x 1
    Mat out(1, 1);
    out(0, 0) = val(a).sum();
    return unary(std::move(out), a, [a](Tape& t) {
      t.acc(a).array() += t.out_grad()(0, 0);
    });
  }

  Var mean_all(Var a) {
    S inv = S(1) / static_cast<S>(val(a).size());
    Mat out(1, 1);
    out(0, 0) = val(a).sum() * inv;
    return unary(std::move(out), a, [a, inv](Tape& t) {
      t.acc(a).array() += t.out_grad()(0, 0) * inv;
    });
  }

  // --- backward ------------------------------------------------------------

  void backward(Var root) {
    check(grad_, "backward: tape was built with grad disabled");
    Node& r = node(root);
    check(r.val.rows() == 1 && r.val.cols() == 1, "backward: root not scalar");
    acc(root).setOnes();
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.back && n.grad.size() > 0) {
        out_ = Var{id};
        n.back(*this);
      }
    }
  }

  S scalar(Var v) const {
    check(val(v).size() == 1, "scalar: not a 1x1 value");
    return val(v)(0, 0);
  }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };

  Node& node(Var v) {
    check(v.id >= 0 && v.id < size(), "tensor: invalid var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    check(v.id >= 0 && v.id < size(), "tensor: invalid var");
    return nodes_[v.id];
  }

  const Mat& out_val() const { return nodes_[out_.id].val; }
  const Mat& out_grad() const { return nodes_[out_.id].grad; }

  bool wants(Var v) const { return node(v).needs_grad; }

  // Lazily-allocated gradient accumulator.
  Mat& acc(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  Var push(Mat v, bool needs, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{size() - 1};
  }

  Var unary(Mat out, Var a, std::function<void(Tape&)> back) {
    bool needs = grad_ && node(a).needs_grad;
    return push(std::move(out), needs, needs ? std::move(back) : nullptr);
  }

  Var binary(Mat out, Var a, Var b, std::function<void(Tape&)> back) {
    bool needs = grad_ && (node(a).needs_grad || node(b).needs_grad);
    return push(std::move(out), needs, needs ? std::move(back) : nullptr);
  }

  void check_same_shape(Var a, Var b, const char* what) {
    check(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
          std::string(what) + ": shape mismatch");
  }

  std::vector<Node> nodes_;
  bool grad_;
  Var out_;  // node being differentiated inside a backward closure
};

}  // namespace crlab
