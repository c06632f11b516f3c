#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate value produced by the ops below. Ops whose
// inputs require a gradient also record a backward closure; Tape::backward
// replays those closures in reverse creation order. Leaves can reference
// external storage (model parameters) so building a graph never copies the
// backbone.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "psp/tensor.hpp"

namespace psp::ad {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // The referenced matrix must outlive the tape.
  Var leaf(const Matrix& external, bool requires_grad) {
    Node& n = nodes_.emplace_back();
    n.external = &external;
    n.requires_grad = requires_grad;
    return {nodes_.size() - 1};
  }

  Var constant(Matrix value) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    return {nodes_.size() - 1};
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external != nullptr ? *n.external : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  // Lazily allocated; zero until something flows into it.
  Matrix& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) {
      const Matrix& val = n.external != nullptr ? *n.external : n.owned;
      n.grad = Matrix::zeros(val.rows(), val.cols());
    }
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by ops: appends a computed node. The closure is dropped when no
  // input requires a gradient.
  Var push(Matrix value, bool requires_grad, std::function<void(Tape&, Var)> backward) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return {nodes_.size() - 1};
  }

  // Seeds d(root)/d(root) with `seed` (root must be 1 x 1) and propagates.
  void backward(Var root, Real seed = 1.0) {
    const Matrix& r = value(root);
    if (r.rows() != 1 || r.cols() != 1) {
      throw Error(ErrorCode::kShapeMismatch, "backward root must be scalar, got " + shape_string(r));
    }
    if (!requires_grad(root)) return;
    grad(root)(0, 0) += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, Var{i});
    }
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, Var)> backward;
  };
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops

inline Var gather_rows(Tape& t, Var table, std::vector<std::size_t> ids) {
  const Matrix& tab = t.value(table);
  Matrix out(ids.size(), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tab.rows()) {
      throw Error(ErrorCode::kShapeMismatch, "gather_rows: index " + std::to_string(ids[i]) +
                                                 " out of range for " + shape_string(tab));
    }
    auto src = tab.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return t.push(std::move(out), t.requires_grad(table),
                [table, ids = std::move(ids)](Tape& tp, Var self) {
                  const Matrix& g = tp.grad(self);
                  Matrix& gt = tp.grad(table);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    auto dst = gt.row(ids[i]);
                    auto src = g.row(i);
                    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                  }
                });
}

inline Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Matrix out = av;
  axpy(out, bv);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) axpy(tp.grad(a), g);
    if (tp.requires_grad(b)) axpy(tp.grad(b), g);
  });
}

// a [n x c] + broadcast row vector b [1 x c]
inline Var add_row(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "add_row: " + shape_string(av) + " + " + shape_string(bv));
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv(0, c);
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) axpy(tp.grad(a), g);
    if (tp.requires_grad(b)) {
      Matrix& gb = tp.grad(b);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb(0, c) += row[c];
      }
    }
  });
}

inline Var concat_rows(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "concat_rows: " + shape_string(av) + " ; " + shape_string(bv));
  }
  Matrix out(av.rows() + bv.rows(), av.cols());
  std::copy(av.data().begin(), av.data().end(), out.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const std::size_t split = av.size();
  return t.push(std::move(out), rg, [a, b, split](Tape& tp, Var self) {
    const auto& g = tp.grad(self).data();
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad(a).data();
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
}

inline Var slice_rows(Tape& t, Var a, std::size_t start, std::size_t count) {
  const Matrix& av = t.value(a);
  if (start + count > av.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "slice_rows out of range on " + shape_string(av));
  }
  Matrix out(count, av.cols());
  for (std::size_t r = 0; r < count; ++r) {
    auto src = av.row(start + r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return t.push(std::move(out), t.requires_grad(a), [a, start](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row(r);
      auto dst = ga.row(start + r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

inline Var slice_cols(Tape& t, Var a, std::size_t start, std::size_t width) {
  const Matrix& av = t.value(a);
  if (start + width > av.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "slice_cols out of range on " + shape_string(av));
  }
  Matrix out(av.rows(), width);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < width; ++c) out(r, c) = av(r, start + c);
  }
  return t.push(std::move(out), t.requires_grad(a), [a, start](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, start + c) += g(r, c);
    }
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  std::size_t rows = t.value(parts.at(0)).rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw Error(ErrorCode::kShapeMismatch, "concat_cols: row mismatch");
    cols += t.value(p).cols();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
    }
    offset += pv.cols();
  }
  return t.push(std::move(out), rg, [parts](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Matrix& gp = tp.grad(p);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
        }
      }
      off += w;
    }
  });
}

namespace detail {

// out += a [n x k] * b [k x m]
inline void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    Real* o = out.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a(i, p);
      if (av == 0.0) continue;
      const Real* br = b.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out += a [n x k] * b^T, b [m x k]
inline void gemm_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const Real* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const Real* br = b.data().data() + j * k;
      Real s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) += s;
    }
  }
}

// out += a^T * b, a [k x n], b [k x m]
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const Real* ar = a.data().data() + p * n;
    const Real* br = b.data().data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const Real av = ar[i];
      if (av == 0.0) continue;
      Real* o = out.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace detail

inline Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "matmul: " + shape_string(av) + " * " + shape_string(bv));
  }
  Matrix out(av.rows(), bv.cols());
  detail::gemm_nn(av, bv, out);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::gemm_nt(g, tp.value(b), tp.grad(a));
    if (tp.requires_grad(b)) detail::gemm_tn(tp.value(a), g, tp.grad(b));
  });
}

// a [n x k] * b^T where b is [m x k]
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "matmul_nt: " + shape_string(av) + " * " + shape_string(bv) + "^T");
  }
  Matrix out(av.rows(), bv.rows());
  detail::gemm_nt(av, bv, out);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::gemm_nn(g, tp.value(b), tp.grad(a));
    if (tp.requires_grad(b)) detail::gemm_tn(g, tp.value(a), tp.grad(b));
  });
}

inline Var scale(Tape& t, Var a, Real s) {
  Matrix out = t.value(a);
  for (auto& v : out.data()) v *= s;
  return t.push(std::move(out), t.requires_grad(a), [a, s](Tape& tp, Var self) {
    axpy(tp.grad(a), tp.grad(self), s);
  });
}

inline constexpr Real kLayerNormEps = 1e-5;

// Row-wise layer normalization with affine gamma/beta [1 x c].
inline Var layer_norm(Tape& t, Var x, Var gamma, Var beta) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const std::size_t n = xv.rows(), c = xv.cols();
  Matrix xhat(n, c);
  std::vector<Real> inv_std(n);
  Matrix out(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    Real mean = 0.0;
    for (Real v : row) mean += v;
    mean /= static_cast<Real>(c);
    Real var = 0.0;
    for (Real v : row) var += (v - mean) * (v - mean);
    var /= static_cast<Real>(c);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (row[j] - mean) * inv_std[r];
      out(r, j) = xhat(r, j) * gv(0, j) + bv(0, j);
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(out), rg,
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, Var self) {
                  const Matrix& g = tp.grad(self);
                  const Matrix& gv = tp.value(gamma);
                  const std::size_t n = g.rows(), c = g.cols();
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    Matrix* gg = tp.requires_grad(gamma) ? &tp.grad(gamma) : nullptr;
                    Matrix* gb = tp.requires_grad(beta) ? &tp.grad(beta) : nullptr;
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t j = 0; j < c; ++j) {
                        if (gg) (*gg)(0, j) += g(r, j) * xhat(r, j);
                        if (gb) (*gb)(0, j) += g(r, j);
                      }
                    }
                  }
                  if (tp.requires_grad(x)) {
                    Matrix& gx = tp.grad(x);
                    std::vector<Real> dxhat(c);
                    for (std::size_t r = 0; r < n; ++r) {
                      Real mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        dxhat[j] = g(r, j) * gv(0, j);
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat(r, j);
                      }
                      mean_d /= static_cast<Real>(c);
                      mean_dx /= static_cast<Real>(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        gx(r, j) += inv_std[r] * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                      }
                    }
                  }
                });
}

// tanh approximation of GELU; smooth everywhere, which keeps finite
// differences well behaved.
inline Var gelu(Tape& t, Var x) {
  constexpr Real kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr Real kA = 0.044715;
  const Matrix& xv = t.value(x);
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real v = xv.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, Var self) {
    const Matrix& xv = tp.value(x);
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const Real v = xv.data()[i];
      const Real th = std::tanh(kC * (v + kA * v * v * v));
      const Real d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

// Row-wise softmax. With `causal`, entry (i, j) is masked when j > i.
inline Var softmax_rows(Tape& t, Var x, bool causal) {
  const Matrix& xv = t.value(x);
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const std::size_t limit = causal ? std::min(r + 1, xv.cols()) : xv.cols();
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < limit; ++c) mx = std::max(mx, xv(r, c));
    Real sum = 0.0;
    for (std::size_t c = 0; c < limit; ++c) {
      out(r, c) = std::exp(xv(r, c) - mx);
      sum += out(r, c);
    }
    for (std::size_t c = 0; c < limit; ++c) out(r, c) /= sum;
  }
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, Var self) {
    const Matrix& p = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      Real dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) gx(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

// Sum over rows of -log softmax(logits[r])[targets[r]], skipping rows whose
// target equals `ignore`. Returns a 1 x 1 node.
inline Var cross_entropy_sum(Tape& t, Var logits, std::vector<std::size_t> targets, std::size_t ignore) {
  const Matrix& lv = t.value(logits);
  if (lv.rows() != targets.size()) {
    throw Error(ErrorCode::kShapeMismatch, "cross_entropy: " + std::to_string(lv.rows()) +
                                               " logit rows vs " + std::to_string(targets.size()) + " targets");
  }
  Matrix probs(lv.rows(), lv.cols());
  Real total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Real v : lv.row(r)) mx = std::max(mx, v);
    Real sum = 0.0;
    for (std::size_t c = 0; c < lv.cols(); ++c) {
      probs(r, c) = std::exp(lv(r, c) - mx);
      sum += probs(r, c);
    }
    for (std::size_t c = 0; c < lv.cols(); ++c) probs(r, c) /= sum;
    if (targets[r] == ignore) continue;
    if (targets[r] >= lv.cols()) throw Error(ErrorCode::kShapeMismatch, "cross_entropy: target out of vocab");
    total += -(lv(r, targets[r]) - mx - std::log(sum));
  }
  Matrix out(1, 1, total);
  return t.push(std::move(out), t.requires_grad(logits),
                [logits, targets = std::move(targets), ignore, probs = std::move(probs)](Tape& tp, Var self) {
                  const Real g = tp.grad(self)(0, 0);
                  Matrix& gl = tp.grad(logits);
                  for (std::size_t r = 0; r < probs.rows(); ++r) {
                    if (targets[r] == ignore) continue;
                    for (std::size_t c = 0; c < probs.cols(); ++c) {
                      gl(r, c) += g * (probs(r, c) - (c == targets[r] ? 1.0 : 0.0));
                    }
                  }
                });
}

}  // namespace psp::ad
