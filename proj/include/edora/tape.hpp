// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "edora/tensor.hpp"

namespace edora {

/// Guard added to every inverted norm so zero columns cannot produce NaN.
inline constexpr double kNormEpsilon = 1e-12;

/// Reverse-mode gradient tape. Operations on tensors record themselves here
/// when any input is tracked; `backward` then replays the records in reverse
/// creation order (reverse topological order for a define-by-run graph) and
/// accumulates gradients by summation.
///
/// A tape is rebuilt per forward pass and is single-threaded; parallelism
/// belongs across independent tapes, never within one.
template <typename Scalar>
class TapeT {
 public:
  using T = TensorT<Scalar>;
  using Mat = typename T::Mat;
  using PullFn = std::function<void(const Mat&, TapeT&)>;

  /// Registers `value` as a leaf that accumulates gradient.
  T watch(const T& value) {
    T leaf = value;
    leaf.tape_ = this;
    leaf.node_ = register_value(value.rows(), value.cols());
    leaf.requires_grad_ = true;
    return leaf;
  }

  /// Gradient of the last `backward` w.r.t. a tracked tensor. Untouched
  /// tracked values yield zeros of their own shape.
  T grad(const T& t) const {
    if (t.tape_ != this || t.node_ < 0)
      throw ContractError("grad: tensor is not tracked on this tape");
    const auto& g = grads_[static_cast<std::size_t>(t.node_)];
    if (g.size() == 0) {
      return T::from_matrix(Mat::Zero(dims_[static_cast<std::size_t>(t.node_)].first,
                                      dims_[static_cast<std::size_t>(t.node_)].second));
    }
    return T::from_matrix(g);
  }

  /// Runs reverse-mode accumulation from a scalar loss.
  void run_backward(const T& loss) {
    if (!loss.is_scalar())
      throw ContractError("backward: loss must be scalar, got " + loss.shape_str());
    if (loss.tape_ != this || loss.node_ < 0)
      throw ContractError("backward: loss is not tracked on this tape");
    grads_.assign(dims_.size(), Mat());
    grads_[static_cast<std::size_t>(loss.node_)] = Mat::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const Mat& g = grads_[static_cast<std::size_t>(it->out)];
      if (g.size() == 0) continue;
      it->pull(g, *this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  // --- recording interface (used by the op free functions) -----------------

  int register_value(Index rows, Index cols) {
    dims_.emplace_back(rows, cols);
    grads_.emplace_back();
    return static_cast<int>(dims_.size()) - 1;
  }

  /// Binds `result` to this tape and appends its pull function.
  void record(T& result, PullFn pull) {
    result.tape_ = this;
    result.node_ = register_value(result.rows(), result.cols());
    result.requires_grad_ = true;
    nodes_.push_back(Node{result.node_, std::move(pull)});
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& contribution) {
    Mat& g = grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0)
      g = Mat::Zero(dims_[static_cast<std::size_t>(id)].first,
                    dims_[static_cast<std::size_t>(id)].second);
    g += contribution;
  }

  /// Accumulates into a rectangular block of the target gradient.
  template <typename Derived>
  void accumulate_block(int id, Index row0, Index col0,
                        const Eigen::MatrixBase<Derived>& contribution) {
    Mat& g = grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0)
      g = Mat::Zero(dims_[static_cast<std::size_t>(id)].first,
                    dims_[static_cast<std::size_t>(id)].second);
    g.block(row0, col0, contribution.rows(), contribution.cols()) += contribution;
  }

 private:
  struct Node {
    int out;
    PullFn pull;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<Index, Index>> dims_;
  std::vector<Mat> grads_;
};

using Tape = TapeT<double>;

namespace detail {

template <typename Scalar>
TapeT<Scalar>* tape_of(std::initializer_list<const TensorT<Scalar>*> inputs) {
  TapeT<Scalar>* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape())
      throw ContractError("operation mixes tensors from two different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename Scalar>
bool any_tracked(std::initializer_list<const TensorT<Scalar>*> inputs) {
  for (const auto* t : inputs)
    if (t->tracked()) return true;
  return false;
}

template <typename Scalar>
void require_matrix(const TensorT<Scalar>& t, const char* op) {
  if (t.ndim() > 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + t.shape_str());
}

}  // namespace detail

// --- primitive operations ---------------------------------------------------

/// Standard matrix product. Recorded when either input requires gradients.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + a.shape_str() + " vs " +
                         b.shape_str());
  T r = T::from_expr(a.matrix() * b.matrix());
  auto* tape = detail::tape_of<S>({&a, &b});
  if (tape && detail::any_tracked<S>({&a, &b})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ib = b.tracked() ? b.node() : -1;
    tape->record(r, [ia, ib, a, b](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, g * b.matrix().transpose());
      if (ib >= 0) t.accumulate(ib, a.matrix().transpose() * g);
    });
  }
  return r;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "transpose");
  T r = T::from_expr(a.matrix().transpose());
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    tape->record(r, [ia](const Mat& g, TapeT<S>& t) { t.accumulate(ia, g.transpose()); });
  }
  return r;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("add: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  T r = T::from_expr(a.matrix() + b.matrix());
  if (auto* tape = detail::tape_of<S>({&a, &b}); tape && detail::any_tracked<S>({&a, &b})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ib = b.tracked() ? b.node() : -1;
    tape->record(r, [ia, ib](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, g);
      if (ib >= 0) t.accumulate(ib, g);
    });
  }
  return r;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("sub: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  T r = T::from_expr(a.matrix() - b.matrix());
  if (auto* tape = detail::tape_of<S>({&a, &b}); tape && detail::any_tracked<S>({&a, &b})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ib = b.tracked() ? b.node() : -1;
    tape->record(r, [ia, ib](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, g);
      if (ib >= 0) t.accumulate(ib, -g);
    });
  }
  return r;
}

/// Elementwise product of same-shape matrices.
template <typename S>
TensorT<S> hadamard(const TensorT<S>& a, const TensorT<S>& b) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("hadamard: shape mismatch, " + a.shape_str() + " vs " +
                         b.shape_str());
  T r = T::from_expr(a.matrix().cwiseProduct(b.matrix()));
  if (auto* tape = detail::tape_of<S>({&a, &b}); tape && detail::any_tracked<S>({&a, &b})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ib = b.tracked() ? b.node() : -1;
    tape->record(r, [ia, ib, a, b](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, g.cwiseProduct(b.matrix()));
      if (ib >= 0) t.accumulate(ib, g.cwiseProduct(a.matrix()));
    });
  }
  return r;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  T r = T::from_expr(a.matrix() * factor);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    tape->record(r, [ia, factor](const Mat& g, TapeT<S>& t) { t.accumulate(ia, g * factor); });
  }
  return r;
}

/// out(i,j) = a(i,j) + bias(0,i) — one bias per row.
template <typename S>
TensorT<S> add_bias_rows(const TensorT<S>& a, const TensorT<S>& bias) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (bias.rows() != 1 || bias.cols() != a.rows())
    throw DimensionError("add_bias_rows: bias " + bias.shape_str() + " does not match rows of " +
                         a.shape_str());
  Mat out = a.matrix();
  out.colwise() += bias.matrix().transpose().col(0);
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a, &bias}); tape && detail::any_tracked<S>({&a, &bias})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ib = bias.tracked() ? bias.node() : -1;
    tape->record(r, [ia, ib](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, g);
      if (ib >= 0) t.accumulate(ib, g.rowwise().sum().transpose());
    });
  }
  return r;
}

/// out(i,j) = a(i,j) * s(0,i) — one factor per row.
template <typename S>
TensorT<S> scale_rows(const TensorT<S>& a, const TensorT<S>& s) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (s.rows() != 1 || s.cols() != a.rows())
    throw DimensionError("scale_rows: scale " + s.shape_str() + " does not match rows of " +
                         a.shape_str());
  Mat out = a.matrix().array().colwise() * s.matrix().transpose().col(0).array();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a, &s}); tape && detail::any_tracked<S>({&a, &s})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int is = s.tracked() ? s.node() : -1;
    tape->record(r, [ia, is, a, s](const Mat& g, TapeT<S>& t) {
      if (ia >= 0)
        t.accumulate(ia, (g.array().colwise() * s.matrix().transpose().col(0).array()).matrix());
      if (is >= 0) t.accumulate(is, g.cwiseProduct(a.matrix()).rowwise().sum().transpose());
    });
  }
  return r;
}

/// out(i,j) = a(i,j) * s(0,j) — one factor per column.
template <typename S>
TensorT<S> scale_cols(const TensorT<S>& a, const TensorT<S>& s) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (s.rows() != 1 || s.cols() != a.cols())
    throw DimensionError("scale_cols: scale " + s.shape_str() + " does not match cols of " +
                         a.shape_str());
  Mat out = a.matrix().array().rowwise() * s.matrix().row(0).array();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a, &s}); tape && detail::any_tracked<S>({&a, &s})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int is = s.tracked() ? s.node() : -1;
    tape->record(r, [ia, is, a, s](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, (g.array().rowwise() * s.matrix().row(0).array()).matrix());
      if (is >= 0) t.accumulate(is, g.cwiseProduct(a.matrix()).colwise().sum());
    });
  }
  return r;
}

/// out(i,j) = a(i,j) / max(s(0,j), eps) — guarded per-column division. The
/// floor keeps zero divisors finite without perturbing ordinary columns, so
/// inverting a norm and rescaling by it round-trips to machine precision.
template <typename S>
TensorT<S> div_cols(const TensorT<S>& a, const TensorT<S>& s, S eps = S(kNormEpsilon)) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (s.rows() != 1 || s.cols() != a.cols())
    throw DimensionError("div_cols: divisor " + s.shape_str() + " does not match cols of " +
                         a.shape_str());
  auto denom = s.matrix().row(0).array().max(eps).eval();
  Mat out = a.matrix().array().rowwise() / denom;
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a, &s}); tape && detail::any_tracked<S>({&a, &s})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int is = s.tracked() ? s.node() : -1;
    auto active = (s.matrix().row(0).array() > eps).eval();
    tape->record(r, [ia, is, a, denom, active](const Mat& g, TapeT<S>& t) {
      if (ia >= 0) t.accumulate(ia, (g.array().rowwise() / denom).matrix());
      if (is >= 0) {
        auto num = (g.cwiseProduct(a.matrix()).colwise().sum().array());
        t.accumulate(is, (active.select(-num / (denom * denom), S(0))).matrix());
      }
    });
  }
  return r;
}

/// Euclidean norm of each column: [p x q] -> [1 x q]. Zero columns produce 0;
/// consumers guard the division (see div_cols).
template <typename S>
TensorT<S> column_norm(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "column_norm");
  Mat out = a.matrix().colwise().norm();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    auto norms = out.row(0).array().max(S(kNormEpsilon)).eval();
    tape->record(r, [ia, a, norms](const Mat& g, TapeT<S>& t) {
      auto unit = (a.matrix().array().rowwise() / norms).eval();
      t.accumulate(ia, (unit.rowwise() * g.row(0).array()).matrix());
    });
  }
  return r;
}

/// Splits a matrix into n equal contiguous column blocks, order preserved.
template <typename S>
std::vector<TensorT<S>> split_cols(const TensorT<S>& a, Index n) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "split_cols");
  if (n < 1) throw ValidationError("split_cols: part count must be >= 1");
  if (a.cols() % n != 0) throw IndivisibleError("split_cols", a.cols(), n);
  const Index w = a.cols() / n;
  auto* tape = detail::tape_of<S>({&a});
  std::vector<T> parts;
  parts.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    T part = T::from_expr(a.matrix().middleCols(i * w, w));
    if (tape && a.tracked()) {
      const int ia = a.node();
      const Index off = i * w;
      tape->record(part, [ia, off](const Mat& g, TapeT<S>& t) {
        t.accumulate_block(ia, 0, off, g);
      });
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

/// Concatenates matrices with equal row counts along columns.
template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (parts.empty()) throw ValidationError("concat_cols: no parts");
  const Index rows = parts.front().rows();
  Index cols = 0;
  TapeT<S>* tape = nullptr;
  bool tracked = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch, " + parts.front().shape_str() + " vs " +
                           p.shape_str());
    cols += p.cols();
    if (p.on_tape()) {
      if (tape && tape != p.tape())
        throw ContractError("concat_cols mixes tensors from two different tapes");
      tape = p.tape();
    }
    tracked = tracked || p.tracked();
  }
  Mat out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.matrix();
    off += p.cols();
  }
  T r = T::from_matrix(out);
  if (tape && tracked) {
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const auto& p : parts) {
      ids.push_back(p.tracked() ? p.node() : -1);
      widths.push_back(p.cols());
    }
    tape->record(r, [ids, widths](const Mat& g, TapeT<S>& t) {
      Index off = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= 0) t.accumulate(ids[i], g.middleCols(off, widths[i]));
        off += widths[i];
      }
    });
  }
  return r;
}

/// Splits a matrix into n equal contiguous row blocks, order preserved.
template <typename S>
std::vector<TensorT<S>> split_rows(const TensorT<S>& a, Index n) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "split_rows");
  if (n < 1) throw ValidationError("split_rows: part count must be >= 1");
  if (a.rows() % n != 0) throw IndivisibleError("split_rows", a.rows(), n);
  const Index h = a.rows() / n;
  auto* tape = detail::tape_of<S>({&a});
  std::vector<T> parts;
  parts.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    T part = T::from_expr(a.matrix().middleRows(i * h, h));
    if (tape && a.tracked()) {
      const int ia = a.node();
      const Index off = i * h;
      tape->record(part, [ia, off](const Mat& g, TapeT<S>& t) {
        t.accumulate_block(ia, off, 0, g);
      });
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

/// Concatenates matrices with equal column counts along rows.
template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  if (parts.empty()) throw ValidationError("concat_rows: no parts");
  const Index cols = parts.front().cols();
  Index rows = 0;
  TapeT<S>* tape = nullptr;
  bool tracked = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column mismatch, " + parts.front().shape_str() +
                           " vs " + p.shape_str());
    rows += p.rows();
    if (p.on_tape()) {
      if (tape && tape != p.tape())
        throw ContractError("concat_rows mixes tensors from two different tapes");
      tape = p.tape();
    }
    tracked = tracked || p.tracked();
  }
  Mat out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.matrix();
    off += p.rows();
  }
  T r = T::from_matrix(out);
  if (tape && tracked) {
    std::vector<int> ids;
    std::vector<Index> heights;
    for (const auto& p : parts) {
      ids.push_back(p.tracked() ? p.node() : -1);
      heights.push_back(p.rows());
    }
    tape->record(r, [ids, heights](const Mat& g, TapeT<S>& t) {
      Index off = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= 0) t.accumulate(ids[i], g.middleRows(off, heights[i]));
        off += heights[i];
      }
    });
  }
  return r;
}

/// Sum of all entries as a scalar tensor.
template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  T r = T::from_expr(Mat::Constant(1, 1, a.matrix().sum()));
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    const Index rows = a.rows(), cols = a.cols();
    tape->record(r, [ia, rows, cols](const Mat& g, TapeT<S>& t) {
      t.accumulate(ia, Mat::Constant(rows, cols, g(0, 0)));
    });
  }
  return r;
}

/// Exponential linear unit, alpha = 1.
template <typename S>
TensorT<S> elu(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  auto x = a.matrix().array();
  Mat out = (x > S(0)).select(x, x.exp() - S(1));
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    Mat slope = (x > S(0)).select(Mat::Ones(a.rows(), a.cols()).array(), out.array() + S(1));
    tape->record(r, [ia, slope](const Mat& g, TapeT<S>& t) {
      t.accumulate(ia, g.cwiseProduct(slope));
    });
  }
  return r;
}

/// Gaussian error linear unit (exact erf form).
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  constexpr S inv_sqrt2 = S(0.70710678118654752440);
  constexpr S inv_sqrt2pi = S(0.39894228040143267794);
  Mat cdf = a.matrix().unaryExpr(
      [](S v) { return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)); });
  Mat out = a.matrix().cwiseProduct(cdf);
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    Mat pdf_term = a.matrix().unaryExpr(
        [](S v) { return v * std::exp(-v * v * S(0.5)) * inv_sqrt2pi; });
    Mat slope = cdf + pdf_term;
    tape->record(r, [ia, slope](const Mat& g, TapeT<S>& t) {
      t.accumulate(ia, g.cwiseProduct(slope));
    });
  }
  return r;
}

/// Softmax along each row, computed with max subtraction.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& a) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "softmax_rows");
  Mat out = a.matrix();
  for (Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
    out.row(i) = row;
  }
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    tape->record(r, [ia, out](const Mat& g, TapeT<S>& t) {
      Mat dx(out.rows(), out.cols());
      for (Index i = 0; i < out.rows(); ++i) {
        const S inner = g.row(i).dot(out.row(i));
        dx.row(i) = (out.row(i).array() * (g.row(i).array() - inner)).matrix();
      }
      t.accumulate(ia, dx);
    });
  }
  return r;
}

/// Layer normalization of each column over the row (feature) axis, with
/// per-row gain and offset: out(i,j) = gain(i) * xhat(i,j) + offset(i).
template <typename S>
TensorT<S> layer_norm_cols(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& offset,
                           S eps = S(1e-5)) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "layer_norm_cols");
  if (gain.rows() != 1 || gain.cols() != a.rows() || offset.rows() != 1 ||
      offset.cols() != a.rows())
    throw DimensionError("layer_norm_cols: gain/offset " + gain.shape_str() +
                         " do not match rows of " + a.shape_str());
  const Index p = a.rows(), q = a.cols();
  Eigen::Array<S, 1, Eigen::Dynamic> mean = a.matrix().colwise().mean();
  Mat centered = a.matrix().rowwise() - mean.matrix();
  Eigen::Array<S, 1, Eigen::Dynamic> var =
      centered.array().square().colwise().sum() / S(p);
  Eigen::Array<S, 1, Eigen::Dynamic> inv_std = (var + eps).rsqrt();
  Mat xhat = centered.array().rowwise() * inv_std;
  Mat out = (xhat.array().colwise() * gain.matrix().transpose().col(0).array()).colwise() +
            offset.matrix().transpose().col(0).array();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a, &gain, &offset});
      tape && detail::any_tracked<S>({&a, &gain, &offset})) {
    const int ia = a.tracked() ? a.node() : -1;
    const int ig = gain.tracked() ? gain.node() : -1;
    const int io = offset.tracked() ? offset.node() : -1;
    tape->record(r, [ia, ig, io, xhat, inv_std, gain, p, q](const Mat& g, TapeT<S>& t) {
      if (ig >= 0) t.accumulate(ig, g.cwiseProduct(xhat).rowwise().sum().transpose());
      if (io >= 0) t.accumulate(io, g.rowwise().sum().transpose());
      if (ia >= 0) {
        Mat gg = g.array().colwise() * gain.matrix().transpose().col(0).array();
        Eigen::Array<S, 1, Eigen::Dynamic> mean_gg = gg.colwise().mean();
        Eigen::Array<S, 1, Eigen::Dynamic> mean_ggx =
            gg.cwiseProduct(xhat).colwise().sum().array() / S(p);
        Mat dx = ((gg.array().rowwise() - mean_gg) -
                  (xhat.array().rowwise() * mean_ggx))
                     .rowwise() *
                 inv_std;
        t.accumulate(ia, dx);
      }
    });
  }
  return r;
}

/// Mean over the batch of -log softmax(logits)[label], rows are trials.
/// Computed with max-subtraction stabilization.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(logits, "cross_entropy");
  const Index b = logits.rows(), k = logits.cols();
  if (static_cast<Index>(labels.size()) != b)
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(b) + " rows");
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ValidationError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                            std::to_string(k) + ")");
  Mat probs(b, k);
  S loss = S(0);
  for (Index i = 0; i < b; ++i) {
    auto row = logits.matrix().row(i).array();
    const S mx = row.maxCoeff();
    auto shifted = (row - mx).eval();
    const S lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp();
    loss -= shifted(labels[static_cast<std::size_t>(i)]) - lse;
  }
  loss /= S(b);
  T r = T::from_expr(Mat::Constant(1, 1, loss));
  if (auto* tape = detail::tape_of<S>({&logits}); tape && logits.tracked()) {
    const int il = logits.node();
    tape->record(r, [il, probs, labels, b](const Mat& g, TapeT<S>& t) {
      Mat d = probs;
      for (Index i = 0; i < b; ++i) d(i, labels[static_cast<std::size_t>(i)]) -= S(1);
      t.accumulate(il, d * (g(0, 0) / S(b)));
    });
  }
  return r;
}

/// Average pooling over columns with the given window and stride
/// (valid windows only).
template <typename S>
TensorT<S> avgpool_cols(const TensorT<S>& a, Index window, Index stride) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(a, "avgpool_cols");
  if (window < 1 || stride < 1)
    throw ValidationError("avgpool_cols: window and stride must be >= 1");
  if (a.cols() < window)
    throw DimensionError("avgpool_cols: " + std::to_string(a.cols()) +
                         " columns is shorter than window " + std::to_string(window));
  const Index q2 = (a.cols() - window) / stride + 1;
  Mat out(a.rows(), q2);
  for (Index u = 0; u < q2; ++u)
    out.col(u) = a.matrix().middleCols(u * stride, window).rowwise().mean();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    const Index rows = a.rows(), cols = a.cols();
    tape->record(r, [ia, rows, cols, window, stride, q2](const Mat& g, TapeT<S>& t) {
      Mat d = Mat::Zero(rows, cols);
      for (Index u = 0; u < q2; ++u)
        d.middleCols(u * stride, window).colwise() += g.col(u) / S(window);
      t.accumulate(ia, d);
    });
  }
  return r;
}

/// Collapses the channel axis of a filter bank: tmp is [F x C*T] with row f
/// holding channel-major blocks of length T, w is [F x C];
/// out(f,t) = sum_c w(f,c) * tmp(f, c*T + t).
template <typename S>
TensorT<S> channel_collapse(const TensorT<S>& tmp, const TensorT<S>& w, Index channels) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  detail::require_matrix(tmp, "channel_collapse");
  if (w.rows() != tmp.rows() || w.cols() != channels)
    throw DimensionError("channel_collapse: weights " + w.shape_str() + " do not match " +
                         tmp.shape_str() + " with " + std::to_string(channels) + " channels");
  if (tmp.cols() % channels != 0)
    throw IndivisibleError("channel_collapse", tmp.cols(), channels);
  const Index f = tmp.rows();
  const Index t_len = tmp.cols() / channels;
  Mat out = Mat::Zero(f, t_len);
  for (Index c = 0; c < channels; ++c)
    out.array() += tmp.matrix().middleCols(c * t_len, t_len).array().colwise() *
                   w.matrix().col(c).array();
  T r = T::from_matrix(out);
  if (auto* tape = detail::tape_of<S>({&tmp, &w}); tape && detail::any_tracked<S>({&tmp, &w})) {
    const int it = tmp.tracked() ? tmp.node() : -1;
    const int iw = w.tracked() ? w.node() : -1;
    tape->record(r, [it, iw, tmp, w, channels, f, t_len](const Mat& g, TapeT<S>& t) {
      if (iw >= 0) {
        Mat dw(f, channels);
        for (Index c = 0; c < channels; ++c)
          dw.col(c) =
              g.cwiseProduct(tmp.matrix().middleCols(c * t_len, t_len)).rowwise().sum();
        t.accumulate(iw, dw);
      }
      if (it >= 0) {
        Mat dtmp(f, channels * t_len);
        for (Index c = 0; c < channels; ++c)
          dtmp.middleCols(c * t_len, t_len) =
              g.array().colwise() * w.matrix().col(c).array();
        t.accumulate(it, dtmp);
      }
    });
  }
  return r;
}

/// Same data viewed with a new shape (flat row-major order preserved).
template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<Index> shape) {
  using T = TensorT<S>;
  using Mat = typename T::Mat;
  T r = a.reshaped(shape).with_requires_grad(false);
  if (auto* tape = detail::tape_of<S>({&a}); tape && a.tracked()) {
    const int ia = a.node();
    const Index rows = a.rows(), cols = a.cols();
    tape->record(r, [ia, rows, cols](const Mat& g, TapeT<S>& t) {
      t.accumulate(ia, Eigen::Map<const Mat>(g.data(), rows, cols));
    });
  }
  return r;
}

/// Spec-facing backward entry point.
template <typename S>
void backward(TapeT<S>& tape, const TensorT<S>& loss) {
  tape.run_backward(loss);
}

// --- gradient verification ---------------------------------------------------

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences. `f` must accept both tracked and plain tensors.
/// Returns the max elementwise relative error with denominator
/// max(|analytic|, |numeric|, 1e-12).
template <typename S, typename F>
double finite_diff_check(F&& f, const TensorT<S>& at, double step) {
  if (!(step > 0)) throw ValidationError("finite_diff_check: step must be positive");
  using T = TensorT<S>;
  TapeT<S> tape;
  T x = tape.watch(at);
  T y = f(x);
  if (!y.is_scalar())
    throw ContractError("finite_diff_check: f must return a scalar, got " + y.shape_str());
  tape.run_backward(y);
  T analytic = tape.grad(x);

  typename T::Flat base = at.flat();
  double max_rel = 0.0;
  for (Index i = 0; i < base.size(); ++i) {
    typename T::Flat hi = base, lo = base;
    hi[i] += S(step);
    lo[i] -= S(step);
    const double fp = static_cast<double>(f(T::from_flat(at.shape(), hi)).value());
    const double fm = static_cast<double>(f(T::from_flat(at.shape(), lo)).value());
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = static_cast<double>(analytic.flat()[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace edora
