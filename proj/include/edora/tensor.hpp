// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "edora/errors.hpp"

namespace edora {

using Index = Eigen::Index;

template <typename Scalar>
class TapeT;

namespace detail {

inline std::string shape_string(const std::vector<Index>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline Index shape_product(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

}  // namespace detail

/// Dense tensor of Scalar with row-major flat storage and shape metadata.
///
/// Values are immutable once created; handles are cheap to copy and safe to
/// share across threads for reading. Rank-0 and rank-1 tensors view as 1x1
/// and 1xN matrices; rank-2 tensors view as their natural matrix. Higher
/// ranks carry flat data only (slice to matrices for math).
///
/// The scalar type is the precision switch: double is the project default,
/// float instantiates the same code for storage-constrained runs.
template <typename Scalar>
class TensorT {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Flat = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<const Mat>;

  TensorT() = default;

  static TensorT scalar(Scalar v) {
    Flat d(1);
    d[0] = v;
    return TensorT(std::vector<Index>{}, std::move(d));
  }

  static TensorT zeros(Index rows, Index cols) {
    return TensorT({rows, cols}, Flat::Zero(rows * cols));
  }

  static TensorT from_matrix(const Mat& m) {
    Flat d = Eigen::Map<const Flat>(m.data(), m.size());
    return TensorT({m.rows(), m.cols()}, std::move(d));
  }

  template <typename Derived>
  static TensorT from_expr(const Eigen::MatrixBase<Derived>& expr) {
    Mat m = expr;
    return from_matrix(m);
  }

  static TensorT from_flat(std::vector<Index> shape, Flat data) {
    return TensorT(std::move(shape), std::move(data));
  }

  static TensorT from_rows(std::initializer_list<std::initializer_list<Scalar>> rows) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r ? static_cast<Index>(rows.begin()->size()) : 0;
    Flat d(r * c);
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != c)
        throw DimensionError("from_rows: ragged row lengths");
      for (Scalar v : row) d[i++] = v;
    }
    return TensorT({r, c}, std::move(d));
  }

  /// Row vector [1xN].
  static TensorT row(std::initializer_list<Scalar> vals) {
    Flat d(static_cast<Index>(vals.size()));
    Index i = 0;
    for (Scalar v : vals) d[i++] = v;
    return TensorT({1, static_cast<Index>(vals.size())}, std::move(d));
  }

  bool defined() const { return static_cast<bool>(payload_); }
  const std::vector<Index>& shape() const { return payload_->shape; }
  Index ndim() const { return static_cast<Index>(payload_->shape.size()); }
  Index numel() const { return payload_->data.size(); }
  const Flat& flat() const { return payload_->data; }

  Index rows() const {
    switch (ndim()) {
      case 0: return 1;
      case 1: return 1;
      default: return payload_->shape[0];
    }
  }

  Index cols() const {
    switch (ndim()) {
      case 0: return 1;
      case 1: return payload_->shape[0];
      default: {
        Index c = 1;
        for (std::size_t i = 1; i < payload_->shape.size(); ++i) c *= payload_->shape[i];
        return c;
      }
    }
  }

  /// Matrix view of the data: rank <= 2 views naturally, higher ranks view
  /// as [shape[0] x rest] (rows stay contiguous in row-major layout).
  MatMap matrix() const { return MatMap(payload_->data.data(), rows(), cols()); }

  bool is_scalar() const { return numel() == 1; }

  Scalar value() const {
    if (!is_scalar())
      throw ContractError("value(): tensor " + shape_str() + " is not a scalar");
    return payload_->data[0];
  }

  Scalar operator()(Index r, Index c) const { return matrix()(r, c); }

  std::string shape_str() const { return detail::shape_string(payload_->shape); }

  /// Matrix slice of a rank-3 tensor along the leading axis.
  TensorT slice(Index i) const {
    if (ndim() != 3)
      throw DimensionError("slice: expected a rank-3 tensor, got " + shape_str());
    const Index r = payload_->shape[1];
    const Index c = payload_->shape[2];
    Flat d = payload_->data.segment(i * r * c, r * c);
    return TensorT({r, c}, std::move(d));
  }

  /// Same data, new shape (element count must match).
  TensorT reshaped(std::vector<Index> shape) const {
    if (detail::shape_product(shape) != numel())
      throw DimensionError("reshape: cannot view " + shape_str() + " as " +
                           detail::shape_string(shape));
    TensorT out;
    out.payload_ = std::make_shared<Payload>(Payload{std::move(shape), payload_->data});
    out.requires_grad_ = requires_grad_;
    return out;
  }

  bool all_finite() const { return payload_->data.isFinite().all(); }

  // --- gradient bookkeeping -------------------------------------------------

  bool requires_grad() const { return requires_grad_; }

  TensorT with_requires_grad(bool rg = true) const {
    TensorT t = *this;
    t.requires_grad_ = rg;
    return t;
  }

  /// True when this handle is linked to a tape (leaf or op result).
  bool on_tape() const { return tape_ != nullptr; }
  TapeT<Scalar>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Tape-tracked: gradients will reach this value during backward.
  bool tracked() const { return tape_ != nullptr && requires_grad_; }

 private:
  friend class TapeT<Scalar>;

  struct Payload {
    std::vector<Index> shape;
    Flat data;
  };

  TensorT(std::vector<Index> shape, Flat data) {
    if (detail::shape_product(shape) != data.size())
      throw DimensionError("tensor: shape " + detail::shape_string(shape) +
                           " does not match data length " + std::to_string(data.size()));
    payload_ = std::make_shared<Payload>(Payload{std::move(shape), std::move(data)});
  }

  std::shared_ptr<const Payload> payload_;
  TapeT<Scalar>* tape_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;
};

using Tensor = TensorT<double>;

}  // namespace edora
