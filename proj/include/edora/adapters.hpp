// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edora/rng.hpp"
#include "edora/tape.hpp"
#include "edora/tensor.hpp"

namespace edora {

enum class AdapterKind { kLora, kDora, kEdora };

/// How an EDoRA segment normalizes: `kWeight` normalizes the adapted weight
/// matrix column-wise before applying it (each segment is a full DoRA
/// adapter, so n=1 reduces to DoRA exactly); `kFeature` normalizes each
/// column of the transformed features to unit length and then scales rows by
/// the magnitude vector.
enum class NormMode { kWeight, kFeature };

struct AdapterSpec {
  AdapterKind kind = AdapterKind::kEdora;
  int rank = 4;
  int segments = 1;  // always 1 for lora/dora
  NormMode norm_mode = NormMode::kWeight;
  double init_scale = 0.1;
};

inline std::string to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::kLora: return "lora";
    case AdapterKind::kDora: return "dora";
    default: return "edora";
  }
}

inline std::string to_string(NormMode m) {
  return m == NormMode::kWeight ? "weight" : "feature";
}

inline AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "lora") return AdapterKind::kLora;
  if (s == "dora") return AdapterKind::kDora;
  if (s == "edora") return AdapterKind::kEdora;
  throw ValidationError("unknown adapter kind '" + s + "' (expected lora, dora or edora)");
}

inline NormMode norm_mode_from_string(const std::string& s) {
  if (s == "weight") return NormMode::kWeight;
  if (s == "feature") return NormMode::kFeature;
  throw ValidationError("unknown norm mode '" + s + "' (expected weight or feature)");
}

inline void validate(const AdapterSpec& spec) {
  if (spec.rank < 1)
    throw ValidationError("adapter rank must be >= 1, got " + std::to_string(spec.rank));
  if (spec.segments < 1)
    throw ValidationError("adapter segments must be >= 1, got " +
                          std::to_string(spec.segments));
  if (spec.kind != AdapterKind::kEdora && spec.segments != 1)
    throw ValidationError("segments > 1 is only valid for edora, got " +
                          std::to_string(spec.segments) + " for " + to_string(spec.kind));
  if (spec.kind == AdapterKind::kEdora && spec.rank % spec.segments != 0)
    throw IndivisibleError("adapter rank", spec.rank, spec.segments);
}

/// A frozen base matrix plus its trainable adapter state.
///
/// Orientation: the base is stored [d x k] (input dim d down the rows, one
/// column per output unit) and applied to features as base^T * x with
/// x in [d x t]. Per segment i the down projection maps inputs to the
/// sub-adapter rank ((r/n) x d) and the up projection maps rank to outputs
/// (k x (r/n)), so the dense update is (up_i * down_i)^T in base orientation.
template <typename Scalar>
struct DecomposedWeightT {
  using T = TensorT<Scalar>;

  AdapterSpec spec;
  T base;                    // [d x k], never trainable
  std::vector<T> magnitude;  // n x [1 x k]; empty for lora
  std::vector<T> down;       // n x [(r/n) x d]
  std::vector<T> up;         // n x [k x (r/n)]

  Index in_dim() const { return base.rows(); }
  Index out_dim() const { return base.cols(); }
};

using DecomposedWeight = DecomposedWeightT<double>;

/// Splits a matrix into its column-wise magnitude and directional part:
/// returns (column norms, W). The reconstruction
/// scale_cols(div_cols(V, column_norm(V)), m) recovers W up to the norm
/// guard epsilon.
template <typename S>
std::pair<TensorT<S>, TensorT<S>> decompose(const TensorT<S>& weight) {
  return {column_norm(weight), weight};
}

/// Closed-form trainable parameter count for one adapted [d x k] matrix.
inline std::int64_t trainable_param_count(const AdapterSpec& spec, std::int64_t d,
                                          std::int64_t k) {
  validate(spec);
  if (d < 1 || k < 1)
    throw ValidationError("adapted matrix extents must be positive, got " + std::to_string(d) +
                          "x" + std::to_string(k));
  const std::int64_t r = spec.rank;
  switch (spec.kind) {
    case AdapterKind::kLora: return r * (d + k);
    case AdapterKind::kDora: return r * (d + k) + k;
    default: return r * (d + k) + static_cast<std::int64_t>(spec.segments) * k;
  }
}

/// Builds adapter state around a frozen base: up factors start at zero, down
/// factors are uniform in (-init_scale, init_scale) from the seeded stream,
/// magnitudes start at the base column norms. The adapted forward therefore
/// equals the frozen forward at initialization.
template <typename S>
DecomposedWeightT<S> init_adapter(const TensorT<S>& base, const AdapterSpec& spec,
                                  std::uint64_t seed) {
  validate(spec);
  using T = TensorT<S>;
  DecomposedWeightT<S> w;
  w.spec = spec;
  w.base = base;
  const Index d = base.rows();
  const Index k = base.cols();
  const Index sub_rank = spec.rank / spec.segments;
  Rng rng(seed);
  T norms = column_norm(base);
  for (int i = 0; i < spec.segments; ++i) {
    typename T::Flat a(sub_rank * d);
    for (Index j = 0; j < a.size(); ++j)
      a[j] = static_cast<S>(rng.uniform(-spec.init_scale, spec.init_scale));
    w.down.push_back(T::from_flat({sub_rank, d}, std::move(a)));
    w.up.push_back(T::zeros(k, sub_rank));
    if (spec.kind != AdapterKind::kLora) w.magnitude.push_back(norms);
  }
  return w;
}

namespace detail {

template <typename S>
void require_segments(const DecomposedWeightT<S>& w, int n, const char* op) {
  if (w.spec.segments != n || static_cast<int>(w.down.size()) != n)
    throw ValidationError(std::string(op) + ": expected an adapter with " + std::to_string(n) +
                          " segment(s), got " + std::to_string(w.spec.segments));
}

/// One weight-normalized segment: scale_cols(div_cols(W0 + delta, ||.||_c), m).
template <typename S>
TensorT<S> adapted_matrix(const TensorT<S>& base, const TensorT<S>& magnitude,
                          const TensorT<S>& down, const TensorT<S>& up) {
  TensorT<S> delta = matmul(transpose(down), transpose(up));
  TensorT<S> sum = add(base, delta);
  TensorT<S> direction = div_cols(sum, column_norm(sum));
  return scale_cols(direction, magnitude);
}

}  // namespace detail

/// Frozen-base forward with a low-rank update: base^T x + up (down x).
/// Gradients flow to the factors only.
template <typename S>
TensorT<S> lora_forward(const DecomposedWeightT<S>& w, const TensorT<S>& x) {
  detail::require_segments(w, 1, "lora_forward");
  return add(matmul(transpose(w.base), x), matmul(w.up[0], matmul(w.down[0], x)));
}

/// Weight-decomposed forward: the adapted matrix is renormalized column-wise
/// and rescaled by the magnitude vector before application. Gradients flow to
/// magnitude and factors, including through the column norm.
template <typename S>
TensorT<S> dora_forward(const DecomposedWeightT<S>& w, const TensorT<S>& x) {
  detail::require_segments(w, 1, "dora_forward");
  TensorT<S> adapted = detail::adapted_matrix(w.base, w.magnitude[0], w.down[0], w.up[0]);
  return matmul(transpose(adapted), x);
}

/// Ensemble forward: x is split into n contiguous column blocks, block i is
/// processed by sub-adapter i, outputs are concatenated in order.
template <typename S>
TensorT<S> edora_forward(const DecomposedWeightT<S>& w, const TensorT<S>& x,
                         const AdapterSpec& spec) {
  validate(spec);
  const int n = spec.segments;
  if (static_cast<int>(w.down.size()) != n)
    throw ValidationError("edora_forward: adapter holds " + std::to_string(w.down.size()) +
                          " segment(s) but spec asks for " + std::to_string(n));
  if (x.cols() % n != 0)
    throw IndivisibleError("edora_forward sequence length", x.cols(), n);
  std::vector<TensorT<S>> blocks = split_cols(x, n);
  std::vector<TensorT<S>> outputs;
  outputs.reserve(blocks.size());
  for (int i = 0; i < n; ++i) {
    if (spec.norm_mode == NormMode::kWeight) {
      TensorT<S> adapted =
          detail::adapted_matrix(w.base, w.magnitude[static_cast<std::size_t>(i)],
                                 w.down[static_cast<std::size_t>(i)],
                                 w.up[static_cast<std::size_t>(i)]);
      outputs.push_back(matmul(transpose(adapted), blocks[static_cast<std::size_t>(i)]));
    } else {
      TensorT<S> z = add(matmul(transpose(w.base), blocks[static_cast<std::size_t>(i)]),
                         matmul(w.up[static_cast<std::size_t>(i)],
                                matmul(w.down[static_cast<std::size_t>(i)],
                                       blocks[static_cast<std::size_t>(i)])));
      TensorT<S> unit = div_cols(z, column_norm(z));
      outputs.push_back(scale_rows(unit, w.magnitude[static_cast<std::size_t>(i)]));
    }
  }
  return concat_cols(outputs);
}

template <typename S>
TensorT<S> edora_forward(const DecomposedWeightT<S>& w, const TensorT<S>& x) {
  return edora_forward(w, x, w.spec);
}

/// Adapter forward dispatched on kind.
template <typename S>
TensorT<S> adapter_forward(const DecomposedWeightT<S>& w, const TensorT<S>& x) {
  switch (w.spec.kind) {
    case AdapterKind::kLora: return lora_forward(w, x);
    case AdapterKind::kDora: return dora_forward(w, x);
    default: return edora_forward(w, x);
  }
}

/// Collapses a single-segment adapter into one dense matrix in base
/// orientation: applying the result exactly like the base reproduces the
/// adapter forward.
template <typename S>
TensorT<S> merge(const DecomposedWeightT<S>& w) {
  if (w.spec.kind == AdapterKind::kEdora)
    throw UnsupportedError(
        "merge: an edora ensemble has no single equivalent matrix; use merge_segments for "
        "weight mode");
  detail::require_segments(w, 1, "merge");
  if (w.spec.kind == AdapterKind::kLora)
    return add(w.base, matmul(transpose(w.down[0]), transpose(w.up[0])));
  return detail::adapted_matrix(w.base, w.magnitude[0], w.down[0], w.up[0]);
}

/// Per-segment dense matrices of a weight-mode edora adapter, one per input
/// block. Feature mode normalizes activations, so no equivalent matrix
/// exists and the call is rejected.
template <typename S>
std::vector<TensorT<S>> merge_segments(const DecomposedWeightT<S>& w) {
  if (w.spec.kind != AdapterKind::kEdora)
    throw ValidationError("merge_segments: adapter kind is " + to_string(w.spec.kind));
  if (w.spec.norm_mode == NormMode::kFeature)
    throw UnsupportedError(
        "merge_segments: feature-mode edora normalizes transformed features and has no "
        "equivalent weight matrix");
  std::vector<TensorT<S>> merged;
  merged.reserve(w.down.size());
  for (std::size_t i = 0; i < w.down.size(); ++i)
    merged.push_back(detail::adapted_matrix(w.base, w.magnitude[i], w.down[i], w.up[i]));
  return merged;
}

}  // namespace edora
