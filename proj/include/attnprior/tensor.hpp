#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnprior {

/// 64-byte-aligned storage. Eigen's vectorized kernels choose peel/remainder
/// strategies from runtime pointer alignment; pinning the alignment makes
/// every run produce bit-identical sums regardless of heap layout.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class S>
using AlignedVec = std::vector<S, AlignedAllocator<S>>;

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Dense row-major n-d array of reals. Values are plain storage; autodiff
/// bookkeeping lives on the Tape, which refers to tensors by node id.
template <class S>
struct TensorT {
  Shape shape;
  AlignedVec<S> data;
  bool requires_grad = false;

  TensorT() = default;
  explicit TensorT(Shape sh, S fill = S(0), bool rg = false)
      : shape(std::move(sh)), data(static_cast<size_t>(shape_numel(shape)), fill), requires_grad(rg) {}
  TensorT(Shape sh, const std::vector<S>& values, bool rg = false)
      : shape(std::move(sh)), data(values.begin(), values.end()), requires_grad(rg) {
    if (static_cast<Index>(data.size()) != shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
  }

  Index numel() const { return static_cast<Index>(data.size()); }
  Index rows() const { return shape.empty() ? 1 : shape[0]; }
  Index cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool is_matrix() const { return shape.size() == 2; }
  bool is_scalar() const { return numel() == 1; }

  S& at(Index r, Index c) { return data[static_cast<size_t>(r * cols() + c)]; }
  S at(Index r, Index c) const { return data[static_cast<size_t>(r * cols() + c)]; }
  S scalar() const { return data.at(0); }

  Eigen::Map<MatX<S>> mat() {
    if (!is_matrix()) throw DimensionError("mat() on non-2d tensor " + shape_str(shape));
    return Eigen::Map<MatX<S>>(data.data(), rows(), cols());
  }
  Eigen::Map<const MatX<S>> mat() const {
    if (!is_matrix()) throw DimensionError("mat() on non-2d tensor " + shape_str(shape));
    return Eigen::Map<const MatX<S>>(data.data(), rows(), cols());
  }
  // View an [n, r, c] stack entry as an r-by-c matrix.
  Eigen::Map<MatX<S>> slab(Index i, Index r, Index c) {
    return Eigen::Map<MatX<S>>(data.data() + i * r * c, r, c);
  }
  Eigen::Map<const MatX<S>> slab(Index i, Index r, Index c) const {
    return Eigen::Map<const MatX<S>>(data.data() + i * r * c, r, c);
  }

  static TensorT zeros_like(const TensorT& t) { return TensorT(t.shape); }
  static TensorT from_matrix(const MatX<S>& m, bool rg = false) {
    TensorT t({m.rows(), m.cols()}, S(0), rg);
    t.mat() = m;
    return t;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace attnprior
