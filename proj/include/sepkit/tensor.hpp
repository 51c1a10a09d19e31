// Copyright 2026 The Sepkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/errors.hpp"

namespace sepkit {

namespace detail {

// Fixed 64-byte alignment for tensor storage. Vectorized reductions split
// their scalar head by the buffer address, so a uniform alignment class is
// what makes two same-shaped computations bitwise identical regardless of
// where the heap placed them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

}  // namespace detail

// Dense row-major tensor of rank 1..3. Feature maps are stored as
// [channels, frames]; waveforms as [samples]. The scalar type is a template
// parameter so the same code runs in float for training and double for
// reference computations in tests.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using MatrixMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VectorMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    for (std::int64_t d : shape_) {
      if (d < 0) throw ShapeError("negative tensor dimension");
    }
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), S(0));
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor from_vector(std::vector<std::int64_t> shape, std::vector<S> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<std::int64_t>(values.size()) != numel_of(t.shape_)) {
      throw ShapeError("value count does not match tensor shape");
    }
    t.data_.assign(values.begin(), values.end());
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
  const S& at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * dim(1) + j)];
  }

  S& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  const S& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  // Matrix view of a rank-2 tensor.
  MatrixMap mat() {
    require_rank(2);
    return MatrixMap(data_.data(), dim(0), dim(1));
  }
  ConstMatrixMap mat() const {
    require_rank(2);
    return ConstMatrixMap(data_.data(), dim(0), dim(1));
  }

  // Flat column-vector view of any rank.
  VectorMap vec() { return VectorMap(data_.data(), numel()); }
  ConstVectorMap vec() const { return ConstVectorMap(data_.data(), numel()); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    std::vector<T> v(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) v[i] = static_cast<T>(data_[i]);
    return Tensor<T>::from_vector(shape_, std::move(v));
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ",";
      os << shape_[i];
    }
    os << "]";
    return os.str();
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  void require_rank(int r) const {
    if (rank() != r) {
      throw ShapeError("expected rank-" + std::to_string(r) + " tensor, got " + shape_str());
    }
  }

  std::vector<std::int64_t> shape_;
  std::vector<S, detail::AlignedAllocator<S>> data_;
};

// Throws unless the two shapes match. `what` names the operation for the
// error message.
template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

}  // namespace sepkit
