// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "quad2lin/errors.hpp"

namespace q2l {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array. Value type: copies are deep, there are no strided views.
/// Autodiff bookkeeping (requires_grad, grad, tape node) lives in `Tape`, which
/// owns one Tensor per recorded node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  /// Rank-2 tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor vector(std::initializer_list<T> values);
  /// Entries drawn i.i.d. from N(0, std^2).
  static Tensor randn(Shape shape, Rng& rng, double std = 1.0);
  /// Entries drawn i.i.d. from U[lo, hi).
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of a rank-2 tensor; rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() & noexcept { return data_; }
  std::span<const T> span() const& noexcept { return data_; }
  std::span<const T> span() const&& = delete;
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  T item() const;

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;
  /// Copy of rows [begin, end).
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  /// Copy of columns [begin, end) of a rank-2 tensor.
  Tensor slice_cols(std::size_t begin, std::size_t end) const;

  void fill(T v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(T s);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;
  double max_abs() const;
  std::size_t bytes() const noexcept { return data_.size() * sizeof(T); }

  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// max_i |a_i - b_i|; shapes must match.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// Raw serialization: rank (u64 LE), dims (u64 LE each), then the elements as
/// little-endian IEEE scalars. No dtype tag; the reader must know T.
template <typename T>
void write_raw(std::ostream& os, const Tensor<T>& t);
template <typename T>
Tensor<T> read_raw(std::istream& is);
template <typename T>
std::vector<std::uint8_t> to_bytes(const Tensor<T>& t);
/// Throws CorruptionError when the buffer is truncated or has trailing bytes.
template <typename T>
Tensor<T> from_bytes(std::span<const std::uint8_t> bytes);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace q2l
