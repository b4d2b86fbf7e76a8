// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "quad2lin/rng.hpp"

namespace q2l {

static_assert(std::endian::native == std::endian::little,
              "raw tensor format assumes a little-endian host");

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, double std) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = static_cast<T>(rng.normal() * std);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_str(shape_));
  return shape_[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_str(shape_));
  return shape_[1];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::transposed() const {
  const std::size_t r = rows(), c = cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data_[j * r + i] = data_[i * c + j];
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::slice_rows(std::size_t begin, std::size_t end) const {
  const std::size_t c = cols();
  if (begin > end || end > rows()) {
    throw DimensionError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(shape_));
  }
  Shape s = shape_.size() == 1 ? Shape{(end - begin) * c} : Shape{end - begin, c};
  return Tensor(s, std::vector<T>(data_.begin() + begin * c, data_.begin() + end * c));
}

template <typename T>
Tensor<T> Tensor<T>::slice_cols(std::size_t begin, std::size_t end) const {
  const std::size_t r = rows(), c = cols();
  if (begin > end || end > c) {
    throw DimensionError("column slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(shape_));
  }
  const std::size_t w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(data_.begin() + i * c + begin, w, out.data_.begin() + i * w);
  return out;
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  if (other.data_.size() != data_.size()) {
    throw DimensionError("cannot add " + shape_str(other.shape_) + " into " + shape_str(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator*=(T s) {
  for (auto& x : data_) x *= s;
  return *this;
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
double Tensor<T>::max_abs() const {
  double m = 0.0;
  for (auto x : data_) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

template <typename T>
bool Tensor<T>::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), bytes()) == 0);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

template <typename T>
void write_raw(std::ostream& os, const Tensor<T>& t) {
  put_u64(os, t.rank());
  for (auto d : t.shape()) put_u64(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.bytes()));
}

template <typename T>
std::vector<std::uint8_t> to_bytes(const Tensor<T>& t) {
  std::vector<std::uint8_t> out((1 + t.rank()) * 8 + t.bytes());
  std::uint8_t* p = out.data();
  const std::uint64_t rank = t.rank();
  std::memcpy(p, &rank, 8);
  p += 8;
  for (auto d : t.shape()) {
    const std::uint64_t v = d;
    std::memcpy(p, &v, 8);
    p += 8;
  }
  if (t.bytes()) std::memcpy(p, t.data(), t.bytes());
  return out;
}

template <typename T>
Tensor<T> from_bytes(std::span<const std::uint8_t> bytes) {
  auto need = [&](std::size_t off, std::size_t n) {
    if (off + n > bytes.size()) throw CorruptionError("tensor blob truncated");
  };
  need(0, 8);
  std::uint64_t rank;
  std::memcpy(&rank, bytes.data(), 8);
  if (rank > 8) throw CorruptionError("tensor blob has implausible rank " + std::to_string(rank));
  need(8, rank * 8);
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint64_t d;
    std::memcpy(&d, bytes.data() + 8 + i * 8, 8);
    shape[i] = d;
  }
  const std::size_t off = 8 + rank * 8;
  const std::size_t n = shape_numel(shape);
  need(off, n * sizeof(T));
  if (off + n * sizeof(T) != bytes.size()) throw CorruptionError("tensor blob has trailing bytes");
  std::vector<T> data(n);
  if (n) std::memcpy(data.data(), bytes.data() + off, n * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> read_raw(std::istream& is) {
  auto get = [&](void* dst, std::size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw CorruptionError("tensor stream truncated");
  };
  std::uint64_t rank;
  get(&rank, 8);
  if (rank > 8) throw CorruptionError("tensor stream has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v;
    get(&v, 8);
    d = v;
  }
  std::vector<T> data(shape_numel(shape));
  if (!data.empty()) get(data.data(), data.size() * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template double max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template void write_raw(std::ostream&, const Tensor<float>&);
template void write_raw(std::ostream&, const Tensor<double>&);
template Tensor<float> read_raw<float>(std::istream&);
template Tensor<double> read_raw<double>(std::istream&);
template std::vector<std::uint8_t> to_bytes(const Tensor<float>&);
template std::vector<std::uint8_t> to_bytes(const Tensor<double>&);
template Tensor<float> from_bytes<float>(std::span<const std::uint8_t>);
template Tensor<double> from_bytes<double>(std::span<const std::uint8_t>);

}  // namespace q2l
