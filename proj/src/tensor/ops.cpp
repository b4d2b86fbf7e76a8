// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "quad2lin/kernels.hpp"
#include "quad2lin/scan_kernels.hpp"

namespace q2l::ops {

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 input, got " + shape_str(a.shape()));
  }
}

template <typename T>
std::size_t row_vector_len(const Var<T>& r, const char* op) {
  const auto& s = r.shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2 && s[0] == 1) return s[1];
  throw DimensionError(std::string(op) + ": expected row vector, got " + shape_str(s));
}

/// Pointwise op: y = f(x), dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return a.tape().record(std::move(y), {a}, [ai = a.id(), df](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& x = tp.value(ai);
    const Tensor<T>& y = tp.value(out);
    const Tensor<T>& gy = tp.grad(out);
    Tensor<T>& gx = tp.grad(ai);
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += gy[i] * df(x[i], y[i]);
  });
}

template <typename T>
T stable_softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> y(Shape{m, n});
  kernels::gemm_nn(a.value().data(), b.value().data(), y.data(), m, k, n);
  return a.tape().record(std::move(y), {a, b},
                         [ai = a.id(), bi = b.id(), m, k, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           if (tp.requires_grad(ai)) {
                             kernels::gemm_nt(gy.data(), tp.value(bi).data(), tp.grad(ai).data(), m,
                                              n, k, true);
                           }
                           if (tp.requires_grad(bi)) {
                             kernels::gemm_tn(tp.value(ai).data(), gy.data(), tp.grad(bi).data(), k,
                                              m, n, true);
                           }
                         });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> y = a.value();
  y += b.value();
  return a.tape().record(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    if (tp.requires_grad(ai)) tp.grad(ai) += gy;
    if (tp.requires_grad(bi)) tp.grad(bi) += gy;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    if (tp.requires_grad(ai)) tp.grad(ai) += gy;
    if (tp.requires_grad(bi)) {
      Tensor<T>& gb = tp.grad(bi);
      for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [ai = a.id(), bi = b.id()](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    if (tp.requires_grad(ai)) {
      Tensor<T>& ga = tp.grad(ai);
      const Tensor<T>& bv = tp.value(bi);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor<T>& gb = tp.grad(bi);
      const Tensor<T>& av = tp.value(ai);
      for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  require_rank2(a, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (row_vector_len(row, "add_row") != n) {
    throw DimensionError("add_row: " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  }
  Tensor<T> y = a.value();
  const T* r = row.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += r[j];
  return a.tape().record(std::move(y), {a, row},
                         [ai = a.id(), ri = row.id(), m, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           if (tp.requires_grad(ai)) tp.grad(ai) += gy;
                           if (tp.requires_grad(ri)) {
                             T* gr = tp.grad(ri).data();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gr[j] += gy[i * n + j];
                           }
                         });
}

template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  require_rank2(a, "mul_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (row_vector_len(row, "mul_row") != n) {
    throw DimensionError("mul_row: " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  }
  Tensor<T> y = a.value();
  const T* r = row.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= r[j];
  return a.tape().record(std::move(y), {a, row},
                         [ai = a.id(), ri = row.id(), m, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           const T* r = tp.value(ri).data();
                           const Tensor<T>& av = tp.value(ai);
                           if (tp.requires_grad(ai)) {
                             Tensor<T>& ga = tp.grad(ai);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[i * n + j] * r[j];
                           }
                           if (tp.requires_grad(ri)) {
                             T* gr = tp.grad(ri).data();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gr[j] += gy[i * n + j] * av[i * n + j];
                           }
                         });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
  const T c = static_cast<T>(s);
  return unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double s) {
  const T c = static_cast<T>(s);
  return unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scale(a, -1.0);
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return unary(a, [](T x) { return stable_softplus(x); }, [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return unary(
      a, [](T x) { return x * stable_sigmoid(x); },
      [](T x, T) {
        const T s = stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x); });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank2(a, "transpose");
  return a.tape().record(a.value().transposed(), {a}, [ai = a.id()](Tape<T>& tp, std::size_t out) {
    tp.grad(ai) += tp.grad(out).transposed();
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  return a.tape().record(a.value().reshaped(std::move(shape)), {a}, [ai = a.id()](Tape<T>& tp, std::size_t out) {
    tp.grad(ai) += tp.grad(out);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  const std::size_t n = a.shape()[1];
  return a.tape().record(a.value().slice_rows(begin, end), {a},
                         [ai = a.id(), begin, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           T* ga = tp.grad(ai).data() + begin * n;
                           for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
                         });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  return a.tape().record(a.value().slice_cols(begin, end), {a},
                         [ai = a.id(), begin, end, m, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           Tensor<T>& ga = tp.grad(ai);
                           const std::size_t w = end - begin;
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += gy[i * w + j];
                         });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].shape()[0];
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor<T> y(Shape{m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.value().data() + i * w, w, y.data() + i * total + off);
    off += w;
  }
  auto fn = [ids, widths, m, total](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (tp.requires_grad(ids[k])) {
        Tensor<T>& g = tp.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += gy[i * total + off + j];
      }
      off += w;
    }
  };
  return parts[0].tape().record(std::move(y), parts, fn);
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].shape()[1];
  std::vector<std::size_t> ids, counts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.shape()[1] != n) throw DimensionError("concat_rows: column counts differ");
    ids.push_back(p.id());
    counts.push_back(p.value().numel());
    total += p.shape()[0];
  }
  Tensor<T> y(Shape{total, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().numel(), y.data() + off);
    off += p.value().numel();
  }
  return parts[0].tape().record(std::move(y), parts, [ids, counts](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        Tensor<T>& g = tp.grad(ids[k]);
        for (std::size_t i = 0; i < counts[k]; ++i) g[i] += gy[off + i];
      }
      off += counts[k];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t rows = table.shape()[0], n = table.shape()[1];
  Tensor<T> y(Shape{ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                           shape_str(table.shape()));
    }
    std::copy_n(table.value().data() + ids[i] * n, n, y.data() + i * n);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return table.tape().record(std::move(y), {table}, [ti = table.id(), idx, n](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    Tensor<T>& g = tp.grad(ti);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += gy[i * n + j];
  });
}

template <typename T>
Var<T> interleave_rows(Var<T> a, std::span<const std::size_t> a_rows, Var<T> b,
                       std::span<const std::size_t> b_rows, std::size_t n_rows) {
  const std::size_t n = a.cols();
  if (b.cols() != n || a_rows.size() != a.rows() || b_rows.size() != b.rows() ||
      a_rows.size() + b_rows.size() != n_rows) {
    throw DimensionError("interleave_rows: inconsistent row maps");
  }
  Tensor<T> y(Shape{n_rows, n});
  std::vector<std::uint8_t> seen(n_rows, 0);
  auto place = [&](const Tensor<T>& src, std::span<const std::size_t> rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= n_rows || seen[rows[i]]) throw DimensionError("interleave_rows: bad row map");
      seen[rows[i]] = 1;
      std::copy_n(src.data() + i * n, n, y.data() + rows[i] * n);
    }
  };
  place(a.value(), a_rows);
  place(b.value(), b_rows);
  std::vector<std::size_t> ar(a_rows.begin(), a_rows.end()), br(b_rows.begin(), b_rows.end());
  return a.tape().record(std::move(y), {a, b},
                         [ai = a.id(), bi = b.id(), ar, br, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           auto take = [&](std::size_t id, const std::vector<std::size_t>& rows) {
                             if (!tp.requires_grad(id)) return;
                             Tensor<T>& g = tp.grad(id);
                             for (std::size_t i = 0; i < rows.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[rows[i] * n + j];
                           };
                           take(ai, ar);
                           take(bi, br);
                         });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = T(0);
  for (auto x : a.value().span()) s += x;
  return a.tape().record(Tensor<T>::scalar(s), {a}, [ai = a.id()](Tape<T>& tp, std::size_t out) {
    const T g = tp.grad(out)[0];
    for (auto& x : tp.grad(ai).span()) x += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> sum_rows(Var<T> a) {
  require_rank2(a, "sum_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> y(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j];
    y[i] = s;
  }
  return a.tape().record(std::move(y), {a}, [ai = a.id(), m, n](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& gy = tp.grad(out);
    Tensor<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[i];
  });
}

template <typename T>
Var<T> mean_rows(Var<T> a) {
  require_rank2(a, "mean_rows");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.shape()[1]));
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> weight, double eps) {
  require_rank2(x, "rms_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (row_vector_len(weight, "rms_norm") != n) {
    throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  }
  const T e = static_cast<T>(eps);
  auto inv = std::make_shared<std::vector<T>>(m);
  Tensor<T> y(Shape{m, n});
  const T* w = weight.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x.value().data() + i * n;
    const T ms = kernels::dot(xi, xi, n) / static_cast<T>(n);
    const T r = T(1) / std::sqrt(ms + e);
    (*inv)[i] = r;
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xi[j] * r * w[j];
  }
  return x.tape().record(std::move(y), {x, weight},
                         [xi = x.id(), wi = weight.id(), inv, m, n](Tape<T>& tp, std::size_t out) {
                           const Tensor<T>& gy = tp.grad(out);
                           const Tensor<T>& xv = tp.value(xi);
                           const T* w = tp.value(wi).data();
                           const bool gx_needed = tp.requires_grad(xi), gw_needed = tp.requires_grad(wi);
                           for (std::size_t i = 0; i < m; ++i) {
                             const T r = (*inv)[i];
                             const T* xr = xv.data() + i * n;
                             const T* gr = gy.data() + i * n;
                             if (gx_needed) {
                               T proj = T(0);
                               for (std::size_t j = 0; j < n; ++j) proj += gr[j] * w[j] * xr[j];
                               const T c = proj * r * r * r / static_cast<T>(n);
                               T* gx = tp.grad(xi).data() + i * n;
                               for (std::size_t j = 0; j < n; ++j) gx[j] += gr[j] * w[j] * r - xr[j] * c;
                             }
                             if (gw_needed) {
                               T* gw = tp.grad(wi).data();
                               for (std::size_t j = 0; j < n; ++j) gw[j] += gr[j] * xr[j] * r;
                             }
                           }
                         });
}

template <typename T>
Var<T> group_rms_norm(Var<T> x, std::size_t group_size, double eps) {
  require_rank2(x, "group_rms_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (group_size == 0 || n % group_size != 0) throw DimensionError("group_rms_norm: bad group size");
  const std::size_t rows = m * (n / group_size);
  // Row-major layout makes each column group of each row a contiguous run, so this is
  // rms_norm over a [rows x group_size] view with unit weight.
  Tape<T>& tp = x.tape();
  Var<T> flat = reshape(x, Shape{rows, group_size});
  Var<T> ones = tp.constant(Tensor<T>::ones(Shape{group_size}));
  return reshape(rms_norm(flat, ones, eps), Shape{m, n});
}

template <typename T>
Var<T> causal_depthwise_conv(Var<T> x, Var<T> kernel, Var<T> bias) {
  require_rank2(x, "causal_depthwise_conv");
  require_rank2(kernel, "causal_depthwise_conv");
  const std::size_t steps = x.shape()[0], c = x.shape()[1], w = kernel.shape()[0];
  if (w == 0) throw DimensionError("causal_depthwise_conv: kernel width must be >= 1");
  if (kernel.shape()[1] != c || row_vector_len(bias, "causal_depthwise_conv") != c) {
    throw DimensionError("causal_depthwise_conv: channel mismatch, x " + shape_str(x.shape()) + " kernel " +
                         shape_str(kernel.shape()) + " bias " + shape_str(bias.shape()));
  }
  Tensor<T> y(Shape{steps, c});
  const T* xv = x.value().data();
  const T* kv = kernel.value().data();
  const T* bv = bias.value().data();
  for (std::size_t t = 0; t < steps; ++t) {
    T* yt = y.data() + t * c;
    std::copy_n(bv, c, yt);
    for (std::size_t j = 0; j < w; ++j) {
      // source position t - (w-1) + j
      if (t + j + 1 < w) continue;
      const T* xs = xv + (t + j + 1 - w) * c;
      const T* kj = kv + j * c;
      for (std::size_t ch = 0; ch < c; ++ch) yt[ch] += kj[ch] * xs[ch];
    }
  }
  return x.tape().record(
      std::move(y), {x, kernel, bias},
      [xi = x.id(), ki = kernel.id(), bi = bias.id(), steps, c, w](Tape<T>& tp, std::size_t out) {
        const T* gy = tp.grad(out).data();
        const T* xv = tp.value(xi).data();
        const T* kv = tp.value(ki).data();
        T* gx = tp.requires_grad(xi) ? tp.grad(xi).data() : nullptr;
        T* gk = tp.requires_grad(ki) ? tp.grad(ki).data() : nullptr;
        T* gb = tp.requires_grad(bi) ? tp.grad(bi).data() : nullptr;
        for (std::size_t t = 0; t < steps; ++t) {
          const T* gt = gy + t * c;
          if (gb)
            for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += gt[ch];
          for (std::size_t j = 0; j < w; ++j) {
            if (t + j + 1 < w) continue;
            const std::size_t s = t + j + 1 - w;
            if (gx)
              for (std::size_t ch = 0; ch < c; ++ch) gx[s * c + ch] += kv[j * c + ch] * gt[ch];
            if (gk)
              for (std::size_t ch = 0; ch < c; ++ch) gk[j * c + ch] += xv[s * c + ch] * gt[ch];
          }
        }
      });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  require_rank2(a, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = a.value().data() + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(xi[j])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, xi[j]);
    }
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += (y[i * n + j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= s;
  }
  return a.tape().record(std::move(y), {a}, [ai = a.id(), m, n](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& p = tp.value(out);
    const Tensor<T>& gy = tp.grad(out);
    Tensor<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      const T d = kernels::dot(gy.data() + i * n, p.data() + i * n, n);
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += p[i * n + j] * (gy[i * n + j] - d);
    }
  });
}

namespace {

/// Row-wise log-softmax of x / tau into out.
template <typename T>
void log_softmax_into(const T* x, T* out, std::size_t n, T inv_tau) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (std::isnan(x[j])) throw NumericError("log-softmax: NaN input");
    mx = std::max(mx, x[j] * inv_tau);
  }
  T s = T(0);
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] * inv_tau - mx);
  const T lse = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] * inv_tau - lse;
}

}  // namespace

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  require_rank2(a, "log_softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) log_softmax_into(a.value().data() + i * n, y.data() + i * n, n, T(1));
  return a.tape().record(std::move(y), {a}, [ai = a.id(), m, n](Tape<T>& tp, std::size_t out) {
    const Tensor<T>& ly = tp.value(out);
    const Tensor<T>& gy = tp.grad(out);
    Tensor<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      T gs = T(0);
      for (std::size_t j = 0; j < n; ++j) gs += gy[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[i * n + j] - std::exp(ly[i * n + j]) * gs;
    }
  });
}

template <typename T>
Var<T> causal_gqa_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t groups,
                            double score_scale) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  if (heads == 0 || groups == 0 || heads % groups != 0) {
    throw DimensionError("attention: heads must be a positive multiple of groups");
  }
  const std::size_t steps = q.shape()[0], dh = q.shape()[1] / heads;
  if (dh * heads != q.shape()[1] || k.shape() != Shape{steps, groups * dh} || v.shape() != k.shape()) {
    throw DimensionError("attention: inconsistent shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                         " v" + shape_str(v.shape()));
  }
  const std::size_t hpg = heads / groups, qc = heads * dh, kc = groups * dh;
  const T sc = static_cast<T>(score_scale);
  // probs[h][t][i], i <= t (upper triangle stays zero)
  auto probs = std::make_shared<std::vector<T>>(heads * steps * steps, T(0));
  Tensor<T> y(Shape{steps, qc});
  const T* qv = q.value().data();
  const T* kv = k.value().data();
  const T* vv = v.value().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t grp = h / hpg;
    for (std::size_t t = 0; t < steps; ++t) {
      T* p = probs->data() + (h * steps + t) * steps;
      const T* qt = qv + t * qc + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i <= t; ++i) {
        p[i] = sc * kernels::dot(qt, kv + i * kc + grp * dh, dh);
        mx = std::max(mx, p[i]);
      }
      T s = T(0);
      for (std::size_t i = 0; i <= t; ++i) s += (p[i] = std::exp(p[i] - mx));
      const T inv = T(1) / s;
      T* yt = y.data() + t * qc + h * dh;
      for (std::size_t i = 0; i <= t; ++i) {
        p[i] *= inv;
        const T* vi = vv + i * kc + grp * dh;
        for (std::size_t a = 0; a < dh; ++a) yt[a] += p[i] * vi[a];
      }
    }
  }
  return q.tape().record(
      std::move(y), {q, k, v},
      [qi = q.id(), ki = k.id(), vi = v.id(), probs, steps, heads, hpg, dh, qc, kc, sc](Tape<T>& tp,
                                                                                      std::size_t out) {
        const T* gy = tp.grad(out).data();
        const T* qv = tp.value(qi).data();
        const T* kv = tp.value(ki).data();
        const T* vv = tp.value(vi).data();
        T* gq = tp.requires_grad(qi) ? tp.grad(qi).data() : nullptr;
        T* gk = tp.requires_grad(ki) ? tp.grad(ki).data() : nullptr;
        T* gv = tp.requires_grad(vi) ? tp.grad(vi).data() : nullptr;
        std::vector<T> dp(steps);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t grp = h / hpg;
          for (std::size_t t = 0; t < steps; ++t) {
            const T* p = probs->data() + (h * steps + t) * steps;
            const T* gyt = gy + t * qc + h * dh;
            T dot_pd = T(0);
            for (std::size_t i = 0; i <= t; ++i) {
              dp[i] = kernels::dot(gyt, vv + i * kc + grp * dh, dh);
              dot_pd += dp[i] * p[i];
              if (gv) {
                T* gvi = gv + i * kc + grp * dh;
                for (std::size_t a = 0; a < dh; ++a) gvi[a] += p[i] * gyt[a];
              }
            }
            for (std::size_t i = 0; i <= t; ++i) {
              const T ds = sc * p[i] * (dp[i] - dot_pd);
              if (ds == T(0)) continue;
              if (gq) {
                T* gqt = gq + t * qc + h * dh;
                const T* ki_ = kv + i * kc + grp * dh;
                for (std::size_t a = 0; a < dh; ++a) gqt[a] += ds * ki_[a];
              }
              if (gk) {
                T* gki = gk + i * kc + grp * dh;
                const T* qt = qv + t * qc + h * dh;
                for (std::size_t a = 0; a < dh; ++a) gki[a] += ds * qt[a];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> decayed_scan(Var<T> q, Var<T> k, Var<T> v, Var<T> gamma, std::size_t heads, std::size_t groups,
                    double score_scale, ScanOptions opts) {
  const auto geo = kernels::scan_geometry(q.shape(), k.shape(), v.shape(), gamma.shape(), heads, groups);
  const T sc = static_cast<T>(score_scale);
  Tape<T>& tp = q.tape();
  const bool needs_grad = tp.grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                                                gamma.requires_grad());
  Tensor<T> y = opts.chunk == 0
                    ? kernels::scan_recurrent(q.value(), k.value(), v.value(), gamma.value(), geo, sc)
                    : kernels::scan_chunked(q.value(), k.value(), v.value(), gamma.value(), geo, sc, opts.chunk);
  if (!needs_grad) return tp.record(std::move(y), {q, k, v, gamma}, {});
  // The backward pass needs every intermediate state; regenerate them with the
  // recurrence whichever forward form produced y.
  return tp.record(std::move(y), {q, k, v, gamma},
                   [qi = q.id(), ki = k.id(), vi = v.id(), gi = gamma.id(), geo, sc](Tape<T>& tp, std::size_t out) {
                     std::vector<T> states;
                     kernels::scan_recurrent(tp.value(qi), tp.value(ki), tp.value(vi), tp.value(gi), geo, sc,
                                             &states);
                     kernels::scan_backward(tp.value(qi), tp.value(ki), tp.value(vi), tp.value(gi), geo, sc, states,
                                            tp.grad(out), tp.requires_grad(qi) ? &tp.grad(qi) : nullptr,
                                            tp.requires_grad(ki) ? &tp.grad(ki) : nullptr,
                                            tp.requires_grad(vi) ? &tp.grad(vi) : nullptr,
                                            tp.requires_grad(gi) ? &tp.grad(gi) : nullptr);
                   });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.value().numel();
  if (n == 0) throw DimensionError("mse of empty tensors");
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return a.tape().record(Tensor<T>::scalar(s / static_cast<T>(n)), {a, b},
                         [ai = a.id(), bi = b.id(), n](Tape<T>& tp, std::size_t out) {
                           const T g = tp.grad(out)[0] * T(2) / static_cast<T>(n);
                           const Tensor<T>& av = tp.value(ai);
                           const Tensor<T>& bv = tp.value(bi);
                           if (tp.requires_grad(ai)) {
                             Tensor<T>& ga = tp.grad(ai);
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
                           }
                           if (tp.requires_grad(bi)) {
                             Tensor<T>& gb = tp.grad(bi);
                             for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
                           }
                         });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
  auto logp = std::make_shared<Tensor<T>>(Shape{m, n});
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::size_t active = 0;
  T loss = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (tg[i] < 0) continue;
    if (static_cast<std::size_t>(tg[i]) >= n) throw DimensionError("cross_entropy: target out of range");
    log_softmax_into(logits.value().data() + i * n, logp->data() + i * n, n, T(1));
    loss -= (*logp)[i * n + tg[i]];
    ++active;
  }
  const T denom = active ? static_cast<T>(active) : T(1);
  return logits.tape().record(Tensor<T>::scalar(loss / denom), {logits},
                              [li = logits.id(), logp, tg, m, n, denom](Tape<T>& tp, std::size_t out) {
                                const T g = tp.grad(out)[0] / denom;
                                Tensor<T>& gl = tp.grad(li);
                                for (std::size_t i = 0; i < m; ++i) {
                                  if (tg[i] < 0) continue;
                                  for (std::size_t j = 0; j < n; ++j)
                                    gl[i * n + j] += g * std::exp((*logp)[i * n + j]);
                                  gl[i * n + tg[i]] -= g;
                                }
                              });
}

template <typename T>
Var<T> kl_div_logits(Var<T> teacher, Var<T> student, double temperature, std::span<const std::uint8_t> mask) {
  require_same_shape(teacher, student, "kl_div_logits");
  require_rank2(teacher, "kl_div_logits");
  if (!(temperature > 0.0)) throw ContractError("kl_div_logits: temperature must be positive");
  const std::size_t m = teacher.shape()[0], n = teacher.shape()[1];
  if (!mask.empty() && mask.size() != m) throw DimensionError("kl_div_logits: mask length must equal row count");
  const T inv_tau = static_cast<T>(1.0 / temperature);
  auto lt = std::make_shared<Tensor<T>>(Shape{m, n});
  auto ls = std::make_shared<Tensor<T>>(Shape{m, n});
  auto row_kl = std::make_shared<std::vector<T>>(m, T(0));
  std::vector<std::uint8_t> active(m, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  std::size_t count = 0;
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    log_softmax_into(teacher.value().data() + i * n, lt->data() + i * n, n, inv_tau);
    log_softmax_into(student.value().data() + i * n, ls->data() + i * n, n, inv_tau);
    T kl = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T lp = (*lt)[i * n + j];
      kl += std::exp(lp) * (lp - (*ls)[i * n + j]);
    }
    (*row_kl)[i] = kl;
    total += kl;
    ++count;
  }
  const T denom = count ? static_cast<T>(count) : T(1);
  return teacher.tape().record(
      Tensor<T>::scalar(total / denom), {teacher, student},
      [ti = teacher.id(), si = student.id(), lt, ls, row_kl, active, m, n, inv_tau, denom](Tape<T>& tp,
                                                                                           std::size_t out) {
        const T g = tp.grad(out)[0] / denom;
        T* gt = tp.requires_grad(ti) ? tp.grad(ti).data() : nullptr;
        T* gs = tp.requires_grad(si) ? tp.grad(si).data() : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
          if (!active[i]) continue;
          for (std::size_t j = 0; j < n; ++j) {
            const T pt = std::exp((*lt)[i * n + j]);
            const T ps = std::exp((*ls)[i * n + j]);
            if (gs) gs[i * n + j] += g * inv_tau * (ps - pt);
            if (gt) gt[i * n + j] += g * inv_tau * pt * (((*lt)[i * n + j] - (*ls)[i * n + j]) - (*row_kl)[i]);
          }
        }
      });
}

#define Q2L_INSTANTIATE_OPS(T)                                                                              \
  template Var<T> matmul(Var<T>, Var<T>);                                                                    \
  template Var<T> add(Var<T>, Var<T>);                                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                                       \
  template Var<T> add_row(Var<T>, Var<T>);                                                                   \
  template Var<T> mul_row(Var<T>, Var<T>);                                                                   \
  template Var<T> scale(Var<T>, double);                                                                     \
  template Var<T> add_scalar(Var<T>, double);                                                                \
  template Var<T> neg(Var<T>);                                                                               \
  template Var<T> exp(Var<T>);                                                                               \
  template Var<T> log(Var<T>);                                                                               \
  template Var<T> square(Var<T>);                                                                            \
  template Var<T> softplus(Var<T>);                                                                          \
  template Var<T> sigmoid(Var<T>);                                                                           \
  template Var<T> silu(Var<T>);                                                                              \
  template Var<T> gelu(Var<T>);                                                                              \
  template Var<T> transpose(Var<T>);                                                                         \
  template Var<T> reshape(Var<T>, Shape);                                                                    \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                              \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                              \
  template Var<T> concat_cols(std::span<const Var<T>>);                                                      \
  template Var<T> concat_rows(std::span<const Var<T>>);                                                      \
  template Var<T> gather_rows(Var<T>, std::span<const std::int32_t>);                                        \
  template Var<T> interleave_rows(Var<T>, std::span<const std::size_t>, Var<T>, std::span<const std::size_t>, \
                                  std::size_t);                                                              \
  template Var<T> sum(Var<T>);                                                                               \
  template Var<T> mean(Var<T>);                                                                              \
  template Var<T> sum_rows(Var<T>);                                                                          \
  template Var<T> mean_rows(Var<T>);                                                                         \
  template Var<T> rms_norm(Var<T>, Var<T>, double);                                                          \
  template Var<T> group_rms_norm(Var<T>, std::size_t, double);                                               \
  template Var<T> causal_depthwise_conv(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> softmax_rows(Var<T>);                                                                      \
  template Var<T> log_softmax_rows(Var<T>);                                                                  \
  template Var<T> causal_gqa_attention(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, double);            \
  template Var<T> decayed_scan(Var<T>, Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, double, ScanOptions); \
  template Var<T> mse(Var<T>, Var<T>);                                                                       \
  template Var<T> cross_entropy(Var<T>, std::span<const std::int32_t>);                                      \
  template Var<T> kl_div_logits(Var<T>, Var<T>, double, std::span<const std::uint8_t>);

Q2L_INSTANTIATE_OPS(float)
Q2L_INSTANTIATE_OPS(double)

}  // namespace q2l::ops
