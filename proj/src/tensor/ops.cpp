// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "ibke/errors.hpp"
#include "ibke/tensor.hpp"

namespace ibke {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(std::span<const double> v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap mmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

detail::Node& in(const detail::Node& self, std::size_t i) { return *self.inputs[i]; }

bool wants(const detail::Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Shape mat_shape(std::size_t r, std::size_t c) { return {r, c}; }

template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), op, {a}, [df](const detail::Node& self) {
    auto& xn = in(self, 0);
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xn.value[i], self.value[i]);
  });
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.values(), m, k) * cmap(b.values(), k, n);
  return make_result(mat_shape(m, n), std::move(out), "matmul", {a, b},
                     [m, k, n](const detail::Node& self) {
                       auto dc = cmap(self.grad, m, n);
                       if (wants(self, 0)) {
                         mmap(in(self, 0).grad_buffer(), m, k).noalias() +=
                             dc * cmap(in(self, 1).value, k, n).transpose();
                       }
                       if (wants(self, 1)) {
                         mmap(in(self, 1).grad_buffer(), k, n).noalias() +=
                             cmap(in(self, 0).value, m, k).transpose() * dc;
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.values(), m, k) * cmap(b.values(), n, k).transpose();
  return make_result(mat_shape(m, n), std::move(out), "matmul_nt", {a, b},
                     [m, k, n](const detail::Node& self) {
                       auto dc = cmap(self.grad, m, n);
                       if (wants(self, 0)) {
                         mmap(in(self, 0).grad_buffer(), m, k).noalias() += dc * cmap(in(self, 1).value, n, k);
                       }
                       if (wants(self, 1)) {
                         mmap(in(self, 1).grad_buffer(), n, k).noalias() +=
                             dc.transpose() * cmap(in(self, 0).value, m, k);
                       }
                     });
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const auto k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions differ " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.values(), k, m).transpose() * cmap(b.values(), k, n);
  return make_result(mat_shape(m, n), std::move(out), "matmul_tn", {a, b},
                     [m, k, n](const detail::Node& self) {
                       auto dc = cmap(self.grad, m, n);
                       if (wants(self, 0)) {
                         mmap(in(self, 0).grad_buffer(), k, m).noalias() +=
                             cmap(in(self, 1).value, k, n) * dc.transpose();
                       }
                       if (wants(self, 1)) {
                         mmap(in(self, 1).grad_buffer(), k, n).noalias() += cmap(in(self, 0).value, k, m) * dc;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  mmap(out, n, m) = cmap(a.values(), m, n).transpose();
  return make_result(mat_shape(n, m), std::move(out), "transpose", {a}, [m, n](const detail::Node& self) {
    mmap(in(self, 0).grad_buffer(), m, n) += cmap(self.grad, n, m).transpose();
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](const detail::Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) in(self, 1).accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](const detail::Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) {
      auto& g = in(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.values(), y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](const detail::Node& self) {
    auto& an = in(self, 0);
    auto& bn = in(self, 1);
    if (wants(self, 0)) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (wants(self, 1)) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const auto m = a.rows(), n = a.cols();
  if (row.numel() != n) throw DimensionError("add_row: row of " + shape_str(row.shape()) + " vs " + shape_str(a.shape()));
  auto x = a.values(), r = row.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
  return make_result(a.shape(), std::move(out), "add_row", {a, row}, [m, n](const detail::Node& self) {
    if (wants(self, 0)) in(self, 0).accumulate(self.grad);
    if (wants(self, 1)) {
      auto& g = in(self, 1).grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  const auto m = a.rows(), n = a.cols();
  if (col.numel() != m) throw DimensionError("mul_col: column of " + shape_str(col.shape()) + " vs " + shape_str(a.shape()));
  auto x = a.values(), c = col.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * c[i];
  return make_result(a.shape(), std::move(out), "mul_col", {a, col}, [m, n](const detail::Node& self) {
    auto& an = in(self, 0);
    auto& cn = in(self, 1);
    if (wants(self, 0)) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * cn.value[i];
    }
    if (wants(self, 1)) {
      auto& g = cn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += self.grad[i * n + j] * an.value[i * n + j];
        g[i] += acc;
      }
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), "scale", {a}, [factor](const detail::Node& self) {
    auto& g = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double f = s.item();
  auto x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
  return make_result(a.shape(), std::move(out), "scale_by", {a, s}, [](const detail::Node& self) {
    auto& an = in(self, 0);
    auto& sn = in(self, 1);
    if (wants(self, 0)) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sn.value[0];
    }
    if (wants(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < an.value.size(); ++i) acc += self.grad[i] * an.value[i];
      sn.grad_buffer()[0] += acc;
    }
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({1}, {s}, "sum", {a}, [](const detail::Node& self) {
    auto& g = in(self, 0).grad_buffer();
    const double d = self.grad[0];
    for (auto& gi : g) gi += d;
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

// ---- structure ------------------------------------------------------------

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const auto m = a.rows(), n = a.cols();
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(a.shape()));
  }
  const auto w = end - begin;
  auto x = a.values();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data() + i * n + begin, w, out.data() + i * w);
  return make_result(mat_shape(m, w), std::move(out), "slice_cols", {a},
                     [m, n, w, begin](const detail::Node& self) {
                       auto& g = in(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
                     });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), na = a.cols(), nb = b.cols();
  if (b.rows() != m) throw DimensionError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto n = na + nb;
  auto x = a.values(), y = b.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(x.data() + i * na, na, out.data() + i * n);
    std::copy_n(y.data() + i * nb, nb, out.data() + i * n + na);
  }
  return make_result(mat_shape(m, n), std::move(out), "concat_cols", {a, b},
                     [m, na, nb, n](const detail::Node& self) {
                       if (wants(self, 0)) {
                         auto& g = in(self, 0).grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < na; ++j) g[i * na + j] += self.grad[i * n + j];
                       }
                       if (wants(self, 1)) {
                         auto& g = in(self, 1).grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < nb; ++j) g[i * nb + j] += self.grad[i * n + na + j];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const auto vocab = table.rows(), d = table.cols();
  const auto t = ids.size();
  auto x = table.values();
  std::vector<double> out(t * d);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < t; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(x.data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  return make_result(mat_shape(t, d), std::move(out), "gather_rows", {table},
                     [idx = std::move(idx), d](const detail::Node& self) {
                       auto& g = in(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a},
                     [](const detail::Node& self) { in(self, 0).accumulate(self.grad); });
}

// ---- normalization / attention -------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  const auto m = x.rows(), n = x.cols();
  // Strides for walking one softmax group: `len` elements spaced by `step`.
  const std::size_t groups = axis == 1 ? m : n;
  const std::size_t len = axis == 1 ? n : m;
  const std::size_t step = axis == 1 ? 1 : n;
  const std::size_t gstride = axis == 1 ? n : 1;
  auto v = x.values();
  std::vector<double> out(m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * gstride;
    double mx = v[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, v[base + i * step]);
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += (out[base + i * step] = std::exp(v[base + i * step] - mx));
    for (std::size_t i = 0; i < len; ++i) out[base + i * step] /= s;
  }
  return make_result(x.shape(), std::move(out), "softmax", {x},
                     [groups, len, step, gstride](const detail::Node& self) {
                       auto& g = in(self, 0).grad_buffer();
                       for (std::size_t q = 0; q < groups; ++q) {
                         const std::size_t base = q * gstride;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < len; ++i) {
                           const auto p = base + i * step;
                           dot += self.grad[p] * self.value[p];
                         }
                         for (std::size_t i = 0; i < len; ++i) {
                           const auto p = base + i * step;
                           g[p] += self.value[p] * (self.grad[p] - dot);
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) throw DimensionError("layer_norm: gain/bias width mismatch");
  auto v = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = v.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                     [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const detail::Node& self) {
                       auto& gn = in(self, 1);
                       if (wants(self, 1)) {
                         auto& g = gn.grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xhat[i * n + j];
                       }
                       if (wants(self, 2)) {
                         auto& g = in(self, 2).grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                       }
                       if (wants(self, 0)) {
                         auto& g = in(self, 0).grad_buffer();
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t i = 0; i < m; ++i) {
                           double sum_d = 0.0, sum_dx = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = self.grad[i * n + j] * gn.value[j];
                             sum_d += d;
                             sum_dx += d * xhat[i * n + j];
                           }
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = self.grad[i * n + j] * gn.value[j];
                             g[i * n + j] += inv_std[i] * (d - inv_n * sum_d - xhat[i * n + j] * inv_n * sum_dx);
                           }
                         }
                       }
                     });
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                             double score_scale, std::span<const std::size_t> segments) {
  require_same_shape(q, k, "causal_self_attention");
  require_same_shape(q, v, "causal_self_attention");
  const auto t = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_self_attention: width not divisible by heads");
  std::vector<std::size_t> seg(segments.begin(), segments.end());
  if (seg.empty()) seg.push_back(t);
  std::size_t covered = 0, prob_size = 0;
  for (auto len : seg) {
    covered += len;
    prob_size += len * len;
  }
  if (covered != t) throw DimensionError("causal_self_attention: segments do not cover the sequence");
  const auto dh = d / n_heads;
  auto qv = q.values(), kv = k.values(), vv = v.values();
  // Per head, per segment: a len×len row-major block, zero above the diagonal.
  std::vector<double> probs(n_heads * prob_size, 0.0);
  std::vector<double> out(t * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto off = h * dh;
    double* p = probs.data() + h * prob_size;
    std::size_t base = 0;
    for (auto len : seg) {
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = qv.data() + (base + i) * d + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (base + j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * len + j] = s * score_scale;
          mx = std::max(mx, p[i * len + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (p[i * len + j] = std::exp(p[i * len + j] - mx));
        double* oi = out.data() + (base + i) * d + off;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * len + j] /= z;
          const double* vj = vv.data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * len + j] * vj[c];
        }
      }
      base += len;
      p += len * len;
    }
  }
  return make_result(
      q.shape(), std::move(out), "causal_self_attention", {q, k, v},
      [d, dh, n_heads, score_scale, prob_size, seg = std::move(seg), probs = std::move(probs)](const detail::Node& self) {
        auto& qn = in(self, 0);
        auto& kn = in(self, 1);
        auto& vn = in(self, 2);
        auto& gq = qn.grad_buffer();
        auto& gk = kn.grad_buffer();
        auto& gv = vn.grad_buffer();
        std::vector<double> dp;
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto off = h * dh;
          const double* p = probs.data() + h * prob_size;
          std::size_t base = 0;
          for (auto len : seg) {
            dp.assign(len, 0.0);
            for (std::size_t i = 0; i < len; ++i) {
              const double* dout = self.grad.data() + (base + i) * d + off;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = vn.value.data() + (base + j) * d + off;
                double* gvj = gv.data() + (base + j) * d + off;
                const double pij = p[i * len + j];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += dout[c] * vj[c];
                  gvj[c] += pij * dout[c];
                }
                dp[j] = s;
                dot += s * pij;
              }
              const double* qi = qn.value.data() + (base + i) * d + off;
              double* gqi = gq.data() + (base + i) * d + off;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[i * len + j] * (dp[j] - dot) * score_scale;
                const double* kj = kn.value.data() + (base + j) * d + off;
                double* gkj = gk.data() + (base + j) * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
            base += len;
            p += len * len;
          }
        }
      });
}

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Reduction reduction) {
  const auto t = logits.rows(), vocab = logits.cols();
  if (targets.size() != t) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(t) + " rows");
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::size_t used = 0;
  for (int y : tg) {
    if (y == -1) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(y) + " outside vocabulary of " + std::to_string(vocab));
    }
    ++used;
  }
  if (used == 0) throw ContractError("cross_entropy: no target rows");
  auto logp = log_softmax_rows(logits.values(), t, vocab);
  double loss = 0.0;
  for (std::size_t i = 0; i < t; ++i)
    if (tg[i] >= 0) loss -= logp[i * vocab + static_cast<std::size_t>(tg[i])];
  const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(used) : 1.0;
  return make_result({1}, {loss * norm}, "cross_entropy", {logits},
                     [t, vocab, norm, tg = std::move(tg), logp = std::move(logp)](const detail::Node& self) {
                       auto& g = in(self, 0).grad_buffer();
                       const double d = self.grad[0] * norm;
                       for (std::size_t i = 0; i < t; ++i) {
                         if (tg[i] < 0) continue;
                         for (std::size_t c = 0; c < vocab; ++c) g[i * vocab + c] += d * std::exp(logp[i * vocab + c]);
                         g[i * vocab + static_cast<std::size_t>(tg[i])] -= d;
                       }
                     });
}

Tensor kl_to_reference(const Tensor& logits, std::span<const double> reference_log_probs,
                       std::span<const int> rows) {
  const auto t = logits.rows(), vocab = logits.cols();
  if (reference_log_probs.size() != t * vocab) throw DimensionError("kl_to_reference: reference size mismatch");
  if (rows.empty()) throw ContractError("kl_to_reference: no rows selected");
  std::vector<int> rs(rows.begin(), rows.end());
  for (int r : rs)
    if (r < 0 || static_cast<std::size_t>(r) >= t) throw IndexError("kl_to_reference: row " + std::to_string(r));
  auto logp = log_softmax_rows(logits.values(), t, vocab);
  std::vector<double> ref(reference_log_probs.begin(), reference_log_probs.end());
  std::vector<double> per_row(rs.size());
  double total = 0.0;
  for (std::size_t k = 0; k < rs.size(); ++k) {
    const auto r = static_cast<std::size_t>(rs[k]);
    double kl = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double lp = logp[r * vocab + c];
      kl += std::exp(lp) * (lp - ref[r * vocab + c]);
    }
    per_row[k] = kl;
    total += kl;
  }
  const double norm = 1.0 / static_cast<double>(rs.size());
  return make_result({1}, {total * norm}, "kl_to_reference", {logits},
                     [vocab, norm, rs = std::move(rs), logp = std::move(logp), ref = std::move(ref),
                      per_row = std::move(per_row)](const detail::Node& self) {
                       auto& g = in(self, 0).grad_buffer();
                       const double d = self.grad[0] * norm;
                       for (std::size_t k = 0; k < rs.size(); ++k) {
                         const auto r = static_cast<std::size_t>(rs[k]);
                         for (std::size_t c = 0; c < vocab; ++c) {
                           const auto i = r * vocab + c;
                           const double lp = logp[i];
                           g[i] += d * std::exp(lp) * (lp - ref[i] - per_row[k]);
                         }
                       }
                     });
}

}  // namespace ibke
