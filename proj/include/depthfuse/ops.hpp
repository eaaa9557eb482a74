// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

// Differentiable operations over Tensor. Every op computes its forward value
// eagerly and, when any input is tracked, records a closure that maps the
// output gradient onto the inputs.

#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "depthfuse/rng.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

inline Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

}  // namespace detail

/// a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      detail::gemm_nt(self.grad.data(), nb.data.data(), na.grad.data(), m, n, k);
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      detail::gemm_tn(na.data.data(), self.grad.data(), nb.grad.data(), k, m, n);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) na.grad[i * n + j] += self.grad[j * m + i];
  });
}

/// Affine map over the last axis: x[..., in] * w[in x out] + bias[out].
/// `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  if (w.rank() != 2 || x.cols() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t m = x.rows(), k = w.dim(0), n = w.dim(1);
  if (bias.defined() && (bias.numel() != n)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(n));
  }
  std::vector<double> out(m * n, 0.0);
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.data().data(), n, out.data() + i * n);
  }
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return detail::make_result(detail::with_last(x.shape(), n), std::move(out), std::move(parents),
                             [m, k, n](Node& self) {
                               Node& nx = *self.parents[0];
                               Node& nw = *self.parents[1];
                               if (nx.requires_grad) {
                                 nx.ensure_grad();
                                 detail::gemm_nt(self.grad.data(), nw.data.data(), nx.grad.data(),
                                                 m, n, k);
                               }
                               if (nw.requires_grad) {
                                 nw.ensure_grad();
                                 detail::gemm_tn(nx.data.data(), self.grad.data(), nw.grad.data(),
                                                 k, m, n);
                               }
                               if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                                 Node& nb = *self.parents[2];
                                 nb.ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     nb.grad[j] += self.grad[i * n + j];
                               }
                             });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sign[k] * self.grad[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) nb.grad[i] += self.grad[i] * na.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result(a.shape(), std::move(out), {a.node()}, [c](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += c * self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  return detail::make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
  });
}

/// Sum of all elements, as a [1] tensor.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (double& g : na.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Same values, new shape.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
  });
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  Shape shape = parts.front().shape();
  std::vector<double> out;
  out.reserve(parts.size() * parts.front().numel());
  std::vector<std::shared_ptr<Node>> parents;
  for (const Tensor& p : parts) {
    if (p.shape() != shape) {
      throw ShapeError("stack: shapes " + shape_str(shape) + " and " + shape_str(p.shape()) +
                       " differ");
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(p.node());
  }
  const std::size_t block = parts.front().numel();
  shape.insert(shape.begin(), parts.size());
  return detail::make_result(std::move(shape), std::move(out), std::move(parents),
                             [block](Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 Node& p = *self.parents[k];
                                 if (!p.requires_grad) continue;
                                 p.ensure_grad();
                                 for (std::size_t i = 0; i < block; ++i)
                                   p.grad[i] += self.grad[k * block + i];
                               }
                             });
}

/// Exact Gaussian-CDF gelu: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  return detail::make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = na.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      na.grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

/// elu with alpha = 1.
inline Tensor elu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = x >= 0.0 ? x : std::expm1(x);
  }
  return detail::make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = na.data[i];
      na.grad[i] += self.grad[i] * (x >= 0.0 ? 1.0 : std::exp(x));
    }
  });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t n = a.dim(axis);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(a[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return detail::make_result(a.shape(), std::move(out), {a.node()},
                             [outer, inner, n](Node& self) {
                               Node& na = *self.parents[0];
                               na.ensure_grad();
                               const auto& y = self.data;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * n * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j)
                                     dot += self.grad[base + j * inner] * y[base + j * inner];
                                   for (std::size_t j = 0; j < n; ++j) {
                                     const std::size_t idx = base + j * inner;
                                     na.grad[idx] += y[idx] * (self.grad[idx] - dot);
                                   }
                                 }
                               }
                             });
}

/// LayerNorm over the last axis with affine gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match last axis of " +
                     shape_str(x.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gain[j] * h + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, d, xhat, rstd](Node& self) {
        Node& nx = *self.parents[0];
        Node& ng = *self.parents[1];
        Node& nb = *self.parents[2];
        if (ng.requires_grad) {
          ng.ensure_grad();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < d; ++j)
              ng.grad[j] += self.grad[r * d + j] * (*xhat)[r * d + j];
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < d; ++j) nb.grad[j] += self.grad[r * d + j];
        }
        if (nx.requires_grad) {
          nx.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double g = self.grad[r * d + j] * ng.data[j];
              mean_g += g;
              mean_gx += g * (*xhat)[r * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double g = self.grad[r * d + j] * ng.data[j];
              nx.grad[r * d + j] += (*rstd)[r] * (g - mean_g - (*xhat)[r * d + j] * mean_gx);
            }
          }
        }
      });
}

/// Row lookup: ids index rows of table[V x d]; result has shape
/// `leading` + [d]. Out-of-range ids raise InputError naming the position.
inline Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  if (numel_of(leading) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for leading shape " +
                     shape_str(leading));
  }
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw InputError("embedding: id " + std::to_string(id) + " at flat position " +
                       std::to_string(i) + " outside [0, " + std::to_string(v) + ")");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  leading.push_back(d);
  return detail::make_result(std::move(leading), std::move(out), {table.node()},
                             [kept = std::move(kept), d](Node& self) {
                               Node& nt = *self.parents[0];
                               nt.ensure_grad();
                               for (std::size_t i = 0; i < kept.size(); ++i) {
                                 double* row = nt.grad.data() + static_cast<std::size_t>(kept[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
                               }
                             });
}

/// Inverted dropout. The mask is drawn from `rng`; rate 0 returns the input.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.numel());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = a[i] * mask[i];
  }
  return detail::make_result(a.shape(), std::move(out), {a.node()},
                             [mask = std::move(mask)](Node& self) {
                               Node& na = *self.parents[0];
                               na.ensure_grad();
                               for (std::size_t i = 0; i < mask.size(); ++i)
                                 na.grad[i] += self.grad[i] * mask[i];
                             });
}

/// Multi-head scaled dot-product self-attention core.
///
/// q, k, v are [B x T x d] projections; heads split d evenly. Keys at
/// positions >= lengths[b] are masked out. Rows for padded queries are still
/// produced (attending over the real keys) and are expected to be ignored
/// downstream.
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const std::vector<std::size_t>& lengths, std::size_t heads,
                             double score_scale) {
  detail::require_same_shape(q, k, "self_attention");
  detail::require_same_shape(q, v, "self_attention");
  if (q.rank() != 3) throw ShapeError("self_attention: expected [B x T x d], got " + shape_str(q.shape()));
  const std::size_t B = q.dim(0), T = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw ShapeError("self_attention: heads must divide width");
  if (lengths.size() != B) throw ShapeError("self_attention: lengths do not match batch");
  const std::size_t dh = d / heads;

  // probs[b][h][i][j]
  auto probs = std::make_shared<std::vector<double>>(B * heads * T * T, 0.0);
  std::vector<double> out(B * T * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = lengths[b];
    if (len == 0 || len > T) throw ShapeError("self_attention: invalid sequence length");
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->data() + (b * heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = Q + (b * T + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = K + (b * T + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= score_scale;
          P[i * T + j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          P[i * T + j] = std::exp(P[i * T + j] - mx);
          z += P[i * T + j];
        }
        double* oi = out.data() + (b * T + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          P[i * T + j] /= z;
          const double p = P[i * T + j];
          const double* vj = V + (b * T + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  return detail::make_result(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [B, T, d, dh, heads, lengths, probs, score_scale](Node& self) {
        Node& nq = *self.parents[0];
        Node& nk = *self.parents[1];
        Node& nv = *self.parents[2];
        for (Node* p : {&nq, &nk, &nv})
          if (p->requires_grad) p->ensure_grad();
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t len = lengths[b];
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = probs->data() + (b * heads + h) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
              const double* go = self.grad.data() + (b * T + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = nv.data.data() + (b * T + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * P[i * T + j];
              }
              if (nv.requires_grad) {
                for (std::size_t j = 0; j < len; ++j) {
                  double* gv = nv.grad.data() + (b * T + j) * d + h * dh;
                  const double p = P[i * T + j];
                  for (std::size_t c = 0; c < dh; ++c) gv[c] += p * go[c];
                }
              }
              const double* qi = nq.data.data() + (b * T + i) * d + h * dh;
              double* gq = nq.requires_grad ? nq.grad.data() + (b * T + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = P[i * T + j] * (dp[j] - dot) * score_scale;
                if (ds == 0.0) continue;
                const double* kj = nk.data.data() + (b * T + j) * d + h * dh;
                if (gq)
                  for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
                if (nk.requires_grad) {
                  double* gk = nk.grad.data() + (b * T + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

/// Depth-wise weighted sum: out[t] = sum_i scores[t, i] * values[i, t].
/// scores is [N x L]; values is [L x ... x d] with N rows per layer; the
/// result has shape values.shape[1:].
inline Tensor depth_attend(const Tensor& scores, const Tensor& values) {
  if (scores.rank() != 2 || values.rank() < 2) {
    throw ShapeError("depth_attend: bad ranks " + shape_str(scores.shape()) + ", " +
                     shape_str(values.shape()));
  }
  const std::size_t N = scores.dim(0), L = scores.dim(1);
  const std::size_t d = values.cols();
  if (values.dim(0) != L || values.numel() != L * N * d) {
    throw ShapeError("depth_attend: scores " + shape_str(scores.shape()) +
                     " incompatible with values " + shape_str(values.shape()));
  }
  std::vector<double> out(N * d, 0.0);
  const double* S = scores.data().data();
  const double* Vd = values.data().data();
  for (std::size_t t = 0; t < N; ++t) {
    double* ot = out.data() + t * d;
    for (std::size_t i = 0; i < L; ++i) {
      const double s = S[t * L + i];
      const double* vit = Vd + (i * N + t) * d;
      for (std::size_t j = 0; j < d; ++j) ot[j] += s * vit[j];
    }
  }
  Shape shape(values.shape().begin() + 1, values.shape().end());
  return detail::make_result(std::move(shape), std::move(out), {scores.node(), values.node()},
                             [N, L, d](Node& self) {
                               Node& ns = *self.parents[0];
                               Node& nv = *self.parents[1];
                               if (ns.requires_grad) ns.ensure_grad();
                               if (nv.requires_grad) nv.ensure_grad();
                               for (std::size_t t = 0; t < N; ++t) {
                                 const double* go = self.grad.data() + t * d;
                                 for (std::size_t i = 0; i < L; ++i) {
                                   const std::size_t vo = (i * N + t) * d;
                                   if (ns.requires_grad) {
                                     double s = 0.0;
                                     for (std::size_t j = 0; j < d; ++j) s += go[j] * nv.data[vo + j];
                                     ns.grad[t * L + i] += s;
                                   }
                                   if (nv.requires_grad) {
                                     const double sc = ns.data[t * L + i];
                                     for (std::size_t j = 0; j < d; ++j) nv.grad[vo + j] += sc * go[j];
                                   }
                                 }
                               }
                             });
}

/// Mean token-level cross-entropy (nats) of logits[N x C] against targets.
/// Targets equal to `ignore_index` do not contribute.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                            int ignore_index = -1) {
  const std::size_t C = logits.cols(), N = logits.rows();
  if (targets.size() != N) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(N * C);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const double* lr = logits.data().data() + r * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, lr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(lr[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(lr[c] - lse);
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= C) {
      throw InputError("cross_entropy: target " + std::to_string(t) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(C) + ")");
    }
    total += lse - lr[t];
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no target positions");
  std::vector<int> kept(targets.begin(), targets.end());
  const double inv = 1.0 / static_cast<double>(count);
  return detail::make_result({1}, {total * inv}, {logits.node()},
                             [probs, kept = std::move(kept), N, C, inv, ignore_index](Node& self) {
                               Node& nl = *self.parents[0];
                               nl.ensure_grad();
                               const double g = self.grad[0] * inv;
                               for (std::size_t r = 0; r < N; ++r) {
                                 if (kept[r] == ignore_index) continue;
                                 for (std::size_t c = 0; c < C; ++c)
                                   nl.grad[r * C + c] += g * (*probs)[r * C + c];
                                 nl.grad[r * C + static_cast<std::size_t>(kept[r])] -= g;
                               }
                             });
}

}  // namespace depthfuse
