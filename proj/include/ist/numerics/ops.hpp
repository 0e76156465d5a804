// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable ops over Tape variables. Matrices are row-major; any
// tensor is viewed as (rows x cols) with cols = last axis.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ist/error.hpp"
#include "ist/numerics/tape.hpp"
#include "ist/numerics/tensor.hpp"

namespace ist::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.raw(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(Tensor& t) {
  return MatMap(t.raw(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

// (rows x k) . (k x cols), optionally transposing either operand.
inline Tensor gemm(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  auto am = as_mat(a);
  auto bm = as_mat(b);
  const auto rows = ta ? am.cols() : am.rows();
  const auto cols = tb ? bm.rows() : bm.cols();
  Tensor out(Shape{static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)});
  auto om = as_mat(out);
  if (!ta && !tb) {
    om.noalias() = am * bm;
  } else if (ta && !tb) {
    om.noalias() = am.transpose() * bm;
  } else if (!ta && tb) {
    om.noalias() = am * bm.transpose();
  } else {
    om.noalias() = am.transpose() * bm.transpose();
  }
  return out;
}

}  // namespace detail

/// a (n x k) . b (k x m)
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions " + shape_string(av.shape()) + " . " +
                     shape_string(bv.shape()));
  }
  Tensor out = detail::gemm(av, false, bv, false);
  return a.tape->record(std::move(out), "matmul", {a, b},
                        [a, b](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad(self);
                          if (t.requires_grad(a.id)) {
                            t.accumulate(a.id, detail::gemm(g, false, t.value(b.id), true));
                          }
                          if (t.requires_grad(b.id)) {
                            t.accumulate(b.id, detail::gemm(t.value(a.id), true, g, false));
                          }
                        });
}

inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "add");
  Tensor out = av;
  auto o = out.data();
  auto bd = bv.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return a.tape->record(std::move(out), "add", {a, b}, [a, b](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self));
    t.accumulate(b.id, t.grad(self));
  });
}

/// Adds a length-m vector to every row of an (n x m) tensor.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " vs input " +
                     shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t m = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  }
  return x.tape->record(std::move(out), "add_bias", {x, bias},
                        [x, bias, m](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad(self);
                          t.accumulate(x.id, g);
                          if (t.requires_grad(bias.id)) {
                            Tensor gb(Shape{m}, 0.0);
                            for (std::size_t r = 0; r < g.rows(); ++r) {
                              for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
                            }
                            t.accumulate(bias.id, gb);
                          }
                        });
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  return x.tape->record(std::move(out), "scale", {x}, [x, factor](Tape& t, std::size_t self) {
    Tensor g = t.grad(self);
    for (double& v : g.data()) v *= factor;
    t.accumulate(x.id, g);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), "mul", {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      Tensor ga = g;
      const Tensor& bv = t.value(b.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      t.accumulate(a.id, ga);
    }
    if (t.requires_grad(b.id)) {
      Tensor gb = g;
      const Tensor& av = t.value(a.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      t.accumulate(b.id, gb);
    }
  });
}

/// Sum of all entries, as a scalar.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), "sum", {x}, [x](Tape& t, std::size_t self) {
    t.accumulate(x.id, Tensor(t.value(x.id).shape(), t.grad(self).item()));
  });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), "relu", {x}, [x](Tape& t, std::size_t self) {
    Tensor g = t.grad(self);
    const Tensor& xv = t.value(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(xv[i] > 0.0)) g[i] = 0.0;
    }
    t.accumulate(x.id, g);
  });
}

/// tanh-approximated GELU.
inline Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out = x.value();
  for (double& v : out.data()) {
    const double u = kC * (v + kA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return x.tape->record(std::move(out), "gelu", {x}, [x](Tape& t, std::size_t self) {
    Tensor g = t.grad(self);
    const Tensor& xv = t.value(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double u = kC * (v + kA * v * v * v);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      g[i] *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    }
    t.accumulate(x.id, g);
  });
}

/// Row-wise layer normalization with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(d));
  }
  Tensor out(xv.shape());
  std::vector<double> xhat(n * d);
  std::vector<double> inv_std(n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.raw() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return x.tape->record(
      std::move(out), "layer_norm", {x, gain, bias},
      [x, gain, bias, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gain.id);
        if (t.requires_grad(gain.id) || t.requires_grad(bias.id)) {
          Tensor gg(Shape{d}, 0.0);
          Tensor gb(Shape{d}, 0.0);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += g[r * d + c] * xhat[r * d + c];
              gb[c] += g[r * d + c];
            }
          }
          t.accumulate(gain.id, gg);
          t.accumulate(bias.id, gb);
        }
        if (t.requires_grad(x.id)) {
          Tensor gx(t.value(x.id).shape());
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dh[c] = g[r * d + c] * gv[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * xhat[r * d + c];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              gx[r * d + c] = inv_std[r] * (dh[c] - mean_dh - xhat[r * d + c] * mean_dh_h);
            }
          }
          t.accumulate(x.id, gx);
        }
      });
}

/// Gathers rows of `table` (V x d) by id; the result is (ids.size() x d).
inline Var embedding(Var table, std::span<const std::uint32_t> ids) {
  const Tensor& tv = table.value();
  detail::require_matrix(tv, "embedding");
  const std::size_t d = tv.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " out of range " +
                       std::to_string(tv.rows()));
    }
    std::copy_n(tv.raw() + ids[r] * d, d, out.raw() + r * d);
  }
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return table.tape->record(std::move(out), "embedding", {table},
                            [table, d, saved = std::move(saved)](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad(self);
                              Tensor gt(t.value(table.id).shape(), 0.0);
                              for (std::size_t r = 0; r < saved.size(); ++r) {
                                double* dst = gt.raw() + saved[r] * d;
                                const double* src = g.raw() + r * d;
                                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                              }
                              t.accumulate(table.id, gt);
                            });
}

/// Multi-head causal self-attention on packed projections.
/// q, k, v: (batch*seq x d_model), heads split the last axis evenly.
/// Position t attends to positions <= t of the same sequence.
inline Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                            std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_same_shape(qv, kv, "causal_attention");
  detail::require_same_shape(qv, vv, "causal_attention");
  const std::size_t d = qv.cols();
  if (qv.rows() != batch * seq || heads == 0 || d % heads != 0) {
    throw ShapeError("causal_attention: bad packing " + shape_string(qv.shape()));
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b][h] is a lower-triangular seq x seq block, stored densely.
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  Tensor out(qv.shape(), 0.0);
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv.raw() + (b * seq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.raw() + (b * seq + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* oi = out.raw() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = scores[j] / z;
          p[i * seq + j] = pij;
          const double* vj = vv.raw() + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  return q.tape->record(
      std::move(out), "causal_attention", {q, k, v},
      [q, k, v, batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(q.id);
        const Tensor& kv = t.value(k.id);
        const Tensor& vv = t.value(v.id);
        Tensor gq(qv.shape(), 0.0);
        Tensor gk(kv.shape(), 0.0);
        Tensor gv(vv.shape(), 0.0);
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* gi = g.raw() + (b * seq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double pij = p[i * seq + j];
                const double* vj = vv.raw() + (b * seq + j) * d + h * dh;
                double* gvj = gv.raw() + (b * seq + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += gi[c] * vj[c];
                  gvj[c] += pij * gi[c];
                }
                dp[j] = s;
                dot += pij * s;
              }
              const double* qi = qv.raw() + (b * seq + i) * d + h * dh;
              double* gqi = gq.raw() + (b * seq + i) * d + h * dh;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[i * seq + j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.raw() + (b * seq + j) * d + h * dh;
                double* gkj = gk.raw() + (b * seq + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        t.accumulate(q.id, gq);
        t.accumulate(k.id, gk);
        t.accumulate(v.id, gv);
      });
}

/// Mean softmax cross-entropy of (n x V) logits against n class ids.
inline Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.rows();
  const std::size_t vocab = lv.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  Tensor probs(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= vocab) throw ShapeError("cross_entropy: target out of range");
    const double* row = lv.raw() + r * vocab;
    double mx = row[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(row[c] - mx);
      probs[r * vocab + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= z;
    total += -(row[targets[r]] - mx - std::log(z));
  }
  std::vector<std::uint32_t> saved(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor::scalar(total / static_cast<double>(n)), "cross_entropy", {logits},
      [logits, n, vocab, probs = std::move(probs), saved = std::move(saved)](
          Tape& t, std::size_t self) {
        const double scale = t.grad(self).item() / static_cast<double>(n);
        Tensor g = probs;
        for (std::size_t r = 0; r < n; ++r) g[r * vocab + saved[r]] -= 1.0;
        for (double& x : g.data()) x *= scale;
        t.accumulate(logits.id, g);
      });
}

/// Inverted dropout; identity when p == 0.
template <class Rng>
Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(x.value().shape());
  const double s = 1.0 / (1.0 - p);
  for (double& m : mask.data()) m = keep(rng) ? s : 0.0;
  Var mv = x.tape->constant(std::move(mask));
  return mul(x, mv);
}

}  // namespace ist::ops
