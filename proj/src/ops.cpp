// SPDX-License-Identifier: Apache-2.0
#include "tspm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tspm/error.hpp"

namespace tspm {

namespace {

thread_local std::uint64_t g_matmul_macs = 0;

std::string pair_str(const Tensor& a, const Tensor& b) {
  return shape_to_string(a.shape()) + " and " + shape_to_string(b.shape());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + pair_str(a, b) + " differ");
  }
}

void require_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(x.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

// Flat batch offsets of a and b for every element of the broadcast batch shape.
struct BatchPlan {
  Shape batch;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

BatchPlan plan_batches(const Shape& ba, const Shape& bb, const Tensor& a, const Tensor& b) {
  const std::size_t rank = std::max(ba.size(), bb.size());
  Shape pa(rank - ba.size(), 1), pb(rank - bb.size(), 1);
  pa.insert(pa.end(), ba.begin(), ba.end());
  pb.insert(pb.end(), bb.begin(), bb.end());
  BatchPlan plan;
  plan.batch.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("matmul: batch axes of " + pair_str(a, b) + " do not broadcast");
    }
    plan.batch[i] = std::max(pa[i], pb[i]);
  }
  const std::size_t total = shape_numel(plan.batch);
  plan.a_index.resize(total);
  plan.b_index.resize(total);
  std::vector<std::size_t> coord(rank, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      ia = ia * pa[i] + (pa[i] == 1 ? 0 : coord[i]);
      ib = ib * pb[i] + (pb[i] == 1 ? 0 : coord[i]);
    }
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t i = rank; i-- > 0;) {
      if (++coord[i] < plan.batch[i]) break;
      coord[i] = 0;
    }
  }
  return plan;
}

}  // namespace

std::uint64_t matmul_macs() { return g_matmul_macs; }
void reset_matmul_macs() { g_matmul_macs = 0; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + pair_str(a, b));
  }
  const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), m = b.dim(b.rank() - 1);
  if (k != kb) throw DimensionError("matmul: inner dimensions of " + pair_str(a, b) + " differ");
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  BatchPlan plan = plan_batches(ba, bb, a, b);

  Shape out_shape = plan.batch;
  out_shape.push_back(n);
  out_shape.push_back(m);
  const std::size_t batches = plan.a_index.size();
  std::vector<float> out(batches * n * m);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  std::vector<double> acc(m);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const float* A = pa + plan.a_index[bi] * n * k;
    const float* B = pb + plan.b_index[bi] * k * m;
    float* C = out.data() + bi * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double aik = A[i * k + kk];
        const float* brow = B + kk * m;
        for (std::size_t j = 0; j < m; ++j) acc[j] += aik * brow[j];
      }
      for (std::size_t j = 0; j < m; ++j) C[i * m + j] = static_cast<float>(acc[j]);
    }
  }
  g_matmul_macs += static_cast<std::uint64_t>(batches) * n * k * m;

  return make_op_result(std::move(out_shape), std::move(out), {a, b},
                        [a, b, plan = std::move(plan), n, k, m](TensorImpl& o) {
                          const float* g = o.grad.data();
                          float* ga = grad_target(a);
                          float* gb = grad_target(b);
                          const float* A0 = a.data().data();
                          const float* B0 = b.data().data();
                          std::vector<double> acc_b, acc_a;
                          std::vector<float> bt;
                          if (gb) acc_b.resize(k * m);
                          if (ga) {
                            acc_a.resize(k);
                            bt.resize(k * m);
                          }
                          for (std::size_t bi = 0; bi < plan.a_index.size(); ++bi) {
                            const float* G = g + bi * n * m;
                            const float* A = A0 + plan.a_index[bi] * n * k;
                            const float* B = B0 + plan.b_index[bi] * k * m;
                            if (ga) {
                              // G·Bᵀ with B transposed once so the inner loop runs over contiguous rows.
                              for (std::size_t kk = 0; kk < k; ++kk) {
                                for (std::size_t j = 0; j < m; ++j) bt[j * k + kk] = B[kk * m + j];
                              }
                              float* GA = ga + plan.a_index[bi] * n * k;
                              for (std::size_t i = 0; i < n; ++i) {
                                std::fill(acc_a.begin(), acc_a.end(), 0.0);
                                for (std::size_t j = 0; j < m; ++j) {
                                  const double gij = G[i * m + j];
                                  if (gij == 0.0) continue;
                                  const float* row = bt.data() + j * k;
                                  for (std::size_t kk = 0; kk < k; ++kk) acc_a[kk] += gij * row[kk];
                                }
                                for (std::size_t kk = 0; kk < k; ++kk) GA[i * k + kk] += static_cast<float>(acc_a[kk]);
                              }
                            }
                            if (gb) {
                              std::fill(acc_b.begin(), acc_b.end(), 0.0);
                              for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t kk = 0; kk < k; ++kk) {
                                  const double aik = A[i * k + kk];
                                  if (aik == 0.0) continue;
                                  double* row = acc_b.data() + kk * m;
                                  for (std::size_t j = 0; j < m; ++j) row[j] += aik * G[i * m + j];
                                }
                              }
                              float* GB = gb + plan.b_index[bi] * k * m;
                              for (std::size_t t = 0; t < k * m; ++t) GB[t] += static_cast<float>(acc_b[t]);
                            }
                          }
                        });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2 for shape " + shape_to_string(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const std::size_t batches = x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<float> out(x.numel());
  const float* px = x.data().data();
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = px[b * r * c + i * c + j];
    }
  }
  return make_op_result(std::move(shape), std::move(out), {x}, [x, r, c, batches](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  return make_op_result(std::move(shape), x.to_vector(), {x}, [x](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
    float* ga = grad_target(a);
    float* gb = grad_target(b);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (ga) ga[i] += o.grad[i];
      if (gb) gb[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
    float* ga = grad_target(a);
    float* gb = grad_target(b);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (ga) ga[i] += o.grad[i];
      if (gb) gb[i] -= o.grad[i];
    }
  });
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  require_same_shape("elementwise_mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
    float* ga = grad_target(a);
    float* gb = grad_target(b);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (ga) ga[i] += o.grad[i] * b.data()[i];
      if (gb) gb[i] += o.grad[i] * a.data()[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_op_result(x.shape(), std::move(out), {x}, [x, factor](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.dim(x.rank() - 1)) {
    throw DimensionError("add_bias: cannot broadcast " + pair_str(bias, x));
  }
  const std::size_t d = bias.dim(0);
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + bias.data()[i % d];
  return make_op_result(x.shape(), std::move(out), {x, bias}, [x, bias, d](TensorImpl& o) {
    float* gx = grad_target(x);
    float* gb = grad_target(bias);
    if (gx) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
    if (gb) {
      std::vector<double> acc(d, 0.0);
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc[i % d] += o.grad[i];
      for (std::size_t j = 0; j < d; ++j) gb[j] += static_cast<float>(acc[j]);
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis("softmax", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<float> out(x.numel());
  const float* px = x.data().data();
  std::vector<double> e(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, double(px[base + l * s.inner]));
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        e[l] = std::exp(double(px[base + l * s.inner]) - mx);
        total += e[l];
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = static_cast<float>(e[l] / total);
    }
  }
  auto y = std::make_shared<std::vector<float>>(out);
  return make_op_result(x.shape(), std::move(out), {x}, [x, s, y](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = ou * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          dot += double(o.grad[idx]) * (*y)[idx];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          gx[idx] += static_cast<float>((*y)[idx] * (double(o.grad[idx]) - dot));
        }
      }
    }
  });
}

Tensor tanh(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
  auto y = std::make_shared<std::vector<float>>(out);
  return make_op_result(x.shape(), std::move(out), {x}, [x, y](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * (1.0f - (*y)[i] * (*y)[i]);
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  return make_op_result(x.shape(), std::move(out), {x}, [x](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = x.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += static_cast<float>(o.grad[i] * (cdf + v * pdf));
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta " + pair_str(gamma, beta) + " do not match width " +
                         std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const float* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += px[r * d + j];
    mu /= double(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = px[r * d + j] - mu;
      var += c * c;
    }
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (px[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = static_cast<float>(h * gamma.data()[j] + beta.data()[j]);
    }
  }
  return make_op_result(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, d, rows, xhat, inv_std](TensorImpl& o) {
                          float* gx = grad_target(x);
                          float* gg = grad_target(gamma);
                          float* gbeta = grad_target(beta);
                          std::vector<double> acc_g(d, 0.0), acc_b(d, 0.0), dxh(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                              const double g = o.grad[r * d + j];
                              const double h = (*xhat)[r * d + j];
                              acc_g[j] += g * h;
                              acc_b[j] += g;
                              dxh[j] = g * gamma.data()[j];
                              m1 += dxh[j];
                              m2 += dxh[j] * h;
                            }
                            if (!gx) continue;
                            m1 /= double(d);
                            m2 /= double(d);
                            for (std::size_t j = 0; j < d; ++j) {
                              const double h = (*xhat)[r * d + j];
                              gx[r * d + j] += static_cast<float>((*inv_std)[r] * (dxh[j] - m1 - h * m2));
                            }
                          }
                          for (std::size_t j = 0; j < d; ++j) {
                            if (gg) gg[j] += static_cast<float>(acc_g[j]);
                            if (gbeta) gbeta[j] += static_cast<float>(acc_b[j]);
                          }
                        });
}

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
  if (tensors.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = tensors.front();
  require_axis("concat", first, axis);
  Shape shape = first.shape();
  std::size_t total = 0;
  for (const Tensor& t : tensors) {
    if (t.rank() != first.rank()) throw DimensionError("concat: rank mismatch between " + pair_str(first, t));
    for (std::size_t i = 0; i < t.rank(); ++i) {
      if (i != axis && t.dim(i) != first.dim(i)) {
        throw DimensionError("concat: shapes " + pair_str(first, t) + " differ off the concat axis");
      }
    }
    total += t.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_at(shape, axis);
  std::vector<float> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t col = 0;
  for (const Tensor& t : tensors) {
    offsets.push_back(col);
    const std::size_t chunk = t.dim(axis) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(t.data().data() + o * chunk, chunk, out.data() + o * s.len * s.inner + col);
    }
    col += chunk;
  }
  return make_op_result_list(std::move(shape), std::move(out), tensors,
                             [tensors, offsets, s, axis](TensorImpl& o) {
                               for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
                                 float* g = grad_target(tensors[ti]);
                                 if (!g) continue;
                                 const std::size_t chunk = tensors[ti].dim(axis) * s.inner;
                                 for (std::size_t ou = 0; ou < s.outer; ++ou) {
                                   const float* src = o.grad.data() + ou * s.len * s.inner + offsets[ti];
                                   for (std::size_t c = 0; c < chunk; ++c) g[ou * chunk + c] += src[c];
                                 }
                               }
                             });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis("slice", x, axis);
  if (length == 0 || start + length > x.dim(axis)) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(x.dim(axis)));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<float> out(shape_numel(shape));
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + o * s.len * s.inner + start * s.inner, chunk, out.data() + o * chunk);
  }
  return make_op_result(std::move(shape), std::move(out), {x}, [x, s, start, chunk](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      float* dst = gx + ou * s.len * s.inner + start * s.inner;
      for (std::size_t c = 0; c < chunk; ++c) dst[c] += o.grad[ou * chunk + c];
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() < 1) throw DimensionError("gather_rows: scalar input");
  if (rows.empty()) throw IndexError("gather_rows: empty index list");
  const std::size_t n = x.dim(0);
  const std::size_t row = x.numel() / n;
  for (std::size_t r : rows) {
    if (r >= n) throw IndexError("gather_rows: index " + std::to_string(r) + " out of range [0," + std::to_string(n) + ")");
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data().data() + rows[i] * row, row, out.data() + i * row);
  }
  return make_op_result(std::move(shape), std::move(out), {x}, [x, rows, row](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < row; ++c) gx[rows[i] * row + c] += o.grad[i * row + c];
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  require_axis("mean", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<float> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += x.data()[o * s.len * s.inner + l * s.inner + in];
      out[o * s.inner + in] = static_cast<float>(acc / double(s.len));
    }
  }
  return make_op_result(drop_axis(x.shape(), axis), std::move(out), {x}, [x, s](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    const float inv = 1.0f / static_cast<float>(s.len);
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const float g = o.grad[ou * s.inner + in] * inv;
        for (std::size_t l = 0; l < s.len; ++l) gx[ou * s.len * s.inner + l * s.inner + in] += g;
      }
    }
  });
}

Tensor max(const Tensor& x, std::size_t axis) {
  require_axis("max", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<float> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = 0;
      float bv = x.data()[o * s.len * s.inner + in];
      for (std::size_t l = 1; l < s.len; ++l) {
        const float v = x.data()[o * s.len * s.inner + l * s.inner + in];
        if (v > bv) {
          bv = v;
          best = l;
        }
      }
      out[o * s.inner + in] = bv;
      arg[o * s.inner + in] = o * s.len * s.inner + best * s.inner + in;
    }
  }
  return make_op_result(drop_axis(x.shape(), axis), std::move(out), {x}, [x, arg](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op_result({}, {static_cast<float>(acc)}, {x}, [x](TensorImpl& o) {
    float* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += o.grad[0];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [in,out], got " + shape_to_string(weight.shape()));
  Tensor y;
  if (x.rank() == 1) {
    if (x.dim(0) != weight.dim(0)) throw DimensionError("linear: input " + pair_str(x, weight) + " mismatch");
    y = reshape(matmul(reshape(x, {1, x.dim(0)}), weight), {weight.dim(1)});
  } else {
    y = matmul(x, weight);
  }
  return bias.defined() ? add_bias(y, bias) : y;
}

Tensor attention_probs(const Tensor& q, const Tensor& keys) {
  if (q.rank() < 2 || keys.rank() < 2 || q.dim(q.rank() - 1) != keys.dim(keys.rank() - 1)) {
    throw DimensionError("attention: query/key widths of " + pair_str(q, keys) + " differ");
  }
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.dim(q.rank() - 1)));
  Tensor scores = scale(matmul(q, transpose(keys)), inv_sqrt_d);
  return softmax(scores, scores.rank() - 1);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& keys, const Tensor& values) {
  if (values.rank() < 2 || keys.dim(keys.rank() - 2) != values.dim(values.rank() - 2)) {
    throw DimensionError("attention: key/value lengths of " + pair_str(keys, values) + " differ");
  }
  return matmul(attention_probs(q, keys), values);
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy: logits must be [C], got " + shape_to_string(logits.shape()));
  const std::size_t c = logits.dim(0);
  if (label >= c) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(c) + ")");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits.data()) mx = std::max(mx, double(v));
  double total = 0.0;
  for (float v : logits.data()) total += std::exp(double(v) - mx);
  const double lse = mx + std::log(total);
  const double loss = lse - double(logits.data()[label]);
  return make_op_result({}, {static_cast<float>(loss)}, {logits}, [logits, label, lse](TensorImpl& o) {
    float* gl = grad_target(logits);
    if (!gl) return;
    const double g = o.grad[0];
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      const double p = std::exp(double(logits.data()[i]) - lse);
      gl[i] += static_cast<float>(g * (p - (i == label ? 1.0 : 0.0)));
    }
  });
}

Tensor straight_through_gate(const Tensor& x, const Tensor& gate) {
  if (x.rank() < 1 || gate.rank() != 1 || gate.dim(0) != x.dim(0)) {
    throw DimensionError("straight_through_gate: gate " + pair_str(gate, x) + " mismatch");
  }
  const std::size_t row = x.numel() / x.dim(0);
  return make_op_result(x.shape(), x.to_vector(), {x, gate}, [x, gate, row](TensorImpl& o) {
    float* gx = grad_target(x);
    float* gg = grad_target(gate);
    if (gx) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
    if (gg) {
      for (std::size_t r = 0; r < gate.dim(0); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < row; ++c) acc += double(o.grad[r * row + c]) * x.data()[r * row + c];
        gg[r] += static_cast<float>(acc);
      }
    }
  });
}

}  // namespace tspm
