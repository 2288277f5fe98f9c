#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "modex/tape.hpp"

// Differentiable primitives. Every operation treats its operands as matrices
// of rows x cols (trailing dimension = cols) and keeps leading dimensions.
namespace modex::ops {

namespace detail {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

inline Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

// out[r,:] = bias + x[r,:] * w, with w stored [din, dout].
template <class T>
void matmul_bias(const T* x, const T* w, const T* bias, T* out, std::size_t rows,
                 std::size_t din, std::size_t dout) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out + r * dout;
    for (std::size_t j = 0; j < dout; ++j) o[j] = bias ? bias[j] : T(0);
    const T* xr = x + r * din;
    for (std::size_t k = 0; k < din; ++k) {
      const T a = xr[k];
      const T* wk = w + k * dout;
      for (std::size_t j = 0; j < dout; ++j) o[j] += a * wk[j];
    }
  }
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

}  // namespace detail

/// input[*,Din] * weight[Din,Dout] + bias[Dout] -> [*,Dout]
template <class T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  if (w.rank() != 2 || x.cols() != w.dim(0) || b.size() != w.dim(1)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + ", weight " +
                         shape_string(w.shape()) + ", bias " +
                         shape_string(b.shape()) + " are incompatible");
  }
  const std::size_t rows = x.rows(), din = w.dim(0), dout = w.dim(1);
  Tensor<T> out(detail::with_last(x.shape(), dout));
  detail::matmul_bias(x.raw(), w.raw(), b.raw(), out.raw(), rows, din, dout);

  const std::size_t xi = input.id, wi = weight.id, bi = bias.id;
  return input.tape->record(
      "linear", std::move(out), {input, weight, bias},
      [xi, wi, bi, rows, din, dout](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& xv = tape.value(xi);
        const Tensor<T>& wv = tape.value(wi);
        if (tape.requires_grad(xi)) {
          Tensor<T>& gx = tape.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.raw() + r * dout;
            for (std::size_t k = 0; k < din; ++k) {
              const T* wk = wv.raw() + k * dout;
              T acc = T(0);
              for (std::size_t j = 0; j < dout; ++j) acc += gr[j] * wk[j];
              gx[r * din + k] += acc;
            }
          }
        }
        if (tape.requires_grad(wi)) {
          Tensor<T>& gw = tape.grad_buffer(wi);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.raw() + r * dout;
            for (std::size_t k = 0; k < din; ++k) {
              const T a = xv[r * din + k];
              T* gwk = gw.raw() + k * dout;
              for (std::size_t j = 0; j < dout; ++j) gwk[j] += a * gr[j];
            }
          }
        }
        if (tape.requires_grad(bi)) {
          Tensor<T>& gb = tape.grad_buffer(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
        }
      });
}

/// Exact GELU, x * Phi(x) with Phi via erf.
template <class T>
Var<T> gelu(Var<T> input) {
  const Tensor<T>& x = input.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::gelu(x[i]);
  const std::size_t xi = input.id;
  return input.tape->record("gelu", std::move(out), {input},
                            [xi](Tape<T>& tape, std::size_t self) {
                              const Tensor<T>& g = tape.grad_buffer(self);
                              const Tensor<T>& xv = tape.value(xi);
                              Tensor<T>& gx = tape.grad_buffer(xi);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                gx[i] += g[i] * detail::gelu_derivative(xv[i]);
                            });
}

/// Row-wise softmax with max subtraction.
template <class T>
Var<T> softmax(Var<T> input) {
  const Tensor<T>& x = input.value();
  const std::size_t rows = x.rows(), k = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = x.row(r);
    auto orow = out.row(r);
    const T mx = *std::max_element(xr.begin(), xr.end());
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      total += orow[j];
    }
    for (std::size_t j = 0; j < k; ++j) orow[j] /= total;
  }
  const std::size_t xi = input.id;
  return input.tape->record(
      "softmax", std::move(out), {input},
      [xi, rows, k](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& y = tape.value(self);
        Tensor<T>& gx = tape.grad_buffer(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = T(0);
          for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
          for (std::size_t j = 0; j < k; ++j)
            gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
        }
      });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("add", std::move(out), {a, b},
                        [ai, bi](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          for (std::size_t id : {ai, bi}) {
                            if (!tape.requires_grad(id)) continue;
                            Tensor<T>& gi = tape.grad_buffer(id);
                            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                          }
                        });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("mul", std::move(out), {a, b},
                        [ai, bi](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          const Tensor<T>& av = tape.value(ai);
                          const Tensor<T>& bv = tape.value(bi);
                          if (tape.requires_grad(ai)) {
                            Tensor<T>& ga = tape.grad_buffer(ai);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                          }
                          if (tape.requires_grad(bi)) {
                            Tensor<T>& gb = tape.grad_buffer(bi);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        });
}

/// x[r,c] + v[c]; broadcasts a vector across every row.
template <class T>
Var<T> add_row_vector(Var<T> x, Var<T> v) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& vv = v.value();
  if (vv.size() != xv.cols()) {
    throw DimensionError("add_row_vector: " + shape_string(xv.shape()) + " vs " +
                         shape_string(vv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += vv[c];
  const std::size_t xi = x.id, vi = v.id;
  return x.tape->record("add_row_vector", std::move(out), {x, v},
                        [xi, vi, rows, cols](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          if (tape.requires_grad(xi)) {
                            Tensor<T>& gx = tape.grad_buffer(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (tape.requires_grad(vi)) {
                            Tensor<T>& gv = tape.grad_buffer(vi);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                gv[c] += g[r * cols + c];
                          }
                        });
}

/// x[r,c] * s[r,k]: scales each row by one column of a per-row table.
template <class T>
Var<T> mul_col(Var<T> x, Var<T> s, std::size_t k) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  if (sv.rows() != xv.rows() || k >= sv.cols()) {
    throw DimensionError("mul_col: " + shape_string(xv.shape()) + " vs " +
                         shape_string(sv.shape()) + " column " + std::to_string(k));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols(), width = sv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= sv[r * width + k];
  const std::size_t xi = x.id, si = s.id;
  return x.tape->record(
      "mul_col", std::move(out), {x, s},
      [xi, si, rows, cols, width, k](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& xv = tape.value(xi);
        const Tensor<T>& sv = tape.value(si);
        if (tape.requires_grad(xi)) {
          Tensor<T>& gx = tape.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] += g[r * cols + c] * sv[r * width + k];
        }
        if (tape.requires_grad(si)) {
          Tensor<T>& gs = tape.grad_buffer(si);
          for (std::size_t r = 0; r < rows; ++r) {
            T acc = T(0);
            for (std::size_t c = 0; c < cols; ++c)
              acc += g[r * cols + c] * xv[r * cols + c];
            gs[r * width + k] += acc;
          }
        }
      });
}

/// x[r,c] - m[r]; m has one column.
template <class T>
Var<T> sub_col(Var<T> x, Var<T> m) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& mv = m.value();
  if (mv.cols() != 1 || mv.rows() != xv.rows()) {
    throw DimensionError("sub_col: " + shape_string(xv.shape()) + " vs " +
                         shape_string(mv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] -= mv[r];
  const std::size_t xi = x.id, mi = m.id;
  return x.tape->record("sub_col", std::move(out), {x, m},
                        [xi, mi, rows, cols](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          if (tape.requires_grad(xi)) {
                            Tensor<T>& gx = tape.grad_buffer(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (tape.requires_grad(mi)) {
                            Tensor<T>& gm = tape.grad_buffer(mi);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T acc = T(0);
                              for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c];
                              gm[r] -= acc;
                            }
                          }
                        });
}

/// x[r,c] + m[r]; m has one column.
template <class T>
Var<T> add_col(Var<T> x, Var<T> m) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& mv = m.value();
  if (mv.cols() != 1 || mv.rows() != xv.rows()) {
    throw DimensionError("add_col: " + shape_string(xv.shape()) + " vs " +
                         shape_string(mv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += mv[r];
  const std::size_t xi = x.id, mi = m.id;
  return x.tape->record("add_col", std::move(out), {x, m},
                        [xi, mi, rows, cols](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          if (tape.requires_grad(xi)) {
                            Tensor<T>& gx = tape.grad_buffer(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (tape.requires_grad(mi)) {
                            Tensor<T>& gm = tape.grad_buffer(mi);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T acc = T(0);
                              for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c];
                              gm[r] += acc;
                            }
                          }
                        });
}

/// x[r,c] / s[r]; s has one column.
template <class T>
Var<T> div_col(Var<T> x, Var<T> s) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != xv.rows()) {
    throw DimensionError("div_col: " + shape_string(xv.shape()) + " vs " +
                         shape_string(sv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= sv[r];
  const std::size_t xi = x.id, si = s.id;
  return x.tape->record(
      "div_col", std::move(out), {x, s},
      [xi, si, rows, cols](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& sv = tape.value(si);
        if (tape.requires_grad(xi)) {
          Tensor<T>& gx = tape.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] / sv[r];
        }
        if (tape.requires_grad(si)) {
          const Tensor<T>& y = tape.value(self);
          Tensor<T>& gs = tape.grad_buffer(si);
          for (std::size_t r = 0; r < rows; ++r) {
            T acc = T(0);
            for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * y[r * cols + c];
            gs[r] -= acc / sv[r];
          }
        }
      });
}

/// Mean over the trailing dimension; output keeps rank with last dim 1.
template <class T>
Var<T> row_mean(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out(detail::with_last(xv.shape(), 1));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < cols; ++c) acc += xv[r * cols + c];
    out[r] = acc / T(cols);
  }
  const std::size_t xi = x.id;
  return x.tape->record("row_mean", std::move(out), {x},
                        [xi, rows, cols](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          Tensor<T>& gx = tape.grad_buffer(xi);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T share = g[r] / T(cols);
                            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += share;
                          }
                        });
}

template <class T>
Var<T> square(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
  const std::size_t xi = x.id;
  return x.tape->record("square", std::move(out), {x},
                        [xi](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          const Tensor<T>& xv = tape.value(xi);
                          Tensor<T>& gx = tape.grad_buffer(xi);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[i] += T(2) * xv[i] * g[i];
                        });
}

/// max(sqrt(x), floor) for x >= 0. Clamped entries pass no gradient.
template <class T>
Var<T> sqrt_clamped(Var<T> x, T floor) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = std::max(std::sqrt(std::max(xv[i], T(0))), floor);
  const std::size_t xi = x.id;
  return x.tape->record("sqrt_clamped", std::move(out), {x},
                        [xi, floor](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad_buffer(self);
                          const Tensor<T>& y = tape.value(self);
                          const Tensor<T>& xv = tape.value(xi);
                          Tensor<T>& gx = tape.grad_buffer(xi);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (std::sqrt(std::max(xv[i], T(0))) > floor)
                              gx[i] += g[i] / (T(2) * y[i]);
                          }
                        });
}

/// x * scale[v] + shift[v] where v = row % variates (rows are [.., N] tokens).
template <class T>
Var<T> variate_affine(Var<T> x, Var<T> scale, Var<T> shift) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = scale.value().size();
  if (shift.value().size() != n || xv.rows() % n != 0) {
    throw DimensionError("variate_affine: " + shape_string(xv.shape()) +
                         " with " + std::to_string(n) + " variates");
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  const Tensor<T>& sc = scale.value();
  const Tensor<T>& sh = shift.value();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = xv[r * cols + c] * sc[r % n] + sh[r % n];
  const std::size_t xi = x.id, ci = scale.id, hi = shift.id;
  return x.tape->record(
      "variate_affine", std::move(out), {x, scale, shift},
      [xi, ci, hi, rows, cols, n](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& xv = tape.value(xi);
        const Tensor<T>& sc = tape.value(ci);
        if (tape.requires_grad(xi)) {
          Tensor<T>& gx = tape.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] += g[r * cols + c] * sc[r % n];
        }
        if (tape.requires_grad(ci)) {
          Tensor<T>& gc = tape.grad_buffer(ci);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gc[r % n] += g[r * cols + c] * xv[r * cols + c];
        }
        if (tape.requires_grad(hi)) {
          Tensor<T>& gh = tape.grad_buffer(hi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gh[r % n] += g[r * cols + c];
        }
      });
}

/// (x - shift[v]) / scale[v]; inverse of variate_affine.
template <class T>
Var<T> variate_affine_inverse(Var<T> x, Var<T> scale, Var<T> shift) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = scale.value().size();
  if (shift.value().size() != n || xv.rows() % n != 0) {
    throw DimensionError("variate_affine_inverse: " + shape_string(xv.shape()) +
                         " with " + std::to_string(n) + " variates");
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  const Tensor<T>& sc = scale.value();
  const Tensor<T>& sh = shift.value();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = (xv[r * cols + c] - sh[r % n]) / sc[r % n];
  const std::size_t xi = x.id, ci = scale.id, hi = shift.id;
  return x.tape->record(
      "variate_affine_inverse", std::move(out), {x, scale, shift},
      [xi, ci, hi, rows, cols, n](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad_buffer(self);
        const Tensor<T>& y = tape.value(self);
        const Tensor<T>& sc = tape.value(ci);
        if (tape.requires_grad(xi)) {
          Tensor<T>& gx = tape.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] += g[r * cols + c] / sc[r % n];
        }
        if (tape.requires_grad(ci)) {
          Tensor<T>& gc = tape.grad_buffer(ci);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gc[r % n] -= g[r * cols + c] * y[r * cols + c] / sc[r % n];
        }
        if (tape.requires_grad(hi)) {
          Tensor<T>& gh = tape.grad_buffer(hi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gh[r % n] -= g[r * cols + c] / sc[r % n];
        }
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const std::size_t xi = x.id;
  return x.tape->record("sum", Tensor<T>::scalar(acc), {x},
                        [xi](Tape<T>& tape, std::size_t self) {
                          const T g = tape.grad_buffer(self)[0];
                          Tensor<T>& gx = tape.grad_buffer(xi);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                        });
}

template <class T>
Var<T> mean(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T acc = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const std::size_t xi = x.id, n = xv.size();
  return x.tape->record("mean", Tensor<T>::scalar(acc / T(n)), {x},
                        [xi, n](Tape<T>& tape, std::size_t self) {
                          const T g = tape.grad_buffer(self)[0] / T(n);
                          Tensor<T>& gx = tape.grad_buffer(xi);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                        });
}

/// Mean squared error against a constant target.
template <class T>
Var<T> mse(Var<T> prediction, const Tensor<T>& target) {
  const Tensor<T>& p = prediction.value();
  detail::require_same_shape("mse", p, target);
  T acc = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - target[i];
    acc += d * d;
  }
  const std::size_t pi = prediction.id, n = p.size();
  return prediction.tape->record(
      "mse", Tensor<T>::scalar(acc / T(n)), {prediction},
      [pi, n, target](Tape<T>& tape, std::size_t self) {
        const T g = tape.grad_buffer(self)[0] * T(2) / T(n);
        const Tensor<T>& pv = tape.value(pi);
        Tensor<T>& gp = tape.grad_buffer(pi);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pv[i] - target[i]);
      });
}

}  // namespace modex::ops
