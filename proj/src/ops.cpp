#include "vitc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "gemm.hpp"

namespace vitc {

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DTypeError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " and " +
                     dtype_name(b.dtype()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

template <class T>
Tensor wrap(Shape shape, std::vector<T> v) {
  return Tensor::from_vector(std::move(shape), std::move(v));
}

struct AxisTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w;
};

AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps taps;
  taps.i0.resize(out);
  taps.i1.resize(out);
  taps.w.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    auto i0 = static_cast<std::size_t>(std::floor(s));
    taps.i0[d] = i0;
    taps.i1[d] = std::min(i0 + 1, in - 1);
    taps.w[d] = s - static_cast<double>(i0);
  }
  return taps;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  return dispatch(a.dtype(), [&]<class T>() {
    std::vector<T> out(m * n);
    detail::gemm<T>(false, false, m, n, k, a.values<T>().data(), k, b.values<T>().data(), n,
                    out.data(), n, false);
    return make_result(
        {m, n}, std::move(out), {a, b}, "matmul",
        [a = a.detach(), b = b.detach(), need_a = a.requires_grad(), need_b = b.requires_grad(),
         m, n, k](const Tensor&, const Tensor& g) {
          std::vector<Tensor> grads(2);
          const T* gp = g.values<T>().data();
          if (need_a) {
            std::vector<T> ga(m * k);
            detail::gemm<T>(false, true, m, k, n, gp, n, b.values<T>().data(), n, ga.data(), k,
                            false);
            grads[0] = wrap<T>({m, k}, std::move(ga));
          }
          if (need_b) {
            std::vector<T> gb(k * n);
            detail::gemm<T>(true, false, k, n, m, a.values<T>().data(), k, gp, n, gb.data(), n,
                            false);
            grads[1] = wrap<T>({k, n}, std::move(gb));
          }
          return grads;
        });
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_rank(bias, 1, "linear");
  require_same_dtype(x, w, "linear");
  require_same_dtype(x, bias, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k || bias.dim(0) != n) {
    throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                     shape_str(bias.shape()));
  }
  return dispatch(x.dtype(), [&]<class T>() {
    std::vector<T> out(m * n);
    auto bv = bias.values<T>();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
    detail::gemm<T>(false, false, m, n, k, x.values<T>().data(), k, w.values<T>().data(), n,
                    out.data(), n, true);
    return make_result(
        {m, n}, std::move(out), {x, w, bias}, "linear",
        [x = x.detach(), w = w.detach(), need_x = x.requires_grad(), need_w = w.requires_grad(),
         need_b = bias.requires_grad(), m, n, k](const Tensor&, const Tensor& g) {
          std::vector<Tensor> grads(3);
          const T* gp = g.values<T>().data();
          if (need_x) {
            std::vector<T> gx(m * k);
            detail::gemm<T>(false, true, m, k, n, gp, n, w.values<T>().data(), n, gx.data(), k,
                            false);
            grads[0] = wrap<T>({m, k}, std::move(gx));
          }
          if (need_w) {
            std::vector<T> gw(k * n);
            detail::gemm<T>(true, false, k, n, m, x.values<T>().data(), k, gp, n, gw.data(), n,
                            false);
            grads[1] = wrap<T>({k, n}, std::move(gw));
          }
          if (need_b) {
            std::vector<T> gb(n, T(0));
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < n; ++j) gb[j] += gp[i * n + j];
            }
            grads[2] = wrap<T>({n}, std::move(gb));
          }
          return grads;
        });
  });
}

Tensor softmax_axis(const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) throw ShapeError("softmax_axis: axis out of range");
  const auto& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T mx = x[base];
        for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x[base + l * inner]);
        T total = 0;
        for (std::size_t l = 0; l < len; ++l) {
          const T e = std::exp(x[base + l * inner] - mx);
          y[base + l * inner] = e;
          total += e;
        }
        for (std::size_t l = 0; l < len; ++l) y[base + l * inner] /= total;
      }
    }
    return make_result(s, std::move(y), {t}, "softmax_axis",
                       [outer, inner, len](const Tensor& out, const Tensor& g) {
                         auto yv = out.values<T>();
                         auto gv = g.values<T>();
                         std::vector<T> gx(yv.size());
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t in = 0; in < inner; ++in) {
                             const std::size_t base = o * len * inner + in;
                             T dot = 0;
                             for (std::size_t l = 0; l < len; ++l) {
                               dot += gv[base + l * inner] * yv[base + l * inner];
                             }
                             for (std::size_t l = 0; l < len; ++l) {
                               const auto i = base + l * inner;
                               gx[i] = yv[i] * (gv[i] - dot);
                             }
                           }
                         }
                         return std::vector<Tensor>{wrap<T>(out.shape(), std::move(gx))};
                       });
  });
}

Tensor layer_norm(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps) {
  if (t.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  require_same_dtype(t, gain, "layer_norm");
  require_same_dtype(t, bias, "layer_norm");
  const std::size_t c = t.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(c) + "]");
  }
  const std::size_t rows = t.numel() / c;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    auto gv = gain.values<T>();
    auto bv = bias.values<T>();
    std::vector<T> y(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> rstd(rows);
    const T inv_c = T(1) / static_cast<T>(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * c;
      T mu = 0;
      for (std::size_t j = 0; j < c; ++j) mu += xr[j];
      mu *= inv_c;
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var *= inv_c;
      const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
      rstd[r] = rs;
      for (std::size_t j = 0; j < c; ++j) {
        const T h = (xr[j] - mu) * rs;
        xhat[r * c + j] = h;
        y[r * c + j] = h * gv[j] + bv[j];
      }
    }
    return make_result(
        t.shape(), std::move(y), {t, gain, bias}, "layer_norm",
        [gain = gain.detach(), xhat = std::move(xhat), rstd = std::move(rstd), rows, c,
         shape = t.shape()](const Tensor&, const Tensor& g) {
          auto gv = g.values<T>();
          auto gn = gain.values<T>();
          std::vector<T> gx(gv.size()), gg(c, T(0)), gb(c, T(0));
          std::vector<T> dxh(c);
          const T inv_c = T(1) / static_cast<T>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = gv.data() + r * c;
            const T* hr = xhat.data() + r * c;
            T s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              dxh[j] = gr[j] * gn[j];
              s1 += dxh[j];
              s2 += dxh[j] * hr[j];
              gg[j] += gr[j] * hr[j];
              gb[j] += gr[j];
            }
            s1 *= inv_c;
            s2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              gx[r * c + j] = rstd[r] * (dxh[j] - s1 - hr[j] * s2);
            }
          }
          return std::vector<Tensor>{wrap<T>(shape, std::move(gx)), wrap<T>({c}, std::move(gg)),
                                     wrap<T>({c}, std::move(gb))};
        });
  });
}

namespace {

// tanh through one exp; the saturated branch keeps exp from overflowing.
template <class T>
inline T fast_tanh(T u) {
  if (u > T(15)) return T(1);
  if (u < T(-15)) return T(-1);
  const T e = std::exp(T(2) * u);
  return (e - T(1)) / (e + T(1));
}

}  // namespace

Tensor gelu(const Tensor& t) {
  return dispatch(t.dtype(), [&]<class T>() {
    constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k1 = T(0.044715);
    auto x = t.values<T>();
    std::vector<T> y(x.size());
    std::vector<T> th(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T v = x[i];
      th[i] = fast_tanh(k0 * (v + k1 * v * v * v));
      y[i] = T(0.5) * v * (T(1) + th[i]);
    }
    return make_result(t.shape(), std::move(y), {t}, "gelu",
                       [x = t.detach(), th = std::move(th)](const Tensor& out, const Tensor& g) {
                         auto xv = x.values<T>();
                         auto gv = g.values<T>();
                         std::vector<T> gx(xv.size());
                         for (std::size_t i = 0; i < xv.size(); ++i) {
                           const T v = xv[i];
                           const T d = T(0.5) * (T(1) + th[i]) +
                                       T(0.5) * v * (T(1) - th[i] * th[i]) * k0 * (T(1) + T(3) * k1 * v * v);
                           gx[i] = gv[i] * d;
                         }
                         return std::vector<Tensor>{wrap<T>(out.shape(), std::move(gx))};
                       });
  });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "elementwise");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) {
    throw ShapeError("elementwise: " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  }
  const std::size_t inner = b.numel();
  const std::size_t reps = a.numel() / inner;
  return dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto y = b.values<T>();
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < reps; ++r) {
      const T* xr = x.data() + r * inner;
      T* o = out.data() + r * inner;
      switch (op) {
        case ElementwiseOp::add:
          for (std::size_t j = 0; j < inner; ++j) o[j] = xr[j] + y[j];
          break;
        case ElementwiseOp::sub:
          for (std::size_t j = 0; j < inner; ++j) o[j] = xr[j] - y[j];
          break;
        case ElementwiseOp::mul:
          for (std::size_t j = 0; j < inner; ++j) o[j] = xr[j] * y[j];
          break;
      }
    }
    return make_result(
        sa, std::move(out), {a, b}, "elementwise",
        [op, a = a.detach(), b = b.detach(), need_a = a.requires_grad(),
         need_b = b.requires_grad(), inner, reps](const Tensor&, const Tensor& g) {
          std::vector<Tensor> grads(2);
          auto gv = g.values<T>();
          if (need_a) {
            if (op == ElementwiseOp::mul) {
              auto y = b.values<T>();
              std::vector<T> ga(gv.size());
              for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < inner; ++j) ga[r * inner + j] = gv[r * inner + j] * y[j];
              }
              grads[0] = wrap<T>(a.shape(), std::move(ga));
            } else {
              grads[0] = g;
            }
          }
          if (need_b) {
            std::vector<T> gb(inner, T(0));
            if (op == ElementwiseOp::mul) {
              auto x = a.values<T>();
              for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < inner; ++j) gb[j] += gv[r * inner + j] * x[r * inner + j];
              }
            } else {
              const T sign = op == ElementwiseOp::sub ? T(-1) : T(1);
              for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < inner; ++j) gb[j] += sign * gv[r * inner + j];
              }
            }
            grads[1] = wrap<T>(b.shape(), std::move(gb));
          }
          return grads;
        });
  });
}

Tensor scale(const Tensor& t, double factor) {
  return dispatch(t.dtype(), [&]<class T>() {
    const T f = static_cast<T>(factor);
    auto x = t.values<T>();
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * f;
    return make_result(t.shape(), std::move(y), {t}, "scale", [f](const Tensor& out, const Tensor& g) {
      auto gv = g.values<T>();
      std::vector<T> gx(gv.size());
      for (std::size_t i = 0; i < gv.size(); ++i) gx[i] = gv[i] * f;
      return std::vector<Tensor>{wrap<T>(out.shape(), std::move(gx))};
    });
  });
}

Tensor sum(const Tensor& t) {
  return dispatch(t.dtype(), [&]<class T>() {
    T total = 0;
    for (T v : t.values<T>()) total += v;
    return make_result({}, std::vector<T>{total}, {t}, "sum",
                       [shape = t.shape()](const Tensor&, const Tensor& g) {
                         return std::vector<Tensor>{Tensor::full(shape, g.item(), dtype_of<T>())};
                       });
  });
}

Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.numel())); }

Tensor mean_axis0(const Tensor& t) {
  if (t.rank() < 1) throw ShapeError("mean_axis0: rank-0 input");
  const std::size_t rows = t.dim(0);
  const std::size_t inner = t.numel() / rows;
  Shape out_shape(t.shape().begin() + 1, t.shape().end());
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(inner, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < inner; ++j) y[j] += x[r * inner + j];
    }
    const T inv = T(1) / static_cast<T>(rows);
    for (auto& v : y) v *= inv;
    return make_result(out_shape, std::move(y), {t}, "mean_axis0",
                       [rows, inner, shape = t.shape()](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         const T inv = T(1) / static_cast<T>(rows);
                         std::vector<T> gx(rows * inner);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < inner; ++j) gx[r * inner + j] = gv[j] * inv;
                         }
                         return std::vector<Tensor>{wrap<T>(shape, std::move(gx))};
                       });
  });
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw ShapeError("reshape: " + shape_str(t.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), *t.impl()->data, {t}, "reshape",
                     [in_shape = t.shape()](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{
                           Tensor(std::make_shared<TensorImpl>(TensorImpl{in_shape, g.dtype(),
                                                                          g.impl()->data, false,
                                                                          nullptr}))};
                     });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() < 1 || count == 0 || begin + count > t.dim(0)) {
    throw ShapeError("slice_rows: range out of bounds for " + shape_str(t.shape()));
  }
  const std::size_t row = t.numel() / t.dim(0);
  Shape out_shape = t.shape();
  out_shape[0] = count;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(x.begin() + begin * row, x.begin() + (begin + count) * row);
    return make_result(out_shape, std::move(y), {t}, "slice_rows",
                       [row, begin, shape = t.shape()](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<T> gx(shape_numel(shape), T(0));
                         std::copy(gv.begin(), gv.end(), gx.begin() + begin * row);
                         return std::vector<Tensor>{wrap<T>(shape, std::move(gx))};
                       });
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto& first = parts.front();
  if (first.rank() < 1) throw ShapeError("concat_rows: rank-0 input");
  Shape tail(first.shape().begin() + 1, first.shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_same_dtype(first, p, "concat_rows");
    if (p.rank() != first.rank() || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows: trailing extents differ");
    }
    rows += p.dim(0);
  }
  Shape out_shape = first.shape();
  out_shape[0] = rows;
  return dispatch(first.dtype(), [&]<class T>() {
    std::vector<T> y;
    y.reserve(shape_numel(out_shape));
    std::vector<std::size_t> sizes;
    std::vector<Shape> shapes;
    for (const auto& p : parts) {
      auto v = p.values<T>();
      y.insert(y.end(), v.begin(), v.end());
      sizes.push_back(v.size());
      shapes.push_back(p.shape());
    }
    return make_result(out_shape, std::move(y), parts, "concat_rows",
                       [sizes, shapes](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<Tensor> grads;
                         std::size_t off = 0;
                         for (std::size_t i = 0; i < sizes.size(); ++i) {
                           grads.push_back(wrap<T>(
                               shapes[i], std::vector<T>(gv.begin() + off, gv.begin() + off + sizes[i])));
                           off += sizes[i];
                         }
                         return grads;
                       });
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const auto& first = parts.front();
  if (first.rank() < 1) throw ShapeError("concat_last: rank-0 input");
  Shape lead(first.shape().begin(), first.shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype(first, p, "concat_last");
    if (p.rank() != first.rank() || !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw ShapeError("concat_last: leading extents differ");
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  return dispatch(first.dtype(), [&]<class T>() {
    std::vector<T> y(rows * total);
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto v = parts[i].values<T>();
      const std::size_t w = widths[i];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(v.begin() + r * w, v.begin() + (r + 1) * w, y.begin() + r * total + off);
      }
      off += w;
    }
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    return make_result(out_shape, std::move(y), parts, "concat_last",
                       [widths, shapes, rows, total](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<Tensor> grads;
                         std::size_t off = 0;
                         for (std::size_t i = 0; i < widths.size(); ++i) {
                           const std::size_t w = widths[i];
                           std::vector<T> gp(rows * w);
                           for (std::size_t r = 0; r < rows; ++r) {
                             std::copy(gv.begin() + r * total + off, gv.begin() + r * total + off + w,
                                       gp.begin() + r * w);
                           }
                           grads.push_back(wrap<T>(shapes[i], std::move(gp)));
                           off += w;
                         }
                         return grads;
                       });
  });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<Tensor> rows;
  rows.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape()) throw ShapeError("stack: shapes differ");
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    rows.push_back(reshape(p, std::move(s)));
  }
  return concat_rows(rows);
}

Tensor resample_bilinear(const Tensor& t, std::size_t out_h, std::size_t out_w) {
  require_rank(t, 3, "resample_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resample_bilinear: zero target extent");
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  if (out_h == h && out_w == w) {
    return make_result(t.shape(), *t.impl()->data, {t}, "resample_identity",
                       [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g}; });
  }
  auto ty = std::make_shared<AxisTaps>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<AxisTaps>(bilinear_taps(w, out_w));
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(out_h * out_w * c);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy = static_cast<T>(ty->w[oy]);
      const T* r0 = x.data() + ty->i0[oy] * w * c;
      const T* r1 = x.data() + ty->i1[oy] * w * c;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx = static_cast<T>(tx->w[ox]);
        const T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
        const T w10 = wy * (T(1) - wx), w11 = wy * wx;
        const std::size_t x0 = tx->i0[ox] * c, x1 = tx->i1[ox] * c;
        T* o = y.data() + (oy * out_w + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          o[ch] = w00 * r0[x0 + ch] + w01 * r0[x1 + ch] + w10 * r1[x0 + ch] + w11 * r1[x1 + ch];
        }
      }
    }
    return make_result(
        {out_h, out_w, c}, std::move(y), {t}, "resample_bilinear",
        [ty, tx, h, w, c, out_h, out_w](const Tensor&, const Tensor& g) {
          auto gv = g.values<T>();
          std::vector<T> gx(h * w * c, T(0));
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy = static_cast<T>(ty->w[oy]);
            T* r0 = gx.data() + ty->i0[oy] * w * c;
            T* r1 = gx.data() + ty->i1[oy] * w * c;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx = static_cast<T>(tx->w[ox]);
              const T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
              const T w10 = wy * (T(1) - wx), w11 = wy * wx;
              const std::size_t x0 = tx->i0[ox] * c, x1 = tx->i1[ox] * c;
              const T* go = gv.data() + (oy * out_w + ox) * c;
              for (std::size_t ch = 0; ch < c; ++ch) {
                r0[x0 + ch] += w00 * go[ch];
                r0[x1 + ch] += w01 * go[ch];
                r1[x0 + ch] += w10 * go[ch];
                r1[x1 + ch] += w11 * go[ch];
              }
            }
          }
          return std::vector<Tensor>{wrap<T>({h, w, c}, std::move(gx))};
        });
  });
}

Tensor max_pool2x2(const Tensor& t) {
  require_rank(t, 3, "max_pool2x2");
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(oh * ow * c);
    auto arg = std::make_shared<std::vector<std::size_t>>(oh * ow * c);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = (2 * oy * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy >= h || ix >= w) continue;
              const std::size_t idx = (iy * w + ix) * c + ch;
              if (x[idx] > x[best]) best = idx;
            }
          }
          const std::size_t o = (oy * ow + ox) * c + ch;
          y[o] = x[best];
          (*arg)[o] = best;
        }
      }
    }
    return make_result({oh, ow, c}, std::move(y), {t}, "max_pool2x2",
                       [arg, shape = t.shape()](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<T> gx(shape_numel(shape), T(0));
                         for (std::size_t o = 0; o < gv.size(); ++o) gx[(*arg)[o]] += gv[o];
                         return std::vector<Tensor>{wrap<T>(shape, std::move(gx))};
                       });
  });
}

Tensor im2col3x3(const Tensor& t) {
  require_rank(t, 3, "im2col3x3");
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  const std::size_t cols = 9 * c;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(h * w * cols, T(0));
    for (std::size_t oy = 0; oy < h; ++oy) {
      for (std::size_t ox = 0; ox < w; ++ox) {
        T* row = y.data() + (oy * w + ox) * cols;
        for (std::size_t dy = 0; dy < 3; ++dy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + dy) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dx = 0; dx < 3; ++dx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + dx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const T* src = x.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
            std::copy(src, src + c, row + (dy * 3 + dx) * c);
          }
        }
      }
    }
    return make_result(
        {h * w, cols}, std::move(y), {t}, "im2col3x3", [h, w, c, cols](const Tensor&, const Tensor& g) {
          auto gv = g.values<T>();
          std::vector<T> gx(h * w * c, T(0));
          for (std::size_t oy = 0; oy < h; ++oy) {
            for (std::size_t ox = 0; ox < w; ++ox) {
              const T* row = gv.data() + (oy * w + ox) * cols;
              for (std::size_t dy = 0; dy < 3; ++dy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + dy) - 1;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t dx = 0; dx < 3; ++dx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + dx) - 1;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  T* dst = gx.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
                  const T* src = row + (dy * 3 + dx) * c;
                  for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
              }
            }
          }
          return std::vector<Tensor>{wrap<T>({h, w, c}, std::move(gx))};
        });
  });
}

Tensor space_to_depth2(const Tensor& t) {
  require_rank(t, 3, "space_to_depth2");
  const std::size_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(oh * ow * 4 * c, T(0));
    for (std::size_t iy = 0; iy < h; ++iy) {
      for (std::size_t ix = 0; ix < w; ++ix) {
        const std::size_t o = ((iy / 2) * ow + ix / 2) * 4 * c + ((iy % 2) * 2 + ix % 2) * c;
        std::copy(x.data() + (iy * w + ix) * c, x.data() + (iy * w + ix + 1) * c, y.data() + o);
      }
    }
    return make_result({oh, ow, 4 * c}, std::move(y), {t}, "space_to_depth2",
                       [h, w, c, ow](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<T> gx(h * w * c);
                         for (std::size_t iy = 0; iy < h; ++iy) {
                           for (std::size_t ix = 0; ix < w; ++ix) {
                             const std::size_t o =
                                 ((iy / 2) * ow + ix / 2) * 4 * c + ((iy % 2) * 2 + ix % 2) * c;
                             std::copy(gv.data() + o, gv.data() + o + c, gx.data() + (iy * w + ix) * c);
                           }
                         }
                         return std::vector<Tensor>{wrap<T>({h, w, c}, std::move(gx))};
                       });
  });
}

Tensor depth_to_space2(const Tensor& t) {
  require_rank(t, 3, "depth_to_space2");
  const std::size_t h = t.dim(0), w = t.dim(1);
  if (t.dim(2) % 4 != 0) throw ShapeError("depth_to_space2: channels not divisible by 4");
  const std::size_t c = t.dim(2) / 4;
  const std::size_t oh = 2 * h, ow = 2 * w;
  return dispatch(t.dtype(), [&]<class T>() {
    auto x = t.values<T>();
    std::vector<T> y(oh * ow * c);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t i = ((oy / 2) * w + ox / 2) * 4 * c + ((oy % 2) * 2 + ox % 2) * c;
        std::copy(x.data() + i, x.data() + i + c, y.data() + (oy * ow + ox) * c);
      }
    }
    return make_result({oh, ow, c}, std::move(y), {t}, "depth_to_space2",
                       [h, w, c, oh, ow](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<T> gx(h * w * 4 * c);
                         for (std::size_t oy = 0; oy < oh; ++oy) {
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             const std::size_t i =
                                 ((oy / 2) * w + ox / 2) * 4 * c + ((oy % 2) * 2 + ox % 2) * c;
                             std::copy(gv.data() + (oy * ow + ox) * c, gv.data() + (oy * ow + ox + 1) * c,
                                       gx.data() + i);
                           }
                         }
                         return std::vector<Tensor>{wrap<T>({h, w, 4 * c}, std::move(gx))};
                       });
  });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  require_rank(image, 3, "patchify");
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t hp = h / patch, wp = w / patch, cols = patch * patch * ch;
  auto index = [=](std::size_t py, std::size_t px, std::size_t y, std::size_t x) {
    return ((py * patch + y) * w + px * patch + x) * ch;
  };
  return dispatch(image.dtype(), [&]<class T>() {
    auto src = image.values<T>();
    std::vector<T> out(hp * wp * cols);
    for (std::size_t py = 0; py < hp; ++py) {
      for (std::size_t px = 0; px < wp; ++px) {
        T* row = out.data() + (py * wp + px) * cols;
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) {
            const std::size_t s = index(py, px, y, x);
            std::copy(src.data() + s, src.data() + s + ch, row + (y * patch + x) * ch);
          }
        }
      }
    }
    return make_result({hp * wp, cols}, std::move(out), {image}, "patchify",
                       [=, shape = image.shape()](const Tensor&, const Tensor& g) {
                         auto gv = g.values<T>();
                         std::vector<T> gx(shape_numel(shape));
                         for (std::size_t py = 0; py < hp; ++py) {
                           for (std::size_t px = 0; px < wp; ++px) {
                             const T* row = gv.data() + (py * wp + px) * cols;
                             for (std::size_t y = 0; y < patch; ++y) {
                               for (std::size_t x = 0; x < patch; ++x) {
                                 const T* s = row + (y * patch + x) * ch;
                                 std::copy(s, s + ch, gx.data() + index(py, px, y, x));
                               }
                             }
                           }
                         }
                         return std::vector<Tensor>{wrap<T>(shape, std::move(gx))};
                       });
  });
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t heads) {
  require_rank(qkv, 2, "multi_head_attention");
  const std::size_t tokens = qkv.dim(0);
  if (qkv.dim(1) % 3 != 0) throw ShapeError("multi_head_attention: width not divisible by 3");
  const std::size_t c = qkv.dim(1) / 3;
  if (heads == 0 || c % heads != 0) {
    throw ShapeError("multi_head_attention: " + std::to_string(c) + " channels not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t d = c / heads;
  const std::size_t ld = 3 * c;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d));
  return dispatch(qkv.dtype(), [&]<class T>() {
    const T sc = static_cast<T>(scale_factor);
    const T* base = qkv.values<T>().data();
    auto probs = std::make_shared<std::vector<T>>(heads * tokens * tokens);
    std::vector<T> out(tokens * c);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      T* p = probs->data() + hd * tokens * tokens;
      detail::gemm<T>(false, true, tokens, tokens, d, base + hd * d, ld, base + c + hd * d, ld, p,
                      tokens, false);
      for (std::size_t i = 0; i < tokens; ++i) {
        T* row = p + i * tokens;
        T mx = row[0] * sc;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] *= sc;
          mx = std::max(mx, row[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < tokens; ++j) row[j] *= inv;
      }
      detail::gemm<T>(false, false, tokens, d, tokens, p, tokens, base + 2 * c + hd * d, ld,
                      out.data() + hd * d, c, false);
    }
    return make_result(
        {tokens, c}, std::move(out), {qkv}, "multi_head_attention",
        [qkv = qkv.detach(), probs, heads, tokens, c, d, ld, sc](const Tensor&, const Tensor& g) {
          const T* base = qkv.values<T>().data();
          const T* gp = g.values<T>().data();
          std::vector<T> gx(tokens * ld);
          std::vector<T> dp(tokens * tokens);
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const T* p = probs->data() + hd * tokens * tokens;
            const T* q = base + hd * d;
            const T* k = base + c + hd * d;
            const T* v = base + 2 * c + hd * d;
            const T* go = gp + hd * d;
            // dV = P^T dO
            detail::gemm<T>(true, false, tokens, d, tokens, p, tokens, go, c,
                            gx.data() + 2 * c + hd * d, ld, false);
            // dP = dO V^T
            detail::gemm<T>(false, true, tokens, tokens, d, go, c, v, ld, dp.data(), tokens, false);
            for (std::size_t i = 0; i < tokens; ++i) {
              T* row = dp.data() + i * tokens;
              const T* prow = p + i * tokens;
              T dot = 0;
              for (std::size_t j = 0; j < tokens; ++j) dot += row[j] * prow[j];
              for (std::size_t j = 0; j < tokens; ++j) row[j] = prow[j] * (row[j] - dot) * sc;
            }
            // dQ = dS K, dK = dS^T Q
            detail::gemm<T>(false, false, tokens, d, tokens, dp.data(), tokens, k, ld,
                            gx.data() + hd * d, ld, false);
            detail::gemm<T>(true, false, tokens, d, tokens, dp.data(), tokens, q, ld,
                            gx.data() + c + hd * d, ld, false);
          }
          return std::vector<Tensor>{wrap<T>({tokens, ld}, std::move(gx))};
        });
  });
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach().clone();
  std::vector<double> grad(x.numel());
  dispatch(x.dtype(), [&]<class T>() {
    auto v = probe.mutable_values<T>();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T orig = v[i];
      v[i] = orig + static_cast<T>(h);
      const double up = f(probe);
      v[i] = orig - static_cast<T>(h);
      const double down = f(probe);
      v[i] = orig;
      grad[i] = (up - down) / (2.0 * h);
    }
  });
  return Tensor::from_values(x.shape(), grad, x.dtype());
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

}  // namespace vitc
