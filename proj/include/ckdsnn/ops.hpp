#pragma once

#include "ckdsnn/tensor.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <string>

namespace ckdsnn {

namespace detail {

struct AxisSplit {
  Index outer = 1;
  Index length = 1;
  Index inner = 1;
};

inline AxisSplit split_axis(const char* op, const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_string(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (int i = axis + 1; i < rank; ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, int axis) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  Shape out = shape;
  out.erase(out.begin() + axis);
  return out;
}

template <typename Scalar, typename Forward, typename Derivative>
Tensor<Scalar> unary(const char* op, const Tensor<Scalar>& x, Forward f, Derivative df) {
  Vector<Scalar> y = x.data().unaryExpr(f);
  return record<Scalar>(op, x.shape(), std::move(y), {&x}, [df](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Vector<Scalar> g(self.value.size());
    for (Index i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(in.value[i], self.value[i]);
    in.accumulate(g);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  return detail::record<Scalar>("add", a.shape(), a.data() + b.data(), {&a, &b}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("sub", a, b);
  return detail::record<Scalar>("sub", a.shape(), a.data() - b.data(), {&a, &b}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("mul", a, b);
  return detail::record<Scalar>("mul", a.shape(), a.data().cwiseProduct(b.data()), {&a, &b},
                                [](Node<Scalar>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  x.accumulate(self.grad.cwiseProduct(y.value));
                                  y.accumulate(self.grad.cwiseProduct(x.value));
                                });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("div", a, b);
  return detail::record<Scalar>("div", a.shape(), a.data().cwiseQuotient(b.data()), {&a, &b},
                                [](Node<Scalar>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  x.accumulate(self.grad.cwiseQuotient(y.value));
                                  y.accumulate(-self.grad.cwiseProduct(self.value).cwiseQuotient(y.value));
                                });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return detail::record<Scalar>("scale", a.shape(), a.data() * factor, {&a}, [factor](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad * factor);
  });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar offset) {
  return detail::record<Scalar>("add_scalar", a.shape(), a.data().array() + offset, {&a},
                                [](Node<Scalar>& self) { self.inputs[0]->accumulate(self.grad); });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) { return scale(a, s); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return scale(a, s); }
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar s) { return add_scalar(a, s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return scale(a, Scalar(-1)); }

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return detail::unary(
      "relu", x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary(
      "exp", x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return detail::unary(
      "log", x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return detail::unary(
      "square", x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

template <typename Scalar>
Tensor<Scalar> clamp_min(const Tensor<Scalar>& x, Scalar floor) {
  return detail::unary(
      "clamp_min", x, [floor](Scalar v) { return v > floor ? v : floor; },
      [floor](Scalar v, Scalar) { return v > floor ? Scalar(1) : Scalar(0); });
}

// ---------------------------------------------------------------------------
// Shape and reductions

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  return detail::record<Scalar>("reshape", std::move(shape), x.data(), {&x},
                                [](Node<Scalar>& self) { self.inputs[0]->accumulate(self.grad); });
}

/// [N, ...] -> [N, prod(...)]
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x) {
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  return reshape(x, Shape{x.dim(0), x.numel() / std::max<Index>(x.dim(0), 1)});
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  return detail::record<Scalar>("sum", Shape{}, Vector<Scalar>::Constant(1, x.data().sum()), {&x},
                                [](Node<Scalar>& self) {
                                  auto& in = *self.inputs[0];
                                  in.accumulate(Vector<Scalar>::Constant(in.value.size(), self.grad[0]));
                                });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis) {
  const auto s = detail::split_axis("sum", x.shape(), axis);
  Vector<Scalar> out = Vector<Scalar>::Zero(s.outer * s.inner);
  const Scalar* src = x.data().data();
  for (Index o = 0; o < s.outer; ++o)
    for (Index l = 0; l < s.length; ++l)
      for (Index i = 0; i < s.inner; ++i) out[o * s.inner + i] += src[(o * s.length + l) * s.inner + i];
  return detail::record<Scalar>("sum_axis", detail::drop_axis(x.shape(), axis), std::move(out), {&x},
                                [s](Node<Scalar>& self) {
                                  auto& in = *self.inputs[0];
                                  if (!in.requires_grad) return;
                                  Scalar* g = in.grad_buffer();
                                  for (Index o = 0; o < s.outer; ++o)
                                    for (Index l = 0; l < s.length; ++l)
                                      for (Index i = 0; i < s.inner; ++i)
                                        g[(o * s.length + l) * s.inner + i] += self.grad[o * s.inner + i];
                                });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis) {
  const auto s = detail::split_axis("mean", x.shape(), axis);
  if (s.length == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, axis), Scalar(1) / static_cast<Scalar>(s.length));
}

/// Tiles [N, ...] into [times * N, ...] with the copies stacked along the leading axis.
template <typename Scalar>
Tensor<Scalar> repeat_leading(const Tensor<Scalar>& x, Index times) {
  if (times < 1) throw ShapeError("repeat_leading: times must be >= 1");
  if (x.rank() < 1) throw ShapeError("repeat_leading: scalar input");
  Shape shape = x.shape();
  shape[0] *= times;
  const Index n = x.numel();
  Vector<Scalar> out(n * times);
  for (Index t = 0; t < times; ++t) out.segment(t * n, n) = x.data();
  return detail::record<Scalar>("repeat_leading", std::move(shape), std::move(out), {&x},
                                [times, n](Node<Scalar>& self) {
                                  if (!self.inputs[0]->requires_grad) return;
                                  Vector<Scalar> g = Vector<Scalar>::Zero(n);
                                  for (Index t = 0; t < times; ++t) g += self.grad.segment(t * n, n);
                                  self.inputs[0]->accumulate(g);
                                });
}

/// out[n] = x[n, labels[n]]
template <typename Scalar>
Tensor<Scalar> pick(const Tensor<Scalar>& x, std::span<const int> labels) {
  detail::require_rank("pick", x, 2);
  const Index n = x.dim(0), k = x.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("pick: label count does not match batch");
  Vector<Scalar> out(n);
  for (Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("pick: label out of range");
    out[i] = x.data()[i * k + labels[i]];
  }
  std::vector<int> saved(labels.begin(), labels.end());
  return detail::record<Scalar>("pick", Shape{n}, std::move(out), {&x}, [saved, k](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Scalar* g = in.grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) g[static_cast<Index>(i) * k + saved[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  using Map = Eigen::Map<const RowMajorMatrix<Scalar>>;
  Vector<Scalar> out(m * n);
  Eigen::Map<RowMajorMatrix<Scalar>>(out.data(), m, n).noalias() =
      Map(a.data().data(), m, k) * Map(b.data().data(), k, n);
  return detail::record<Scalar>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](Node<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    Map g(self.grad.data(), m, n);
    if (x.requires_grad) {
      Eigen::Map<RowMajorMatrix<Scalar>>(x.grad_buffer(), m, k).noalias() += g * Map(y.value.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      Eigen::Map<RowMajorMatrix<Scalar>>(y.grad_buffer(), k, n).noalias() += Map(x.value.data(), m, k).transpose() * g;
    }
  });
}

/// x[N,I] * weight[O,I]^T + bias[O]
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", weight, 2);
  detail::require_rank("linear", bias, 1);
  const Index n = x.dim(0), in = x.dim(1), out_features = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != out_features) {
    throw ShapeError("linear: incompatible shapes x" + shape_string(x.shape()) + " w" +
                     shape_string(weight.shape()) + " b" + shape_string(bias.shape()));
  }
  using Map = Eigen::Map<const RowMajorMatrix<Scalar>>;
  Vector<Scalar> out(n * out_features);
  Eigen::Map<RowMajorMatrix<Scalar>> y(out.data(), n, out_features);
  y.noalias() = Map(x.data().data(), n, in) * Map(weight.data().data(), out_features, in).transpose();
  y.rowwise() += bias.data().transpose();
  return detail::record<Scalar>(
      "linear", Shape{n, out_features}, std::move(out), {&x, &weight, &bias},
      [n, in, out_features](Node<Scalar>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        Map g(self.grad.data(), n, out_features);
        if (xn.requires_grad) {
          Eigen::Map<RowMajorMatrix<Scalar>>(xn.grad_buffer(), n, in).noalias() +=
              g * Map(wn.value.data(), out_features, in);
        }
        if (wn.requires_grad) {
          Eigen::Map<RowMajorMatrix<Scalar>>(wn.grad_buffer(), out_features, in).noalias() +=
              g.transpose() * Map(xn.value.data(), n, in);
        }
        if (bn.requires_grad) bn.accumulate(g.colwise().sum().transpose());
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv2dGeometry {
  Index batch, channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;

  Index patch() const { return channels * kernel_h * kernel_w; }
  Index out_plane() const { return out_h * out_w; }
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, Index stride, Index padding) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d: expected input [N,C,H,W] and kernel [O,C,kh,kw], got " + shape_string(input) +
                     " and " + shape_string(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(input[1]) + " channels, kernel expects " +
                     std::to_string(kernel[1]));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  Conv2dGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w) {
    throw ShapeError("conv2d: kernel " + shape_string(kernel) + " larger than padded input " + shape_string(input));
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  return g;
}

namespace detail {

/// cols[(c*kh + i)*kw + j, n*out_plane + oy*out_w + ox]
template <typename Scalar>
void im2col(const Conv2dGeometry& g, const Scalar* src, RowMajorMatrix<Scalar>& cols) {
  const Index width = g.batch * g.out_plane();
  cols.setZero(g.patch(), width);
  for (Index c = 0; c < g.channels; ++c)
    for (Index i = 0; i < g.kernel_h; ++i)
      for (Index j = 0; j < g.kernel_w; ++j) {
        Scalar* row = cols.data() + ((c * g.kernel_h + i) * g.kernel_w + j) * width;
        for (Index n = 0; n < g.batch; ++n) {
          const Scalar* plane = src + (n * g.channels + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index y = oy * g.stride - g.padding + i;
            if (y < 0 || y >= g.height) continue;
            Scalar* dst = row + n * g.out_plane() + oy * g.out_w;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index x = ox * g.stride - g.padding + j;
              if (x >= 0 && x < g.width) dst[ox] = plane[y * g.width + x];
            }
          }
        }
      }
}

template <typename Scalar>
void col2im(const Conv2dGeometry& g, const RowMajorMatrix<Scalar>& cols, Scalar* dst) {
  const Index width = g.batch * g.out_plane();
  for (Index c = 0; c < g.channels; ++c)
    for (Index i = 0; i < g.kernel_h; ++i)
      for (Index j = 0; j < g.kernel_w; ++j) {
        const Scalar* row = cols.data() + ((c * g.kernel_h + i) * g.kernel_w + j) * width;
        for (Index n = 0; n < g.batch; ++n) {
          Scalar* plane = dst + (n * g.channels + c) * g.height * g.width;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index y = oy * g.stride - g.padding + i;
            if (y < 0 || y >= g.height) continue;
            const Scalar* src = row + n * g.out_plane() + oy * g.out_w;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index x = ox * g.stride - g.padding + j;
              if (x >= 0 && x < g.width) plane[y * g.width + x] += src[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of input[N,C,H,W] with kernel[O,C,kh,kw], no bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, Index stride = 1,
                      Index padding = 0) {
  const Conv2dGeometry g = conv2d_geometry(input.shape(), kernel.shape(), stride, padding);
  auto cols = std::make_shared<RowMajorMatrix<Scalar>>();
  detail::im2col(g, input.data().data(), *cols);

  using Map = Eigen::Map<const RowMajorMatrix<Scalar>>;
  const Index width = g.batch * g.out_plane();
  RowMajorMatrix<Scalar> result = Map(kernel.data().data(), g.out_channels, g.patch()) * (*cols);
  Vector<Scalar> out(g.batch * g.out_channels * g.out_plane());
  for (Index n = 0; n < g.batch; ++n)
    for (Index o = 0; o < g.out_channels; ++o)
      std::copy_n(result.data() + o * width + n * g.out_plane(), g.out_plane(),
                  out.data() + (n * g.out_channels + o) * g.out_plane());

  return detail::record<Scalar>(
      "conv2d", Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {&input, &kernel},
      [g, cols, width](Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        auto& k = *self.inputs[1];
        RowMajorMatrix<Scalar> grad_mat(g.out_channels, width);
        for (Index n = 0; n < g.batch; ++n)
          for (Index o = 0; o < g.out_channels; ++o)
            std::copy_n(self.grad.data() + (n * g.out_channels + o) * g.out_plane(), g.out_plane(),
                        grad_mat.data() + o * width + n * g.out_plane());
        if (k.requires_grad) {
          Eigen::Map<RowMajorMatrix<Scalar>>(k.grad_buffer(), g.out_channels, g.patch()).noalias() +=
              grad_mat * cols->transpose();
        }
        if (in.requires_grad) {
          RowMajorMatrix<Scalar> grad_cols =
              Map(k.value.data(), g.out_channels, g.patch()).transpose() * grad_mat;
          detail::col2im(g, grad_cols, in.grad_buffer());
        }
      });
}

/// Non-overlapping k x k average pooling (stride k, trailing rows/cols dropped).
template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, Index k) {
  detail::require_rank("avg_pool2d", x, 4);
  if (k < 1 || x.dim(2) < k || x.dim(3) < k) throw ShapeError("avg_pool2d: window larger than input");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h / k, ow = w / k;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(k * k);
  Vector<Scalar> out = Vector<Scalar>::Zero(planes * oh * ow);
  const Scalar* src = x.data().data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < oh * k; ++y)
      for (Index xx = 0; xx < ow * k; ++xx) out[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx] * inv;
  return detail::record<Scalar>("avg_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                                [planes, h, w, oh, ow, k, inv](Node<Scalar>& self) {
                                  auto& in = *self.inputs[0];
                                  if (!in.requires_grad) return;
                                  Scalar* g = in.grad_buffer();
                                  for (Index p = 0; p < planes; ++p)
                                    for (Index y = 0; y < oh * k; ++y)
                                      for (Index xx = 0; xx < ow * k; ++xx)
                                        g[(p * h + y) * w + xx] += self.grad[(p * oh + y / k) * ow + xx / k] * inv;
                                });
}

/// [N,C,H,W] -> [N,C]
template <typename Scalar>
Tensor<Scalar> global_avg_pool2d(const Tensor<Scalar>& x) {
  detail::require_rank("global_avg_pool2d", x, 4);
  return mean(reshape(x, Shape{x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <typename Scalar>
struct BatchNormOptions {
  bool training = true;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

/// Per-channel normalisation of x[N,C,H,W]. In training mode batch statistics
/// are used and the running buffers updated; in eval mode the buffers are used.
template <typename Scalar>
Tensor<Scalar> batch_norm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                            Vector<Scalar>& running_mean, Vector<Scalar>& running_var,
                            const BatchNormOptions<Scalar>& opt = {}) {
  detail::require_rank("batch_norm2d", x, 4);
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (weight.numel() != c || bias.numel() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch_norm2d: parameter size does not match " + std::to_string(c) + " channels");
  }
  const Index count = n * plane;
  const Scalar* src = x.data().data();
  Vector<Scalar> mu(c), inv_std(c);
  if (opt.training) {
    if (count < 2) throw ShapeError("batch_norm2d: need more than one value per channel in training mode");
    for (Index ch = 0; ch < c; ++ch) {
      Scalar s = 0;
      for (Index b = 0; b < n; ++b) {
        const Scalar* p = src + (b * c + ch) * plane;
        for (Index i = 0; i < plane; ++i) s += p[i];
      }
      const Scalar m = s / static_cast<Scalar>(count);
      Scalar v = 0;
      for (Index b = 0; b < n; ++b) {
        const Scalar* p = src + (b * c + ch) * plane;
        for (Index i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<Scalar>(count);
      mu[ch] = m;
      inv_std[ch] = Scalar(1) / std::sqrt(v + opt.eps);
      const Scalar unbiased = v * static_cast<Scalar>(count) / static_cast<Scalar>(count - 1);
      running_mean[ch] = (Scalar(1) - opt.momentum) * running_mean[ch] + opt.momentum * m;
      running_var[ch] = (Scalar(1) - opt.momentum) * running_var[ch] + opt.momentum * unbiased;
    }
  } else {
    mu = running_mean;
    inv_std = (running_var.array() + opt.eps).rsqrt();
  }

  auto xhat = std::make_shared<Vector<Scalar>>(x.numel());
  Vector<Scalar> out(x.numel());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) {
        const Scalar h = (src[base + i] - mu[ch]) * inv_std[ch];
        (*xhat)[base + i] = h;
        out[base + i] = weight.data()[ch] * h + bias.data()[ch];
      }
    }

  const bool training = opt.training;
  return detail::record<Scalar>(
      "batch_norm2d", x.shape(), std::move(out), {&x, &weight, &bias},
      [n, c, plane, count, inv_std, xhat, training](Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        auto& w = *self.inputs[1];
        auto& bb = *self.inputs[2];
        Vector<Scalar> sum_g = Vector<Scalar>::Zero(c), sum_gx = Vector<Scalar>::Zero(c);
        for (Index b = 0; b < n; ++b)
          for (Index ch = 0; ch < c; ++ch) {
            const Index base = (b * c + ch) * plane;
            for (Index i = 0; i < plane; ++i) {
              sum_g[ch] += self.grad[base + i];
              sum_gx[ch] += self.grad[base + i] * (*xhat)[base + i];
            }
          }
        if (w.requires_grad) w.accumulate(sum_gx);
        if (bb.requires_grad) bb.accumulate(sum_g);
        if (!in.requires_grad) return;
        Scalar* g = in.grad_buffer();
        const Scalar inv_count = Scalar(1) / static_cast<Scalar>(count);
        for (Index b = 0; b < n; ++b)
          for (Index ch = 0; ch < c; ++ch) {
            const Index base = (b * c + ch) * plane;
            const Scalar scale_c = w.value[ch] * inv_std[ch];
            for (Index i = 0; i < plane; ++i) {
              if (training) {
                g[base + i] += scale_c * (self.grad[base + i] - inv_count * sum_g[ch] -
                                          (*xhat)[base + i] * inv_count * sum_gx[ch]);
              } else {
                g[base + i] += scale_c * self.grad[base + i];
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Probability ops

/// exp(x / temperature) normalised along `axis`, max-subtracted per slice.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis, Scalar temperature = Scalar(1)) {
  if (!(temperature > Scalar(0))) throw std::invalid_argument("softmax: temperature must be positive");
  const auto s = detail::split_axis("softmax", x.shape(), axis);
  Vector<Scalar> out(x.numel());
  const Scalar* src = x.data().data();
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index l = 0; l < s.length; ++l) mx = std::max(mx, src[base + l * s.inner]);
      Scalar z = 0;
      for (Index l = 0; l < s.length; ++l) {
        const Scalar e = std::exp((src[base + l * s.inner] - mx) / temperature);
        out[base + l * s.inner] = e;
        z += e;
      }
      for (Index l = 0; l < s.length; ++l) out[base + l * s.inner] /= z;
    }
  return detail::record<Scalar>("softmax", x.shape(), std::move(out), {&x}, [s, temperature](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Scalar* g = in.grad_buffer();
    for (Index o = 0; o < s.outer; ++o)
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.length * s.inner + i;
        Scalar dot = 0;
        for (Index l = 0; l < s.length; ++l) dot += self.grad[base + l * s.inner] * self.value[base + l * s.inner];
        for (Index l = 0; l < s.length; ++l) {
          const Index at = base + l * s.inner;
          g[at] += self.value[at] * (self.grad[at] - dot) / temperature;
        }
      }
  });
}

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x, int axis, Scalar temperature = Scalar(1)) {
  if (!(temperature > Scalar(0))) throw std::invalid_argument("log_softmax: temperature must be positive");
  const auto s = detail::split_axis("log_softmax", x.shape(), axis);
  Vector<Scalar> out(x.numel());
  const Scalar* src = x.data().data();
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index l = 0; l < s.length; ++l) mx = std::max(mx, src[base + l * s.inner]);
      Scalar z = 0;
      for (Index l = 0; l < s.length; ++l) z += std::exp((src[base + l * s.inner] - mx) / temperature);
      const Scalar lse = std::log(z);
      for (Index l = 0; l < s.length; ++l) out[base + l * s.inner] = (src[base + l * s.inner] - mx) / temperature - lse;
    }
  return detail::record<Scalar>("log_softmax", x.shape(), std::move(out), {&x}, [s, temperature](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Scalar* g = in.grad_buffer();
    for (Index o = 0; o < s.outer; ++o)
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.length * s.inner + i;
        Scalar total = 0;
        for (Index l = 0; l < s.length; ++l) total += self.grad[base + l * s.inner];
        for (Index l = 0; l < s.length; ++l) {
          const Index at = base + l * s.inner;
          g[at] += (self.grad[at] - std::exp(self.value[at]) * total) / temperature;
        }
      }
  });
}

enum class Reduction { sum, batch_mean };

inline constexpr double kKlClamp = 1e-12;

/// KL(p || q) = sum p * log(p / q) with 0 log 0 = 0. Distributions run along
/// the last axis; `batch_mean` divides the total by the leading dimension.
template <typename Scalar>
Tensor<Scalar> kl_div(const Tensor<Scalar>& p, const Tensor<Scalar>& q, Reduction reduction = Reduction::sum) {
  detail::require_same_shape("kl_div", p, q);
  if (p.rank() < 1) throw ShapeError("kl_div: inputs must have at least one axis");
  const Index len = p.shape().back();
  const Index rows = p.numel() / std::max<Index>(len, 1);
  // float rounding in a length-L sum grows like L * eps; keep 1e-5 for short rows
  const Scalar tol = std::max<Scalar>(Scalar(1e-5), static_cast<Scalar>(len) * std::numeric_limits<Scalar>::epsilon());
  for (Index r = 0; r < rows; ++r) {
    const Scalar sp = p.data().segment(r * len, len).sum();
    const Scalar sq = q.data().segment(r * len, len).sum();
    if (std::abs(sp - Scalar(1)) > tol || std::abs(sq - Scalar(1)) > tol) {
      throw std::invalid_argument("kl_div: inputs are not probability distributions along the last axis");
    }
    if ((p.data().segment(r * len, len).array() < Scalar(0)).any() ||
        (q.data().segment(r * len, len).array() < Scalar(0)).any()) {
      throw std::invalid_argument("kl_div: negative probability");
    }
  }
  const Scalar eps = static_cast<Scalar>(kKlClamp);
  const Scalar norm = (reduction == Reduction::batch_mean && p.rank() >= 2) ? Scalar(1) / static_cast<Scalar>(p.dim(0))
                                                                              : Scalar(1);
  Scalar total = 0;
  for (Index i = 0; i < p.numel(); ++i) {
    const Scalar pi = p.data()[i];
    if (pi == Scalar(0)) continue;
    total += pi * (std::log(std::max(pi, eps)) - std::log(std::max(q.data()[i], eps)));
  }
  return detail::record<Scalar>("kl_div", Shape{}, Vector<Scalar>::Constant(1, total * norm), {&p, &q},
                                [eps, norm](Node<Scalar>& self) {
                                  auto& pn = *self.inputs[0];
                                  auto& qn = *self.inputs[1];
                                  const Scalar g = self.grad[0] * norm;
                                  if (pn.requires_grad) {
                                    Scalar* gp = pn.grad_buffer();
                                    for (Index i = 0; i < pn.value.size(); ++i) {
                                      const Scalar pi = pn.value[i];
                                      if (pi == Scalar(0)) continue;
                                      gp[i] += g * (std::log(std::max(pi, eps)) - std::log(std::max(qn.value[i], eps)) +
                                                    (pi > eps ? Scalar(1) : Scalar(0)));
                                    }
                                  }
                                  if (qn.requires_grad) {
                                    Scalar* gq = qn.grad_buffer();
                                    for (Index i = 0; i < qn.value.size(); ++i) {
                                      if (qn.value[i] > eps) gq[i] -= g * pn.value[i] / qn.value[i];
                                    }
                                  }
                                });
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count does not match batch");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  auto probs = std::make_shared<Vector<Scalar>>(logits.numel());
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("cross_entropy: label out of range");
    const Scalar* row = logits.data().data() + i * k;
    const Scalar mx = *std::max_element(row, row + k);
    Scalar z = 0;
    for (Index j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (Index j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
    total += std::log(z) + mx - row[labels[i]];
  }
  std::vector<int> saved(labels.begin(), labels.end());
  return detail::record<Scalar>("cross_entropy", Shape{}, Vector<Scalar>::Constant(1, total / static_cast<Scalar>(n)),
                                {&logits}, [probs, saved, n, k](Node<Scalar>& self) {
                                  auto& in = *self.inputs[0];
                                  if (!in.requires_grad) return;
                                  Scalar* g = in.grad_buffer();
                                  const Scalar s = self.grad[0] / static_cast<Scalar>(n);
                                  for (Index i = 0; i < n; ++i)
                                    for (Index j = 0; j < k; ++j)
                                      g[i * k + j] += s * ((*probs)[i * k + j] - (j == saved[i] ? Scalar(1) : Scalar(0)));
                                });
}

/// Index of the largest entry in each row of x[N,K].
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& x) {
  detail::require_rank("argmax_rows", x, 2);
  std::vector<int> out(static_cast<std::size_t>(x.dim(0)));
  const Index k = x.dim(1);
  for (Index i = 0; i < x.dim(0); ++i) {
    const Scalar* row = x.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace ckdsnn
