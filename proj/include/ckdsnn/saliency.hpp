#pragma once

#include "ckdsnn/ops.hpp"
#include "ckdsnn/spiking.hpp"

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace ckdsnn {

enum class MapSource { teacher_cam, student_sam, student_gradcam };

/// Non-negative saliency map, values[N, h, w].
template <typename Scalar>
struct ActivationMap {
  Tensor<Scalar> values;
  MapSource source = MapSource::teacher_cam;

  Index height() const { return values.dim(1); }
  Index width() const { return values.dim(2); }
};

enum class ScaleKind { softmax, l2_norm, z_score, none };

struct SaliencyScaleMode {
  ScaleKind kind = ScaleKind::softmax;
  double temperature = 2.0;  // softmax only
};

std::string to_string(ScaleKind kind);
ScaleKind parse_scale_kind(std::string_view text);

template <typename Scalar>
struct ScaledMap {
  Tensor<Scalar> probs;  // [N, h, w]; a probability simplex per sample only in softmax mode
  SaliencyScaleMode mode;
  bool degenerate = false;  // l2_norm met an all-zero map
};

/// Grad-CAM weighting: alpha[n,c] = spatial mean of the gradient, map =
/// ReLU(sum_c alpha[n,c] * F[n,c]). The result carries no graph.
template <typename Scalar>
ActivationMap<Scalar> cam_generate(const Tensor<Scalar>& features, const Tensor<Scalar>& target_grad,
                                   MapSource source = MapSource::teacher_cam) {
  detail::require_rank("cam_generate", features, 4);
  detail::require_same_shape("cam_generate", features, target_grad);
  const Index n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const Index plane = h * w;
  Vector<Scalar> out = Vector<Scalar>::Zero(n * plane);
  const Scalar* f = features.data().data();
  const Scalar* g = target_grad.data().data();
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * plane;
      Scalar alpha = 0;
      for (Index i = 0; i < plane; ++i) alpha += g[base + i];
      alpha /= static_cast<Scalar>(plane);
      for (Index i = 0; i < plane; ++i) out[b * plane + i] += alpha * f[base + i];
    }
  }
  out = out.cwiseMax(Scalar(0));
  return {Tensor<Scalar>(Shape{n, h, w}, std::move(out)), source};
}

/// Spike count per pixel, summed over time and channels of spikes[T, N, C, h, w].
/// Stays on the graph so the surrogate path reaches the student.
template <typename Scalar>
ActivationMap<Scalar> sam_generate(const SpikeTrain<Scalar>& train) {
  detail::require_rank("sam_generate", train.spikes, 5);
  if (!train.is_binary()) throw std::invalid_argument("sam_generate: spike train is not binary");
  return {sum(sum(train.spikes, 0), 1), MapSource::student_sam};
}

/// Grad-CAM applied to the student's final spikes, for comparison against SAM.
/// spike_grad is d(class score)/d(spikes), both [T, N, C, h, w].
template <typename Scalar>
ActivationMap<Scalar> student_gradcam(const SpikeTrain<Scalar>& train, const Tensor<Scalar>& spike_grad) {
  detail::require_rank("student_gradcam", train.spikes, 5);
  detail::require_same_shape("student_gradcam", train.spikes, spike_grad);
  NoGradGuard guard;
  return cam_generate(mean(train.spikes.detach(), 0), sum(spike_grad.detach(), 0), MapSource::student_gradcam);
}

/// Bilinear resampling of maps[N, h, w] onto a new grid (half-pixel centres).
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& maps, Index out_h, Index out_w) {
  detail::require_rank("resize_bilinear", maps, 3);
  const Index n = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  if (h == out_h && w == out_w) return maps.detach();
  Vector<Scalar> out(n * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (Index b = 0; b < n; ++b)
    for (Index y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const Index y0 = static_cast<Index>(fy), y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (Index x = 0; x < out_w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const Index x0 = static_cast<Index>(fx), x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - static_cast<double>(x0);
        auto at = [&](Index yy, Index xx) { return static_cast<double>(maps.data()[(b * h + yy) * w + xx]); };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out[(b * out_h + y) * out_w + x] = static_cast<Scalar>(v);
      }
    }
  return Tensor<Scalar>(Shape{n, out_h, out_w}, std::move(out));
}

namespace detail {

/// Per-row x / ||x||_2 on x[R, L]; all-zero rows map to the unit-norm uniform vector.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x, bool& degenerate) {
  const Index rows = x.dim(0), len = x.dim(1);
  Vector<Scalar> out(x.numel());
  auto norms = std::make_shared<Vector<Scalar>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar norm = x.data().segment(r * len, len).norm();
    (*norms)[r] = norm;
    if (norm > Scalar(0)) {
      out.segment(r * len, len) = x.data().segment(r * len, len) / norm;
    } else {
      degenerate = true;
      out.segment(r * len, len).setConstant(Scalar(1) / std::sqrt(static_cast<Scalar>(len)));
    }
  }
  return record<Scalar>("l2_normalize", x.shape(), std::move(out), {&x}, [norms, rows, len](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Scalar* g = in.grad_buffer();
    for (Index r = 0; r < rows; ++r) {
      const Scalar norm = (*norms)[r];
      if (!(norm > Scalar(0))) continue;
      const auto y = self.value.segment(r * len, len);
      const auto go = self.grad.segment(r * len, len);
      const Scalar dot = go.dot(y);
      for (Index i = 0; i < len; ++i) g[r * len + i] += (go[i] - y[i] * dot) / norm;
    }
  });
}

/// Per-row (x - mean) / sqrt(var + eps) on x[R, L], population variance.
template <typename Scalar>
Tensor<Scalar> z_score_rows(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  const Index rows = x.dim(0), len = x.dim(1);
  Vector<Scalar> out(x.numel());
  auto inv_std = std::make_shared<Vector<Scalar>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto seg = x.data().segment(r * len, len);
    const Scalar m = seg.mean();
    const Scalar var = (seg.array() - m).square().mean();
    (*inv_std)[r] = Scalar(1) / std::sqrt(var + eps);
    out.segment(r * len, len) = (seg.array() - m) * (*inv_std)[r];
  }
  return record<Scalar>("z_score", x.shape(), std::move(out), {&x}, [inv_std, rows, len](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Scalar* g = in.grad_buffer();
    for (Index r = 0; r < rows; ++r) {
      const auto y = self.value.segment(r * len, len);
      const auto go = self.grad.segment(r * len, len);
      const Scalar mean_g = go.mean();
      const Scalar mean_gy = go.dot(y) / static_cast<Scalar>(len);
      for (Index i = 0; i < len; ++i) g[r * len + i] += (*inv_std)[r] * (go[i] - mean_g - y[i] * mean_gy);
    }
  });
}

/// sum p~ log(p~ / q~) - p~ + q~ with both sides clamped at kKlClamp. Reduces
/// to KL(p || q) on probability vectors and stays non-negative for any input.
template <typename Scalar>
Tensor<Scalar> generalized_kl(const Tensor<Scalar>& p, const Tensor<Scalar>& q, Scalar norm) {
  require_same_shape("generalized_kl", p, q);
  const Scalar eps = static_cast<Scalar>(kKlClamp);
  Scalar total = 0;
  for (Index i = 0; i < p.numel(); ++i) {
    const Scalar pi = std::max(p.data()[i], eps), qi = std::max(q.data()[i], eps);
    total += pi * (std::log(pi) - std::log(qi)) - pi + qi;
  }
  return record<Scalar>("generalized_kl", Shape{}, Vector<Scalar>::Constant(1, total * norm), {&p, &q},
                        [eps, norm](Node<Scalar>& self) {
                          auto& pn = *self.inputs[0];
                          auto& qn = *self.inputs[1];
                          const Scalar g = self.grad[0] * norm;
                          if (pn.requires_grad) {
                            Scalar* gp = pn.grad_buffer();
                            for (Index i = 0; i < pn.value.size(); ++i)
                              if (pn.value[i] > eps) gp[i] += g * (std::log(pn.value[i]) - std::log(std::max(qn.value[i], eps)));
                          }
                          if (qn.requires_grad) {
                            Scalar* gq = qn.grad_buffer();
                            for (Index i = 0; i < qn.value.size(); ++i)
                              if (qn.value[i] > eps) gq[i] += g * (Scalar(1) - std::max(pn.value[i], eps) / qn.value[i]);
                          }
                        });
}

}  // namespace detail

/// Brings a raw map onto a common scale. Only the softmax mode yields a
/// probability distribution over the h*w pixels of each sample.
template <typename Scalar>
ScaledMap<Scalar> saliency_scale(const ActivationMap<Scalar>& map, const SaliencyScaleMode& mode) {
  detail::require_rank("saliency_scale", map.values, 3);
  const Index n = map.values.dim(0), h = map.values.dim(1), w = map.values.dim(2);
  const Shape flat{n, h * w};
  ScaledMap<Scalar> out{Tensor<Scalar>(), mode, false};
  switch (mode.kind) {
    case ScaleKind::softmax:
      if (!(mode.temperature > 0)) throw std::invalid_argument("saliency_scale: temperature must be positive");
      out.probs = reshape(softmax(reshape(map.values, flat), 1, static_cast<Scalar>(mode.temperature)), map.values.shape());
      break;
    case ScaleKind::l2_norm:
      out.probs = reshape(detail::l2_normalize_rows(reshape(map.values, flat), out.degenerate), map.values.shape());
      break;
    case ScaleKind::z_score:
      out.probs = reshape(detail::z_score_rows(reshape(map.values, flat)), map.values.shape());
      break;
    case ScaleKind::none:
      out.probs = map.values;
      break;
  }
  return out;
}

/// T^2 * KL(P_teacher || P_student), averaged over the batch. The teacher side
/// is detached. Non-softmax modes use the generalized KL, which equals the
/// plain KL whenever both sides are distributions.
template <typename Scalar>
Tensor<Scalar> samd_loss(const ActivationMap<Scalar>& teacher_map, const ActivationMap<Scalar>& student_map,
                         const SaliencyScaleMode& mode) {
  if (teacher_map.values.shape() != student_map.values.shape()) {
    throw ShapeError("samd_loss: teacher map " + shape_string(teacher_map.values.shape()) + " vs student map " +
                     shape_string(student_map.values.shape()));
  }
  detail::require_rank("samd_loss", student_map.values, 3);
  const Index n = student_map.values.dim(0);
  const Index pixels = student_map.values.dim(1) * student_map.values.dim(2);
  const ActivationMap<Scalar> frozen{teacher_map.values.detach(), teacher_map.source};
  const auto p_te = saliency_scale(frozen, mode);
  const auto p_st = saliency_scale(student_map, mode);
  const Scalar t2 = static_cast<Scalar>(mode.temperature * mode.temperature);
  const Tensor<Scalar> p = reshape(p_te.probs, Shape{n, pixels});
  const Tensor<Scalar> q = reshape(p_st.probs, Shape{n, pixels});
  if (mode.kind == ScaleKind::softmax) return scale(kl_div(p, q, Reduction::batch_mean), t2);
  return scale(detail::generalized_kl(p, q, Scalar(1) / static_cast<Scalar>(n)), t2);
}

/// Convenience overload taking the temperature directly (softmax scaling).
template <typename Scalar>
Tensor<Scalar> samd_loss(const ActivationMap<Scalar>& teacher_map, const ActivationMap<Scalar>& student_map,
                         double temperature) {
  return samd_loss(teacher_map, student_map, SaliencyScaleMode{ScaleKind::softmax, temperature});
}

/// 8-bit binary PGM of one h x w map, min-max normalised (constant maps export as 0).
void write_pgm(const std::filesystem::path& path, const float* values, Index height, Index width);
/// Raw values, one CSV row per map row.
void write_map_csv(const std::filesystem::path& path, const float* values, Index height, Index width);

}  // namespace ckdsnn
