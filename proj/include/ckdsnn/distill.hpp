#pragma once

#include "ckdsnn/ops.hpp"
#include "ckdsnn/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ckdsnn {

enum class NoiseKind { adaptive, fixed, none };

struct NoiseConfig {
  NoiseKind kind = NoiseKind::adaptive;
  double fixed_std = 0.0;         // NoiseKind::fixed: eps ~ N(0, fixed_std^2)
  double lambda = 0.1;            // z_soft = z + lambda * eps
  bool population_std = true;     // divide by K (true) or K - 1

  void validate() const {
    if (fixed_std < 0) throw std::invalid_argument("NoiseConfig: fixed std must be >= 0");
    if (lambda < 0) throw std::invalid_argument("NoiseConfig: lambda must be >= 0");
  }
};

/// "adaptive", "none", or "fixed:<std>".
NoiseConfig parse_noise_mode(std::string_view text, double lambda = 0.1);
std::string to_string(const NoiseConfig& config);

struct LossWeights {
  double beta = 1.0;      // SAMD weight
  double gamma = 1.0;     // NLD weight
  double tau = 2.0;       // logits temperature
  double temp_map = 2.0;  // saliency temperature

  void validate() const {
    if (!(tau > 0) || !(temp_map > 0)) throw std::invalid_argument("LossWeights: temperatures must be positive");
    if (beta < 0 || gamma < 0) throw std::invalid_argument("LossWeights: beta and gamma must be >= 0");
  }
};

/// eps[n, :] ~ N(mean(z[n, :]), std(z[n, :])^2), one draw per class.
template <typename Scalar>
Tensor<Scalar> sample_adaptive_noise(const Tensor<Scalar>& logits, Rng& rng, bool population_std = true) {
  detail::require_rank("sample_adaptive_noise", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (n < 1 || k < 2) throw ShapeError("sample_adaptive_noise: need N >= 1 and K >= 2");
  Vector<Scalar> out(n * k);
  for (Index i = 0; i < n; ++i) {
    double m = 0;
    for (Index j = 0; j < k; ++j) m += static_cast<double>(logits.data()[i * k + j]);
    m /= static_cast<double>(k);
    double ss = 0;
    for (Index j = 0; j < k; ++j) {
      const double d = static_cast<double>(logits.data()[i * k + j]) - m;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(population_std ? k : k - 1));
    if (sd == 0.0) {
      // exact: keep the row's own value rather than a rounded mean
      for (Index j = 0; j < k; ++j) out[i * k + j] = logits.data()[i * k];
      continue;
    }
    for (Index j = 0; j < k; ++j) out[i * k + j] = static_cast<Scalar>(rng.normal(m, sd));
  }
  return Tensor<Scalar>(logits.shape(), std::move(out));
}

/// Noise per the configured mode; `none` returns zeros without touching the rng.
template <typename Scalar>
Tensor<Scalar> sample_noise(const Tensor<Scalar>& logits, const NoiseConfig& config, Rng& rng) {
  config.validate();
  switch (config.kind) {
    case NoiseKind::adaptive:
      return sample_adaptive_noise(logits, rng, config.population_std);
    case NoiseKind::fixed: {
      Vector<Scalar> out(logits.numel());
      for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(rng.normal(0.0, config.fixed_std));
      return Tensor<Scalar>(logits.shape(), std::move(out));
    }
    case NoiseKind::none:
      break;
  }
  return Tensor<Scalar>::zeros(logits.shape());
}

/// z + lambda * noise. The noise is a constant; lambda == 0 returns z itself.
template <typename Scalar>
Tensor<Scalar> smooth_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& noise, double lambda) {
  detail::require_same_shape("smooth_logits", logits, noise);
  if (lambda < 0) throw std::invalid_argument("smooth_logits: lambda must be >= 0");
  if (lambda == 0.0) return logits;
  return add(logits, scale(noise.detach(), static_cast<Scalar>(lambda)));
}

/// tau^2 * KL(softmax(z_te / tau) || softmax(z_soft / tau)), batch mean.
/// Only the student side carries gradient.
template <typename Scalar>
Tensor<Scalar> nld_loss(const Tensor<Scalar>& teacher_logits, const Tensor<Scalar>& student_soft_logits, double tau) {
  detail::require_same_shape("nld_loss", teacher_logits, student_soft_logits);
  detail::require_rank("nld_loss", student_soft_logits, 2);
  if (!(tau > 0)) throw std::invalid_argument("nld_loss: tau must be positive");
  const auto t = static_cast<Scalar>(tau);
  const Tensor<Scalar> p = softmax(teacher_logits.detach(), 1, t);
  const Tensor<Scalar> q = softmax(student_soft_logits, 1, t);
  return scale(kl_div(p, q, Reduction::batch_mean), t * t);
}

template <typename Scalar>
struct LossBreakdown {
  Tensor<Scalar> total;
  double ce = 0, samd = 0, nld = 0;
};

/// L = CE + beta * SAMD + gamma * NLD. Terms with zero weight still appear in
/// the breakdown but contribute exactly nothing to the total or its gradient.
template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Tensor<Scalar>& ce, const Tensor<Scalar>* samd, const Tensor<Scalar>* nld,
                                 const LossWeights& weights) {
  auto check = [](const char* name, const Tensor<Scalar>& t) {
    if (t.numel() != 1) throw ShapeError(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(static_cast<double>(t.item()))) {
      throw NonFiniteError(std::string("total_loss: non-finite ") + name + " term");
    }
  };
  check("ce", ce);
  LossBreakdown<Scalar> out{ce, static_cast<double>(ce.item()), 0, 0};
  if (samd) {
    check("samd", *samd);
    out.samd = static_cast<double>(samd->item());
    if (weights.beta != 0.0) out.total = add(out.total, scale(*samd, static_cast<Scalar>(weights.beta)));
  }
  if (nld) {
    check("nld", *nld);
    out.nld = static_cast<double>(nld->item());
    if (weights.gamma != 0.0) out.total = add(out.total, scale(*nld, static_cast<Scalar>(weights.gamma)));
  }
  return out;
}

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Tensor<Scalar>& ce, const Tensor<Scalar>& samd, const Tensor<Scalar>& nld,
                                 const LossWeights& weights) {
  return total_loss(ce, &samd, &nld, weights);
}

}  // namespace ckdsnn
