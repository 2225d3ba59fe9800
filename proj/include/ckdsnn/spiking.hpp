#pragma once

#include "ckdsnn/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace ckdsnn {

/// Integrate-and-fire settings. Hard reset, no leak.
struct NeuronParams {
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_steepness = 4.0;  // k in sigma(k x)

  void validate() const {
    if (!(v_threshold > v_reset)) throw std::invalid_argument("NeuronParams: v_threshold must exceed v_reset");
    if (!(surrogate_steepness > 0)) throw std::invalid_argument("NeuronParams: surrogate_steepness must be positive");
  }
};

template <typename Scalar>
struct MembraneState {
  Tensor<Scalar> v;

  static MembraneState resting(const Shape& shape, const NeuronParams& params) {
    return {Tensor<Scalar>::full(shape, static_cast<Scalar>(params.v_reset))};
  }
};

template <typename Scalar>
struct IfStepResult {
  Tensor<Scalar> spikes;
  MembraneState<Scalar> state;
  Tensor<Scalar> pre_spike;  // H[t], kept for the surrogate backward
};

/// One step of the integrate-and-fire recurrence on plain values:
///   H = V + I;  S = [H >= V_th];  V' = H (1 - S) + V_reset S
template <typename Scalar>
IfStepResult<Scalar> if_step(const MembraneState<Scalar>& state, const Tensor<Scalar>& input_current,
                             const NeuronParams& params) {
  params.validate();
  if (state.v.shape() != input_current.shape()) {
    throw ShapeError("if_step: membrane " + shape_string(state.v.shape()) + " vs input " +
                     shape_string(input_current.shape()));
  }
  if (!input_current.data().allFinite()) throw NonFiniteError("if_step: non-finite input current");
  const Scalar vth = static_cast<Scalar>(params.v_threshold);
  const Scalar vreset = static_cast<Scalar>(params.v_reset);
  const Index n = input_current.numel();
  Vector<Scalar> h = state.v.data() + input_current.data();
  Vector<Scalar> s(n), v(n);
  for (Index i = 0; i < n; ++i) {
    s[i] = h[i] >= vth ? Scalar(1) : Scalar(0);
    v[i] = s[i] != Scalar(0) ? vreset : h[i];
  }
  const Shape& shape = input_current.shape();
  return {Tensor<Scalar>(shape, std::move(s)), {Tensor<Scalar>(shape, std::move(v))}, Tensor<Scalar>(shape, std::move(h))};
}

/// d sigma(k (h - V_th)) / dh = k sigma (1 - sigma); stands in for the Heaviside derivative.
template <typename Scalar>
Scalar surrogate_derivative(Scalar h, const NeuronParams& params) {
  const Scalar k = static_cast<Scalar>(params.surrogate_steepness);
  const Scalar sig = Scalar(1) / (Scalar(1) + std::exp(-k * (h - static_cast<Scalar>(params.v_threshold))));
  return k * sig * (Scalar(1) - sig);
}

template <typename Scalar>
Tensor<Scalar> if_backward_surrogate(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& pre_spike,
                                     const NeuronParams& params) {
  detail::require_same_shape("if_backward_surrogate", grad_out, pre_spike);
  Vector<Scalar> g(grad_out.numel());
  for (Index i = 0; i < g.size(); ++i) g[i] = grad_out.data()[i] * surrogate_derivative(pre_spike.data()[i], params);
  return Tensor<Scalar>(grad_out.shape(), std::move(g));
}

/// Binary spike record whose leading axis is time.
template <typename Scalar>
struct SpikeTrain {
  Tensor<Scalar> spikes;
  Index time_steps = 0;

  bool is_binary() const {
    return (spikes.data().array() == Scalar(0) || spikes.data().array() == Scalar(1)).all();
  }
};

/// Runs the IF recurrence over the leading time axis of x[T, ...]. The state
/// starts at v_reset. Forward emits exact Heaviside spikes; backward
/// propagates through time with the sigmoid surrogate in place of dS/dH,
/// including the reset path V = H (1 - S) + V_reset S.
template <typename Scalar>
Tensor<Scalar> if_neuron(const Tensor<Scalar>& x, Index time_steps, const NeuronParams& params) {
  params.validate();
  if (time_steps < 1) throw std::invalid_argument("spiking_forward: time steps must be >= 1");
  if (x.rank() < 1 || x.dim(0) % time_steps != 0) {
    throw ShapeError("spiking_forward: leading axis of " + shape_string(x.shape()) + " is not a multiple of T=" +
                     std::to_string(time_steps));
  }
  if (!x.data().allFinite()) throw NonFiniteError("spiking_forward: non-finite input current");
  const Index n = x.numel() / time_steps;
  const Scalar vth = static_cast<Scalar>(params.v_threshold);
  const Scalar vreset = static_cast<Scalar>(params.v_reset);

  auto pre = std::make_shared<Vector<Scalar>>(x.numel());
  Vector<Scalar> out(x.numel());
  Vector<Scalar> v = Vector<Scalar>::Constant(n, vreset);
  const Scalar* in = x.data().data();
  for (Index t = 0; t < time_steps; ++t) {
    for (Index i = 0; i < n; ++i) {
      const Index at = t * n + i;
      const Scalar h = v[i] + in[at];
      (*pre)[at] = h;
      const bool fire = h >= vth;
      out[at] = fire ? Scalar(1) : Scalar(0);
      v[i] = fire ? vreset : h;
    }
  }

  return detail::record<Scalar>("if_neuron", x.shape(), std::move(out), {&x},
                                [pre, n, time_steps, params, vreset](Node<Scalar>& self) {
                                  auto& input = *self.inputs[0];
                                  if (!input.requires_grad) return;
                                  Scalar* g = input.grad_buffer();
                                  Vector<Scalar> grad_v = Vector<Scalar>::Zero(n);
                                  for (Index t = time_steps - 1; t >= 0; --t) {
                                    for (Index i = 0; i < n; ++i) {
                                      const Index at = t * n + i;
                                      const Scalar h = (*pre)[at];
                                      const Scalar s = self.value[at];
                                      const Scalar gs = self.grad[at] + grad_v[i] * (vreset - h);
                                      const Scalar gh = gs * surrogate_derivative(h, params) + grad_v[i] * (Scalar(1) - s);
                                      g[at] += gh;
                                      grad_v[i] = gh;
                                    }
                                  }
                                });
}

/// x[T, N, ...] -> binary train of the same shape.
template <typename Scalar>
SpikeTrain<Scalar> spiking_forward(const Tensor<Scalar>& block_input, const NeuronParams& params) {
  if (block_input.rank() < 1 || block_input.dim(0) < 1) {
    throw std::invalid_argument("spiking_forward: time steps must be >= 1");
  }
  const Index t = block_input.dim(0);
  return {if_neuron(block_input, t, params), t};
}

}  // namespace ckdsnn
