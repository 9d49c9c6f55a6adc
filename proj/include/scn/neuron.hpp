#pragma once

// Parametric leaky integrate-and-fire neuron:
//   H_t = V_{t-1} + k (x_t - V_{t-1}),   k = logistic(w)
//   S_t = Heaviside(H_t - threshold)
//   V_t = (1 - S_t) H_t + S_t v_reset
// The spike factor on the reset path is detached by default.

#include "scn/ops.hpp"

namespace scn {

struct PlifParams {
  double threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_alpha = 2.0;
  bool detach_reset = true;
  // Smooth arctan forward for finite-difference checks.
  bool relaxed = false;

  SurrogateConfig surrogate() const { return {surrogate_alpha, threshold, relaxed}; }
};

double leak_factor(double w);

template <typename T>
struct PlifState {
  Tensor<T> v;  // empty means all-zero (sequence start)

  void reset() { v = Tensor<T>(); }
};

template <typename T>
struct PlifStepResult {
  Var<T> spikes;
  Var<T> v;
};

// One step built from differentiable primitives; `v` is the previous
// membrane potential and `w` the one-element leak parameter.
template <typename T>
PlifStepResult<T> plif_step(const Var<T>& x, const Var<T>& v, const Var<T>& w, const PlifParams& params);

// Runs `steps` consecutive steps on x = [steps*N, ...] (step-major) as one
// graph node with a hand-written BPTT backward. The membrane potential is
// read from and written back to `state`; no gradient flows across calls.
template <typename T>
Var<T> plif_multistep(const Var<T>& x, const Var<T>& w, PlifState<T>& state, std::size_t steps,
                      const PlifParams& params);

}  // namespace scn
