#include "scn/neuron.hpp"

#include <cmath>

#include "scn/kernels/kernels.hpp"

namespace scn {

double leak_factor(double w) { return 1.0 / (1.0 + std::exp(-w)); }

template <typename T>
PlifStepResult<T> plif_step(const Var<T>& x, const Var<T>& v, const Var<T>& w, const PlifParams& params) {
  require(x.shape() == v.shape(), ErrorKind::dimension,
          "plif_step: input " + shape_string(x.shape()) + " vs state " + shape_string(v.shape()));
  require(w.size() == 1, ErrorKind::dimension, "plif_step: leak parameter must be a scalar");
  const Var<T> k = logistic(w);
  const Var<T> h = add(v, scale_by(sub(x, v), k));
  const Var<T> s = spike_fn(h, params.surrogate());
  const Var<T> gate = params.detach_reset ? detach(s) : s;
  Var<T> v_next = mul(add_scalar(scale(gate, T{-1}), T{1}), h);
  if (params.v_reset != 0.0) v_next = add(v_next, scale(gate, static_cast<T>(params.v_reset)));
  return {s, v_next};
}

template <typename T>
Var<T> plif_multistep(const Var<T>& x, const Var<T>& w, PlifState<T>& state, std::size_t steps,
                      const PlifParams& params) {
  require(w.size() == 1, ErrorKind::dimension, "plif: leak parameter must be a scalar");
  require(steps >= 1 && !x.shape().empty() && x.shape()[0] % steps == 0, ErrorKind::dimension,
          "plif: leading dimension of " + shape_string(x.shape()) + " is not a multiple of " + std::to_string(steps));
  Shape step_shape = x.shape();
  step_shape[0] /= steps;
  const std::size_t block = shape_numel(step_shape);
  if (state.v.empty()) {
    state.v = Tensor<T>(step_shape);
  } else {
    require(state.v.shape() == step_shape, ErrorKind::dimension,
            "plif: state " + shape_string(state.v.shape()) + " does not match step input " + shape_string(step_shape) +
                " (reset states between samples)");
  }

  const T k = static_cast<T>(leak_factor(static_cast<double>(w.value()[0])));
  const T th = static_cast<T>(params.threshold);
  const T vr = static_cast<T>(params.v_reset);
  Tensor<T> spikes(x.shape());
  Tensor<T> charged(x.shape());
  Tensor<T> v_prev(x.shape());
  const auto& kt = kernels::active<T>();
  for (std::size_t t = 0; t < steps; ++t) {
    std::copy_n(state.v.data(), block, v_prev.data() + t * block);
    const T* xt = x.value().data() + t * block;
    T* ht = charged.data() + t * block;
    T* st = spikes.data() + t * block;
    if (params.relaxed) {
      for (std::size_t i = 0; i < block; ++i) {
        const T v = state.v[i];
        const T h = v + k * (xt[i] - v);
        const T s = static_cast<T>(surrogate_primitive(static_cast<double>(h - th), params.surrogate_alpha));
        ht[i] = h;
        st[i] = s;
        state.v[i] = (T{1} - s) * h + s * vr;
      }
    } else {
      kt.plif_forward({block, k, th, vr, xt, state.v.data(), ht, st});
    }
  }

  return make_result<T>(
      std::move(spikes), {x, w},
      [steps, block, k, th, vr, params, charged = std::move(charged), v_prev = std::move(v_prev)](Node<T>& self) {
        Tensor<T>* gx = parent_grad(self, 0);
        Tensor<T>* gw = parent_grad(self, 1);
        const auto& kt = kernels::active<T>();
        std::vector<T> grad_v(block, T{0});
        std::vector<T> grad_x(block);
        double grad_leak = 0.0;
        for (std::size_t t = steps; t-- > 0;) {
          const std::size_t off = t * block;
          grad_leak += kt.plif_backward({block, k, th, static_cast<T>(params.surrogate_alpha), vr,
                                         params.detach_reset, charged.data() + off, self.value.data() + off,
                                         self.parents[0]->value.data() + off, v_prev.data() + off,
                                         self.grad.data() + off, grad_v.data(), grad_x.data()});
          if (gx) kernels::axpy<T>(block, T{1}, grad_x.data(), gx->data() + off);
        }
        if (gw) (*gw)[0] += static_cast<T>(grad_leak * static_cast<double>(k) * (1.0 - static_cast<double>(k)));
      });
}

template PlifStepResult<float> plif_step(const Var<float>&, const Var<float>&, const Var<float>&, const PlifParams&);
template PlifStepResult<double> plif_step(const Var<double>&, const Var<double>&, const Var<double>&,
                                          const PlifParams&);
template Var<float> plif_multistep(const Var<float>&, const Var<float>&, PlifState<float>&, std::size_t,
                                   const PlifParams&);
template Var<double> plif_multistep(const Var<double>&, const Var<double>&, PlifState<double>&, std::size_t,
                                    const PlifParams&);

}  // namespace scn
