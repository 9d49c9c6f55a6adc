#pragma once

#include <optional>
#include <vector>

#include "scn/autograd.hpp"

namespace scn {

// Elementwise (identical shapes).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);
// a * s where s holds exactly one element.
template <typename T> Var<T> scale_by(const Var<T>& a, const Var<T>& s);
template <typename T> Var<T> logistic(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// Same value, no gradient path.
template <typename T> Var<T> detach(const Var<T>& a);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// Cross-correlation with zero padding. input [N,Cin,H,W], weight
// [Cout,Cin/groups,kh,kw], optional bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const Conv2dOptions& options = {});

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = false;
};

// Per-channel normalization of [N,C,H,W]. In training mode the statistics
// pool over N*H*W (N already folds time steps) and the running estimates are
// updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormOptions& options);

// Gradient goes to the first maximum in row-major window order.
template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding = 0);

template <typename T> Var<T> upsample_nearest2x(const Var<T>& input);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Rows [begin, begin + count) of dimension 0.
template <typename T> Var<T> slice_batch(const Var<T>& input, std::size_t begin, std::size_t count);
template <typename T> Var<T> concat_batch(const std::vector<Var<T>>& parts);

// [steps*N, ...] -> [N, ...], elementwise mean over the step-major blocks.
template <typename T> Var<T> temporal_mean(const Var<T>& input, std::size_t steps);

struct SurrogateConfig {
  double alpha = 2.0;
  double threshold = 1.0;
  // Forward with the smooth arctan primitive instead of the step. Used to
  // check surrogate gradients against finite differences.
  bool relaxed = false;
};

// Arctan surrogate derivative at u = x - threshold.
double surrogate_grad(double u, double alpha);
// Its primitive: 1/2 + atan(pi/2 * alpha * u) / pi.
double surrogate_primitive(double u, double alpha);

// Heaviside(x - threshold) forward (x == threshold fires), surrogate backward.
template <typename T> Var<T> spike_fn(const Var<T>& x, const SurrogateConfig& config);

}  // namespace scn
