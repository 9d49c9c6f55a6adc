// Reference kernels: plain loops, no intrinsics. The AVX2 variants are
// tested for equivalence against these.

#include <cmath>
#include <numbers>

#include "scn/kernels/kernels.hpp"

namespace scn::kernels::scalar {
namespace {

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      const T* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      const T* arow = a + i * lda;
      const T* brow = b + j * ldb;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * ldc + j] += acc;
    }
  }
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_shift(std::size_t n, T scale, T shift, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = scale * x[i] + shift;
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
T sum(std::size_t n, const T* x) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void plif_forward(const PlifForwardArgs<T>& a) {
  for (std::size_t i = 0; i < a.n; ++i) {
    const T v = a.v[i];
    const T h = v + a.leak * (a.x[i] - v);
    const T s = h >= a.threshold ? T{1} : T{0};
    a.h[i] = h;
    a.s[i] = s;
    a.v[i] = s != T{0} ? a.v_reset : h;
  }
}

template <typename T>
double plif_backward(const PlifBackwardArgs<T>& a) {
  const T half_pi_alpha = static_cast<T>(std::numbers::pi / 2) * a.alpha;
  const T half_alpha = a.alpha / T{2};
  const T keep = T{1} - a.leak;
  double grad_leak = 0.0;
  for (std::size_t i = 0; i < a.n; ++i) {
    const T u = a.h[i] - a.threshold;
    const T z = half_pi_alpha * u;
    const T sg = half_alpha / (T{1} + z * z);
    T gh = a.grad_s[i] * sg + a.grad_v[i] * (T{1} - a.s[i]);
    if (!a.detach_reset) gh += a.grad_v[i] * (a.v_reset - a.h[i]) * sg;
    a.grad_x[i] = gh * a.leak;
    grad_leak += static_cast<double>(gh * (a.x[i] - a.v_prev[i]));
    a.grad_v[i] = gh * keep;
  }
  return grad_leak;
}

template <typename T>
const KernelTable<T> kTable{&gemm_nn<T>,     &gemm_nt<T>,      &axpy<T>,         &scale_shift<T>,
                            &dot<T>,         &sum<T>,          &plif_forward<T>, &plif_backward<T>};

}  // namespace

template <typename T>
const KernelTable<T>& kernels() {
  return kTable<T>;
}

template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

}  // namespace scn::kernels::scalar
