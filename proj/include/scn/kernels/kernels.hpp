#pragma once

// Data-parallel inner loops. Each kernel has a portable scalar reference and
// an AVX2/FMA variant; the variant is chosen once at runtime from CPUID and
// may be overridden with SCN_ISA=scalar|avx2 or set_active_isa().

#include <cstddef>

namespace scn::kernels {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);
bool isa_available(Isa isa);
Isa active_isa();
void set_active_isa(Isa isa);

// Per-step PLIF sweep arguments (see neuron.hpp for the dynamics).
template <typename T>
struct PlifForwardArgs {
  std::size_t n;
  T leak;       // k in (0, 1)
  T threshold;
  T v_reset;
  const T* x;   // input current at this step
  T* v;         // membrane potential, updated in place (V_{t-1} -> V_t)
  T* h;         // charged potential H_t (saved for backward)
  T* s;         // spikes S_t
};

template <typename T>
struct PlifBackwardArgs {
  std::size_t n;
  T leak;
  T threshold;
  T alpha;
  T v_reset;
  bool detach_reset;
  const T* h;
  const T* s;
  const T* x;
  const T* v_prev;
  const T* grad_s;
  T* grad_v;    // in: dL/dV_t, out: dL/dV_{t-1}
  T* grad_x;    // out: dL/dx_t (overwritten)
};

template <typename T>
struct KernelTable {
  // C[m,n] += A[m,k] * B[k,n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc);
  // C[m,n] += A[m,k] * B[n,k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc);
  // y += alpha * x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
  // y = scale * x + shift
  void (*scale_shift)(std::size_t n, T scale, T shift, const T* x, T* y);
  T (*dot)(std::size_t n, const T* x, const T* y);
  T (*sum)(std::size_t n, const T* x);
  void (*plif_forward)(const PlifForwardArgs<T>& args);
  // Returns sum over elements of dL/dH * (x - v_prev), the leak-factor gradient.
  double (*plif_backward)(const PlifBackwardArgs<T>& args);
};

template <typename T>
const KernelTable<T>& table(Isa isa);

template <typename T>
const KernelTable<T>& active() {
  return table<T>(active_isa());
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  active<T>().gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  active<T>().gemm_nt(m, n, k, a, lda, b, ldb, c, ldc);
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  active<T>().axpy(n, alpha, x, y);
}

template <typename T>
void scale_shift(std::size_t n, T scale, T shift, const T* x, T* y) {
  active<T>().scale_shift(n, scale, shift, x, y);
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  return active<T>().dot(n, x, y);
}

template <typename T>
T sum(std::size_t n, const T* x) {
  return active<T>().sum(n, x);
}

namespace scalar {
template <typename T>
const KernelTable<T>& kernels();
}

namespace avx2 {
bool supported();
template <typename T>
const KernelTable<T>& kernels();
}

}  // namespace scn::kernels
