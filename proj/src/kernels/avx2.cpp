// AVX2/FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// only entered after a CPUID check (avx2::supported()).

#include <algorithm>
#include <cmath>
#include <numbers>

#include "scn/kernels/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define SCN_HAVE_AVX2 1
#endif

namespace scn::kernels::avx2 {

#if SCN_HAVE_AVX2

namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr std::size_t W = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V set1(T v) { return _mm256_set1_ps(v); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static __m256i mask(std::size_t n) {
    return _mm256_cmpgt_epi32(_mm256_set1_epi32(static_cast<int>(n)), _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_ps(p, m, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static V sub(V a, V b) { return _mm256_sub_ps(a, b); }
  static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
  static V div(V a, V b) { return _mm256_div_ps(a, b); }
  static V ge(V a, V b) { return _mm256_cmp_ps(a, b, _CMP_GE_OQ); }
  static V blend(V a, V b, V m) { return _mm256_blendv_ps(a, b, m); }
  static V and_(V a, V b) { return _mm256_and_ps(a, b); }
  static T hsum(V v) {
    const __m128 lo = _mm256_castps256_ps128(v);
    const __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_movehdup_ps(s));
    return _mm_cvtss_f32(s);
  }
  // Accumulates the lanes of v into a pair of double vectors.
  static void widen_acc(V v, __m256d& a0, __m256d& a1) {
    a0 = _mm256_add_pd(a0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    a1 = _mm256_add_pd(a1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t W = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V set1(T v) { return _mm256_set1_pd(v); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static __m256i mask(std::size_t n) {
    return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<long long>(n)), _mm256_setr_epi64x(0, 1, 2, 3));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_pd(p, m, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static V sub(V a, V b) { return _mm256_sub_pd(a, b); }
  static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
  static V div(V a, V b) { return _mm256_div_pd(a, b); }
  static V ge(V a, V b) { return _mm256_cmp_pd(a, b, _CMP_GE_OQ); }
  static V blend(V a, V b, V m) { return _mm256_blendv_pd(a, b, m); }
  static V and_(V a, V b) { return _mm256_and_pd(a, b); }
  static T hsum(V v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
  }
  static void widen_acc(V v, __m256d& a0, __m256d&) { a0 = _mm256_add_pd(a0, v); }
};

template <typename T>
struct Traits;
template <>
struct Traits<float> : F32 {};
template <>
struct Traits<double> : F64 {};

// ---------------------------------------------------------------------------
// C += A * B. Register block: MR rows x 2 vectors of columns. K is blocked so
// the B panel (kKc x 2W) stays resident in L1 while the row blocks sweep it.

constexpr std::size_t kMr = 4;
constexpr std::size_t kKc = 256;

template <class X, std::size_t MR, bool Full>
inline void micro_nn(std::size_t kc, const typename X::T* a, std::size_t lda, const typename X::T* b, std::size_t ldb,
                     typename X::T* c, std::size_t ldc, std::size_t nc) {
  using V = typename X::V;
  constexpr std::size_t W = X::W;
  V acc0[MR];
  V acc1[MR];
  for (std::size_t r = 0; r < MR; ++r) {
    acc0[r] = X::zero();
    acc1[r] = X::zero();
  }
  const __m256i m0 = X::mask(std::min(nc, W));
  const __m256i m1 = X::mask(nc > W ? nc - W : 0);
  const bool two = nc > W;
  for (std::size_t p = 0; p < kc; ++p) {
    const typename X::T* brow = b + p * ldb;
    V b0;
    V b1;
    if constexpr (Full) {
      b0 = X::load(brow);
      b1 = X::load(brow + W);
    } else {
      b0 = X::maskload(brow, m0);
      b1 = two ? X::maskload(brow + W, m1) : X::zero();
    }
    for (std::size_t r = 0; r < MR; ++r) {
      const V av = X::set1(a[r * lda + p]);
      acc0[r] = X::fmadd(av, b0, acc0[r]);
      acc1[r] = X::fmadd(av, b1, acc1[r]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    typename X::T* crow = c + r * ldc;
    if constexpr (Full) {
      X::store(crow, X::add(X::load(crow), acc0[r]));
      X::store(crow + W, X::add(X::load(crow + W), acc1[r]));
    } else {
      X::maskstore(crow, m0, X::add(X::maskload(crow, m0), acc0[r]));
      if (two) X::maskstore(crow + W, m1, X::add(X::maskload(crow + W, m1), acc1[r]));
    }
  }
}

template <class X, bool Full>
inline void rows_nn(std::size_t m, std::size_t kc, const typename X::T* a, std::size_t lda, const typename X::T* b,
                    std::size_t ldb, typename X::T* c, std::size_t ldc, std::size_t nc) {
  std::size_t i = 0;
  for (; i + kMr <= m; i += kMr) micro_nn<X, kMr, Full>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, nc);
  switch (m - i) {
    case 3: micro_nn<X, 3, Full>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, nc); break;
    case 2: micro_nn<X, 2, Full>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, nc); break;
    case 1: micro_nn<X, 1, Full>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, nc); break;
    default: break;
  }
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  using X = Traits<T>;
  constexpr std::size_t nr = 2 * X::W;
  for (std::size_t jc = 0; jc < n; jc += nr) {
    const std::size_t nc = std::min(nr, n - jc);
    for (std::size_t pc = 0; pc < k; pc += kKc) {
      const std::size_t kc = std::min(kKc, k - pc);
      if (nc == nr) {
        rows_nn<X, true>(m, kc, a + pc, lda, b + pc * ldb + jc, ldb, c + jc, ldc, nc);
      } else {
        rows_nn<X, false>(m, kc, a + pc, lda, b + pc * ldb + jc, ldb, c + jc, ldc, nc);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// C += A * B^T as blocked dot products along K.

template <class X, std::size_t IR, std::size_t JR>
inline void micro_nt(std::size_t k, const typename X::T* a, std::size_t lda, const typename X::T* b, std::size_t ldb,
                     typename X::T* c, std::size_t ldc) {
  using V = typename X::V;
  constexpr std::size_t W = X::W;
  V acc[IR][JR];
  for (std::size_t i = 0; i < IR; ++i)
    for (std::size_t j = 0; j < JR; ++j) acc[i][j] = X::zero();
  std::size_t p = 0;
  for (; p + W <= k; p += W) {
    V bv[JR];
    for (std::size_t j = 0; j < JR; ++j) bv[j] = X::load(b + j * ldb + p);
    for (std::size_t i = 0; i < IR; ++i) {
      const V av = X::load(a + i * lda + p);
      for (std::size_t j = 0; j < JR; ++j) acc[i][j] = X::fmadd(av, bv[j], acc[i][j]);
    }
  }
  if (p < k) {
    const __m256i m = X::mask(k - p);
    V bv[JR];
    for (std::size_t j = 0; j < JR; ++j) bv[j] = X::maskload(b + j * ldb + p, m);
    for (std::size_t i = 0; i < IR; ++i) {
      const V av = X::maskload(a + i * lda + p, m);
      for (std::size_t j = 0; j < JR; ++j) acc[i][j] = X::fmadd(av, bv[j], acc[i][j]);
    }
  }
  for (std::size_t i = 0; i < IR; ++i)
    for (std::size_t j = 0; j < JR; ++j) c[i * ldc + j] += X::hsum(acc[i][j]);
}

template <class X, std::size_t IR>
inline void cols_nt(std::size_t n, std::size_t k, const typename X::T* a, std::size_t lda, const typename X::T* b,
                    std::size_t ldb, typename X::T* c, std::size_t ldc) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) micro_nt<X, IR, 4>(k, a, lda, b + j * ldb, ldb, c + j, ldc);
  for (; j < n; ++j) micro_nt<X, IR, 1>(k, a, lda, b + j * ldb, ldb, c + j, ldc);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
             T* c, std::size_t ldc) {
  using X = Traits<T>;
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) cols_nt<X, 2>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
  if (i < m) cols_nt<X, 1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
}

// ---------------------------------------------------------------------------

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  using X = Traits<T>;
  const auto av = X::set1(alpha);
  std::size_t i = 0;
  for (; i + X::W <= n; i += X::W) X::store(y + i, X::fmadd(av, X::load(x + i), X::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_shift(std::size_t n, T scale, T shift, const T* x, T* y) {
  using X = Traits<T>;
  const auto sv = X::set1(scale);
  const auto bv = X::set1(shift);
  std::size_t i = 0;
  for (; i + X::W <= n; i += X::W) X::store(y + i, X::fmadd(sv, X::load(x + i), bv));
  for (; i < n; ++i) y[i] = scale * x[i] + shift;
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  using X = Traits<T>;
  auto a0 = X::zero();
  auto a1 = X::zero();
  std::size_t i = 0;
  for (; i + 2 * X::W <= n; i += 2 * X::W) {
    a0 = X::fmadd(X::load(x + i), X::load(y + i), a0);
    a1 = X::fmadd(X::load(x + i + X::W), X::load(y + i + X::W), a1);
  }
  T acc = X::hsum(X::add(a0, a1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
T sum(std::size_t n, const T* x) {
  using X = Traits<T>;
  auto a0 = X::zero();
  auto a1 = X::zero();
  std::size_t i = 0;
  for (; i + 2 * X::W <= n; i += 2 * X::W) {
    a0 = X::add(X::load(x + i), a0);
    a1 = X::add(X::load(x + i + X::W), a1);
  }
  T acc = X::hsum(X::add(a0, a1));
  for (; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void plif_forward(const PlifForwardArgs<T>& a) {
  using X = Traits<T>;
  const auto kv = X::set1(a.leak);
  const auto thv = X::set1(a.threshold);
  const auto rv = X::set1(a.v_reset);
  const auto one = X::set1(T{1});
  std::size_t i = 0;
  for (; i + X::W <= a.n; i += X::W) {
    const auto v = X::load(a.v + i);
    const auto h = X::fmadd(kv, X::sub(X::load(a.x + i), v), v);
    const auto fired = X::ge(h, thv);
    X::store(a.h + i, h);
    X::store(a.s + i, X::and_(fired, one));
    X::store(a.v + i, X::blend(h, rv, fired));
  }
  for (; i < a.n; ++i) {
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
  using X = Traits<T>;
  const T half_pi_alpha = static_cast<T>(std::numbers::pi / 2) * a.alpha;
  const T half_alpha = a.alpha / T{2};
  const T keep = T{1} - a.leak;
  const auto hpa = X::set1(half_pi_alpha);
  const auto ha = X::set1(half_alpha);
  const auto thv = X::set1(a.threshold);
  const auto rv = X::set1(a.v_reset);
  const auto kv = X::set1(a.leak);
  const auto keepv = X::set1(keep);
  const auto one = X::set1(T{1});
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + X::W <= a.n; i += X::W) {
    const auto h = X::load(a.h + i);
    const auto z = X::mul(hpa, X::sub(h, thv));
    const auto sg = X::div(ha, X::fmadd(z, z, one));
    const auto gv = X::load(a.grad_v + i);
    auto gh = X::fmadd(X::load(a.grad_s + i), sg, X::mul(gv, X::sub(one, X::load(a.s + i))));
    if (!a.detach_reset) gh = X::fmadd(X::mul(gv, X::sub(rv, h)), sg, gh);
    X::store(a.grad_x + i, X::mul(gh, kv));
    X::widen_acc(X::mul(gh, X::sub(X::load(a.x + i), X::load(a.v_prev + i))), acc0, acc1);
    X::store(a.grad_v + i, X::mul(gh, keepv));
  }
  double grad_leak = F64::hsum(_mm256_add_pd(acc0, acc1));
  for (; i < a.n; ++i) {
    const T z = half_pi_alpha * (a.h[i] - a.threshold);
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

bool supported() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

template <typename T>
const KernelTable<T>& kernels() {
  return kTable<T>;
}

#else

bool supported() { return false; }

template <typename T>
const KernelTable<T>& kernels() {
  return scalar::kernels<T>();
}

#endif

template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

}  // namespace scn::kernels::avx2
