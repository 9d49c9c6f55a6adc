#include "scn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

#include "scn/kernels/kernels.hpp"

namespace scn {
namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

template <typename T>
void require_rank4(const Var<T>& a, const char* op) {
  require(a.value().rank() == 4, ErrorKind::dimension,
          std::string(op) + ": expected [N,C,H,W], got " + shape_string(a.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  kernels::axpy<T>(out.size(), T{1}, b.value().data(), out.data());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = parent_grad(self, i)) kernels::axpy<T>(g->size(), T{1}, self.grad.data(), g->data());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  kernels::axpy<T>(out.size(), T{-1}, b.value().data(), out.data());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) kernels::axpy<T>(g->size(), T{1}, self.grad.data(), g->data());
    if (auto* g = parent_grad(self, 1)) kernels::axpy<T>(g->size(), T{-1}, self.grad.data(), g->data());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  kernels::scale_shift<T>(out.size(), factor, T{0}, a.value().data(), out.data());
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) kernels::axpy<T>(g->size(), factor, self.grad.data(), g->data());
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  Tensor<T> out(a.shape());
  kernels::scale_shift<T>(out.size(), T{1}, offset, a.value().data(), out.data());
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) kernels::axpy<T>(g->size(), T{1}, self.grad.data(), g->data());
  });
}

template <typename T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  require(s.size() == 1, ErrorKind::dimension, "scale_by: factor must hold one element");
  const T factor = s.value()[0];
  Tensor<T> out(a.shape());
  kernels::scale_shift<T>(out.size(), factor, T{0}, a.value().data(), out.data());
  return make_result<T>(std::move(out), {a, s}, [](Node<T>& self) {
    const T factor = self.parents[1]->value[0];
    if (auto* g = parent_grad(self, 0)) kernels::axpy<T>(g->size(), factor, self.grad.data(), g->data());
    if (auto* g = parent_grad(self, 1)) {
      const auto& av = self.parents[0]->value;
      (*g)[0] += kernels::dot<T>(av.size(), av.data(), self.grad.data());
    }
  });
}

template <typename T>
Var<T> logistic(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-a.value()[i]));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T y = self.value[i];
        (*g)[i] += self.grad[i] * y * (T{1} - y);
      }
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], T{0});
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (self.value[i] > T{0}) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (const T v : a.value().values()) acc += static_cast<double>(v);
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(acc)}), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const T up = self.grad[0];
      for (auto& v : g->values()) v += up;
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  require(a.size() > 0, ErrorKind::dimension, "mean of an empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value());
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t stride, pad, groups;
  std::size_t hout, wout;
  std::size_t cin_g, cout_g, ck, p;

  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& wt, const Conv2dOptions& o) {
  require(in.size() == 4, ErrorKind::dimension, "conv2d: input must be [N,C,H,W], got " + shape_string(in));
  require(wt.size() == 4, ErrorKind::dimension, "conv2d: weight must be [Cout,Cin/g,kh,kw], got " + shape_string(wt));
  require(o.groups >= 1 && o.stride >= 1, ErrorKind::config, "conv2d: groups and stride must be >= 1");
  ConvGeometry g{};
  g.n = in[0];
  g.cin = in[1];
  g.h = in[2];
  g.w = in[3];
  g.cout = wt[0];
  g.kh = wt[2];
  g.kw = wt[3];
  g.stride = o.stride;
  g.pad = o.padding;
  g.groups = o.groups;
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0, ErrorKind::dimension,
          "conv2d: channels not divisible by groups");
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  require(wt[1] == g.cin_g, ErrorKind::dimension,
          "conv2d: weight " + shape_string(wt) + " does not match input " + shape_string(in));
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, ErrorKind::dimension,
          "conv2d: kernel larger than padded input");
  g.hout = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  g.ck = g.cin_g * g.kh * g.kw;
  g.p = g.hout * g.wout;
  return g;
}

// Output columns [lo, hi) whose input column ow*stride + k - pad is in range.
inline void valid_range(std::size_t out_len, std::size_t in_len, std::size_t k, std::size_t stride, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(in_len) - 1 - off);
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(first, 0));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(last + 1, 0, static_cast<std::ptrdiff_t>(out_len)));
  if (lo > hi) lo = hi;
}

// src: cin_g planes of one image; col: [ck, ld], this image's p columns first.
template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const T* plane = src + c * g.h * g.w;
    if (g.pointwise()) {
      std::copy_n(plane, g.p, col + c * ld);
      continue;
    }
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      std::size_t oh_lo, oh_hi;
      valid_range(g.hout, g.h, ki, g.stride, g.pad, oh_lo, oh_hi);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t ow_lo, ow_hi;
        valid_range(g.wout, g.w, kj, g.stride, g.pad, ow_lo, ow_hi);
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        std::fill(dst, dst + g.p, T{0});
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const T* in_row = plane + (oh * g.stride + ki - g.pad) * g.w;
          T* out_row = dst + oh * g.wout;
          if (g.stride == 1) {
            std::copy(in_row + ow_lo + kj - g.pad, in_row + ow_hi + kj - g.pad, out_row + ow_lo);
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] = in_row[ow * g.stride + kj - g.pad];
          }
        }
      }
    }
  }
}

// Adds col [ck, ld] (this image's p columns first) back into cin_g planes.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dst_planes, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    T* plane = dst_planes + c * g.h * g.w;
    if (g.pointwise()) {
      kernels::axpy<T>(g.p, T{1}, col + c * ld, plane);
      continue;
    }
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      std::size_t oh_lo, oh_hi;
      valid_range(g.hout, g.h, ki, g.stride, g.pad, oh_lo, oh_hi);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t ow_lo, ow_hi;
        valid_range(g.wout, g.w, kj, g.stride, g.pad, ow_lo, ow_hi);
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          T* in_row = plane + (oh * g.stride + ki - g.pad) * g.w;
          const T* grow = src + oh * g.wout;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) in_row[ow * g.stride + kj - g.pad] += grow[ow];
        }
      }
    }
  }
}

// Images per GEMM: enough columns to amortize the small per-image maps of the
// deep stages, few enough to keep the column buffer cache-sized.
std::size_t conv_chunk(const ConvGeometry& g) {
  return std::clamp<std::size_t>(1024 / std::max<std::size_t>(g.p, 1), 1, std::max<std::size_t>(g.n, 1));
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* in, const T* wt, T* out) {
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      const T* plane = in + (n * g.cin + c) * g.h * g.w;
      T* oplane = out + (n * g.cout + c) * g.p;
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        std::size_t oh_lo, oh_hi;
        valid_range(g.hout, g.h, ki, g.stride, g.pad, oh_lo, oh_hi);
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          std::size_t ow_lo, ow_hi;
          valid_range(g.wout, g.w, kj, g.stride, g.pad, ow_lo, ow_hi);
          const T wv = wt[(c * g.kh + ki) * g.kw + kj];
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const T* in_row = plane + (oh * g.stride + ki - g.pad) * g.w;
            T* out_row = oplane + oh * g.wout;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] += wv * in_row[ow * g.stride + kj - g.pad];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* in, const T* wt, const T* gout, T* gin, T* gwt) {
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      const T* plane = in + (n * g.cin + c) * g.h * g.w;
      const T* gplane = gout + (n * g.cout + c) * g.p;
      T* giplane = gin ? gin + (n * g.cin + c) * g.h * g.w : nullptr;
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        std::size_t oh_lo, oh_hi;
        valid_range(g.hout, g.h, ki, g.stride, g.pad, oh_lo, oh_hi);
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          std::size_t ow_lo, ow_hi;
          valid_range(g.wout, g.w, kj, g.stride, g.pad, ow_lo, ow_hi);
          const std::size_t widx = (c * g.kh + ki) * g.kw + kj;
          const T wv = wt[widx];
          T acc{0};
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t in_off = (oh * g.stride + ki - g.pad) * g.w;
            const T* grow = gplane + oh * g.wout;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              const std::size_t iw = ow * g.stride + kj - g.pad;
              acc += grow[ow] * plane[in_off + iw];
              if (giplane) giplane[in_off + iw] += wv * grow[ow];
            }
          }
          if (gwt) gwt[widx] += acc;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const Conv2dOptions& options) {
  const ConvGeometry g = conv_geometry(input.shape(), weight.shape(), options);
  if (bias) {
    require(bias->size() == g.cout, ErrorKind::dimension, "conv2d: bias size does not match output channels");
  }
  Tensor<T> out({g.n, g.cout, g.hout, g.wout});
  if (bias) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < g.cout; ++c)
        std::fill_n(out.data() + (n * g.cout + c) * g.p, g.p, bias->value()[c]);
  }

  const T* in = input.value().data();
  const T* wt = weight.value().data();
  if (g.depthwise()) {
    depthwise_forward(g, in, wt, out.data());
  } else {
    // Images are batched along the GEMM columns: col [ck, nb*p], y [cout_g, nb*p].
    const std::size_t chunk = conv_chunk(g);
    std::vector<T> col(g.ck * chunk * g.p), y(g.cout_g * chunk * g.p);
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, g.n - n0), ld = nb * g.p;
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        for (std::size_t j = 0; j < nb; ++j)
          im2col(in + ((n0 + j) * g.cin + grp * g.cin_g) * g.h * g.w, g, col.data() + j * g.p, ld);
        std::fill_n(y.data(), g.cout_g * ld, T{0});
        kernels::gemm_nn<T>(g.cout_g, ld, g.ck, wt + grp * g.cout_g * g.ck, g.ck, col.data(), ld, y.data(), ld);
        for (std::size_t j = 0; j < nb; ++j)
          for (std::size_t o = 0; o < g.cout_g; ++o)
            kernels::axpy<T>(g.p, T{1}, y.data() + o * ld + j * g.p,
                             out.data() + ((n0 + j) * g.cout + grp * g.cout_g + o) * g.p);
      }
    }
  }

  std::vector<Var<T>> parents{input, weight};
  if (bias) parents.push_back(*bias);
  return make_result<T>(std::move(out), std::move(parents), [g](Node<T>& self) {
    const T* in = self.parents[0]->value.data();
    const T* wt = self.parents[1]->value.data();
    const T* gy = self.grad.data();
    Tensor<T>* gin = parent_grad(self, 0);
    Tensor<T>* gwt = parent_grad(self, 1);
    if (self.parents.size() > 2) {
      if (Tensor<T>* gb = parent_grad(self, 2)) {
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t c = 0; c < g.cout; ++c) (*gb)[c] += kernels::sum<T>(g.p, gy + (n * g.cout + c) * g.p);
      }
    }
    if (!gin && !gwt) return;
    if (g.depthwise()) {
      depthwise_backward(g, in, wt, gy, gin ? gin->data() : nullptr, gwt ? gwt->data() : nullptr);
      return;
    }
    // Per-group transposed weights [ck, cout_g].
    std::vector<T> wt_t;
    if (gin) {
      wt_t.resize(g.groups * g.ck * g.cout_g);
      for (std::size_t grp = 0; grp < g.groups; ++grp)
        for (std::size_t o = 0; o < g.cout_g; ++o)
          for (std::size_t r = 0; r < g.ck; ++r)
            wt_t[grp * g.ck * g.cout_g + r * g.cout_g + o] = wt[(grp * g.cout_g + o) * g.ck + r];
    }
    const std::size_t chunk = conv_chunk(g);
    const std::size_t cols = chunk * g.p;
    std::vector<T> gyb(g.cout_g * cols);
    std::vector<T> col(gwt ? g.ck * cols : 0), col_t(gwt ? g.ck * cols : 0);
    std::vector<T> gcol(gin ? g.ck * cols : 0);
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, g.n - n0), ld = nb * g.p;
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        for (std::size_t j = 0; j < nb; ++j)
          for (std::size_t o = 0; o < g.cout_g; ++o)
            std::copy_n(gy + ((n0 + j) * g.cout + grp * g.cout_g + o) * g.p, g.p, gyb.data() + o * ld + j * g.p);
        if (gwt) {
          // dW = gy col^T, with col transposed so the long image axis is the GEMM depth
          for (std::size_t j = 0; j < nb; ++j)
            im2col(in + ((n0 + j) * g.cin + grp * g.cin_g) * g.h * g.w, g, col.data() + j * g.p, ld);
          constexpr std::size_t tile = 32;
          for (std::size_t r0 = 0; r0 < g.ck; r0 += tile)
            for (std::size_t q0 = 0; q0 < ld; q0 += tile)
              for (std::size_t q = q0; q < std::min(q0 + tile, ld); ++q)
                for (std::size_t r = r0; r < std::min(r0 + tile, g.ck); ++r) col_t[q * g.ck + r] = col[r * ld + q];
          kernels::gemm_nn<T>(g.cout_g, g.ck, ld, gyb.data(), ld, col_t.data(), g.ck,
                              gwt->data() + grp * g.cout_g * g.ck, g.ck);
        }
        if (gin) {
          std::fill_n(gcol.data(), g.ck * ld, T{0});
          kernels::gemm_nn<T>(g.ck, ld, g.cout_g, wt_t.data() + grp * g.ck * g.cout_g, g.cout_g, gyb.data(), ld,
                              gcol.data(), ld);
          for (std::size_t j = 0; j < nb; ++j)
            col2im(gcol.data() + j * g.p, g, gin->data() + ((n0 + j) * g.cin + grp * g.cin_g) * g.h * g.w, ld);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormOptions& options) {
  require_rank4(input, "batch_norm");
  require(options.eps >= 0.0, ErrorKind::config, "batch_norm: eps must be non-negative");
  const std::size_t n = input.shape()[0], c = input.shape()[1], hw = input.shape()[2] * input.shape()[3];
  require(gamma.size() == c && beta.size() == c && running_mean.size() == c && running_var.size() == c,
          ErrorKind::dimension, "batch_norm: per-channel parameters do not match " + std::to_string(c) + " channels");
  const std::size_t m = n * hw;
  const T* x = input.value().data();

  std::vector<T> mean_c(c), inv_c(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (options.training) {
      require(m > 0, ErrorKind::dimension, "batch_norm: empty batch in training mode");
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) s += static_cast<double>(kernels::sum<T>(hw, x + (b * c + ch) * hw));
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(m);
      const double mom = options.momentum;
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_mean[ch] = static_cast<T>((1.0 - mom) * static_cast<double>(running_mean[ch]) + mom * mu);
      running_var[ch] = static_cast<T>((1.0 - mom) * static_cast<double>(running_var[ch]) + mom * unbiased);
    } else {
      mu = static_cast<double>(running_mean[ch]);
      var = static_cast<double>(running_var[ch]);
    }
    const double denom = var + options.eps;
    mean_c[ch] = static_cast<T>(mu);
    // A zero-variance channel with eps == 0 normalizes to zero.
    inv_c[ch] = denom > 0.0 ? static_cast<T>(1.0 / std::sqrt(denom)) : T{0};
  }

  Tensor<T> out(input.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T sc = gamma.value()[ch] * inv_c[ch];
      const T sh = beta.value()[ch] - sc * mean_c[ch];
      kernels::scale_shift<T>(hw, sc, sh, x + (b * c + ch) * hw, out.data() + (b * c + ch) * hw);
    }

  const bool training = options.training;
  return make_result<T>(
      std::move(out), {input, gamma, beta},
      [n, c, hw, m, training, mean_c = std::move(mean_c), inv_c = std::move(inv_c)](Node<T>& self) {
        const T* x = self.parents[0]->value.data();
        const T* gam = self.parents[1]->value.data();
        const T* gy = self.grad.data();
        Tensor<T>* gx = parent_grad(self, 0);
        Tensor<T>* gg = parent_grad(self, 1);
        Tensor<T>* gbeta = parent_grad(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double mu = static_cast<double>(mean_c[ch]);
          const double inv = static_cast<double>(inv_c[ch]);
          double sum_gy = 0.0, sum_gy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const T* xp = x + (b * c + ch) * hw;
            const T* gp = gy + (b * c + ch) * hw;
            const double sg = static_cast<double>(kernels::sum<T>(hw, gp));
            sum_gy += sg;
            sum_gy_xhat += (static_cast<double>(kernels::dot<T>(hw, gp, xp)) - mu * sg) * inv;
          }
          if (gbeta) (*gbeta)[ch] += static_cast<T>(sum_gy);
          if (gg) (*gg)[ch] += static_cast<T>(sum_gy_xhat);
          if (!gx) continue;
          const double gscale = static_cast<double>(gam[ch]) * inv;
          for (std::size_t b = 0; b < n; ++b) {
            const T* xp = x + (b * c + ch) * hw;
            const T* gp = gy + (b * c + ch) * hw;
            T* dst = gx->data() + (b * c + ch) * hw;
            if (training) {
              // gx = gscale * (gy - mean(gy) - xhat * mean(gy * xhat))
              const double mg = sum_gy / static_cast<double>(m);
              const double mgx = sum_gy_xhat / static_cast<double>(m);
              const T a = static_cast<T>(gscale);
              const T bcoef = static_cast<T>(-gscale * mgx * inv);
              const T cconst = static_cast<T>(gscale * (mgx * inv * mu - mg));
              for (std::size_t i = 0; i < hw; ++i) dst[i] += a * gp[i] + bcoef * xp[i] + cconst;
            } else {
              kernels::axpy<T>(hw, static_cast<T>(gscale), gp, dst);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling, resampling, concatenation

template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_rank4(input, "max_pool2d");
  const auto& s = input.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  require(kernel >= 1 && stride >= 1, ErrorKind::config, "max_pool2d: kernel and stride must be >= 1");
  require(kernel <= h + 2 * padding && kernel <= w + 2 * padding, ErrorKind::dimension,
          "max_pool2d: kernel " + std::to_string(kernel) + " exceeds spatial size " + shape_string(s));
  require(padding < kernel, ErrorKind::config, "max_pool2d: padding must be smaller than the kernel");
  const std::size_t ho = (h + 2 * padding - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kernel) / stride + 1;
  Tensor<T> out({n, c, ho, wo});
  std::vector<std::uint32_t> argmax(out.size());
  const T* x = input.value().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* xp = x + plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_idx = 0;
        bool found = false;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
            if (!found || xp[idx] > best) {
              best = xp[idx];
              best_idx = static_cast<std::uint32_t>(idx);
              found = true;
            }
          }
        }
        const std::size_t o = (plane * ho + oh) * wo + ow;
        out[o] = best;
        argmax[o] = best_idx;
      }
  }
  return make_result<T>(std::move(out), {input}, [argmax = std::move(argmax), h, w, ho, wo](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    const std::size_t per_plane = ho * wo;
    for (std::size_t o = 0; o < self.grad.size(); ++o) {
      const std::size_t plane = o / per_plane;
      (*g)[plane * h * w + argmax[o]] += self.grad[o];
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& input) {
  require_rank4(input, "upsample_nearest2x");
  const auto& s = input.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i) {
      T* r0 = out.data() + (p * 2 * h + 2 * i) * 2 * w;
      T* r1 = r0 + 2 * w;
      const T* src = x + (p * h + i) * w;
      for (std::size_t j = 0; j < w; ++j) {
        r0[2 * j] = r0[2 * j + 1] = src[j];
        r1[2 * j] = r1[2 * j + 1] = src[j];
      }
    }
  return make_result<T>(std::move(out), {input}, [planes, h, w](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < h; ++i) {
        const T* r0 = self.grad.data() + (p * 2 * h + 2 * i) * 2 * w;
        const T* r1 = r0 + 2 * w;
        T* dst = g->data() + (p * h + i) * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] += r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
      }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], ErrorKind::dimension,
          "concat_channels: " + shape_string(sa) + " vs " + shape_string(sb));
  if (sa[1] == 0) return b;
  if (sb[1] == 0) return a;
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> out({n, ca + cb, sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_result<T>(std::move(out), {a, b}, [n, ca, cb, hw](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        kernels::axpy<T>(ca * hw, T{1}, self.grad.data() + i * (ca + cb) * hw, g->data() + i * ca * hw);
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i)
        kernels::axpy<T>(cb * hw, T{1}, self.grad.data() + (i * (ca + cb) + ca) * hw, g->data() + i * cb * hw);
  });
}

template <typename T>
Var<T> slice_batch(const Var<T>& input, std::size_t begin, std::size_t count) {
  const auto& s = input.shape();
  require(!s.empty() && begin + count <= s[0], ErrorKind::dimension, "slice_batch: range out of bounds");
  const std::size_t row = s[0] == 0 ? 0 : input.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = count;
  Tensor<T> out(out_shape);
  std::copy_n(input.value().data() + begin * row, count * row, out.data());
  return make_result<T>(std::move(out), {input}, [begin, row](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      kernels::axpy<T>(self.grad.size(), T{1}, self.grad.data(), g->data() + begin * row);
  });
}

template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::dimension, "concat_batch: no inputs");
  Shape out_shape = parts.front().shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref(out_shape.begin() + 1, out_shape.end());
    require(tail == ref, ErrorKind::dimension, "concat_batch: trailing shapes differ");
    rows += p.shape()[0];
  }
  out_shape[0] = rows;
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::copy_n(p.value().data(), p.size(), out.data() + offset);
    offset += p.size();
  }
  return make_result<T>(std::move(out), parts, [offsets = std::move(offsets)](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (auto* g = parent_grad(self, i)) kernels::axpy<T>(g->size(), T{1}, self.grad.data() + offsets[i], g->data());
  });
}

template <typename T>
Var<T> temporal_mean(const Var<T>& input, std::size_t steps) {
  const auto& s = input.shape();
  require(steps >= 1 && !s.empty() && s[0] % steps == 0, ErrorKind::dimension,
          "temporal_mean: leading dimension " + shape_string(s) + " is not a multiple of " + std::to_string(steps));
  Shape out_shape = s;
  out_shape[0] = s[0] / steps;
  Tensor<T> out(out_shape);
  const std::size_t block = out.size();
  const T inv = T{1} / static_cast<T>(steps);
  for (std::size_t t = 0; t < steps; ++t) kernels::axpy<T>(block, inv, input.value().data() + t * block, out.data());
  return make_result<T>(std::move(out), {input}, [steps, block, inv](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t t = 0; t < steps; ++t) kernels::axpy<T>(block, inv, self.grad.data(), g->data() + t * block);
  });
}

// ---------------------------------------------------------------------------
// Spikes

double surrogate_grad(double u, double alpha) {
  const double z = std::numbers::pi / 2.0 * alpha * u;
  return alpha / (2.0 * (1.0 + z * z));
}

double surrogate_primitive(double u, double alpha) {
  return 0.5 + std::atan(std::numbers::pi / 2.0 * alpha * u) / std::numbers::pi;
}

template <typename T>
Var<T> spike_fn(const Var<T>& x, const SurrogateConfig& config) {
  require(config.alpha > 0.0, ErrorKind::config, "surrogate alpha must be positive");
  Tensor<T> out(x.shape());
  const T th = static_cast<T>(config.threshold);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    out[i] = config.relaxed ? static_cast<T>(surrogate_primitive(static_cast<double>(v - th), config.alpha))
                            : (v >= th ? T{1} : T{0});
  }
  return make_result<T>(std::move(out), {x}, [config](Node<T>& self) {
    Tensor<T>* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i)
      (*g)[i] += self.grad[i] *
                 static_cast<T>(surrogate_grad(static_cast<double>(xv[i]) - config.threshold, config.alpha));
  });
}

#define SCN_INSTANTIATE_OPS(T)                                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> scale(const Var<T>&, T);                                                                    \
  template Var<T> add_scalar(const Var<T>&, T);                                                               \
  template Var<T> scale_by(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> logistic(const Var<T>&);                                                                    \
  template Var<T> relu(const Var<T>&);                                                                        \
  template Var<T> sum(const Var<T>&);                                                                         \
  template Var<T> mean(const Var<T>&);                                                                        \
  template Var<T> detach(const Var<T>&);                                                                      \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, const Conv2dOptions&);   \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&,             \
                             const BatchNormOptions&);                                                        \
  template Var<T> max_pool2d(const Var<T>&, std::size_t, std::size_t, std::size_t);                           \
  template Var<T> upsample_nearest2x(const Var<T>&);                                                          \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                              \
  template Var<T> slice_batch(const Var<T>&, std::size_t, std::size_t);                                       \
  template Var<T> concat_batch(const std::vector<Var<T>>&);                                                   \
  template Var<T> temporal_mean(const Var<T>&, std::size_t);                                                  \
  template Var<T> spike_fn(const Var<T>&, const SurrogateConfig&);

SCN_INSTANTIATE_OPS(float)
SCN_INSTANTIATE_OPS(double)

}  // namespace scn
