#include "scn/loss.hpp"

#include <cmath>

namespace scn {

void LossConfig::validate() const {
  require(alpha_kd >= 0 && size_weight >= 0 && offset_weight >= 0 && focal_alpha >= 0 && focal_beta >= 0,
          ErrorKind::config, "loss: weights and focal exponents must be non-negative");
}

double gaussian_radius(double h, double w, double min_overlap) {
  if (h <= 0.0 || w <= 0.0) return 0.0;
  const double m = min_overlap;
  // one corner inside, one outside (diagonal shift r):  r^2 - (h+w) r + wh(1-m)/(1+m) = 0
  const double b1 = h + w, c1 = w * h * (1.0 - m) / (1.0 + m);
  const double r1 = (b1 - std::sqrt(std::max(b1 * b1 - 4.0 * c1, 0.0))) / 2.0;
  // both corners inward:  4 r^2 - 2(h+w) r + (1-m) wh = 0
  const double b2 = 2.0 * (h + w), c2 = (1.0 - m) * w * h;
  const double r2 = (b2 - std::sqrt(std::max(b2 * b2 - 16.0 * c2, 0.0))) / 8.0;
  // both corners outward:  4m r^2 + 2m(h+w) r + (m-1) wh = 0
  const double b3 = 2.0 * m * (h + w), c3 = (m - 1.0) * w * h;
  const double r3 = (-b3 + std::sqrt(std::max(b3 * b3 - 16.0 * m * c3, 0.0))) / (8.0 * m);
  return std::max(0.0, std::min({r1, r2, r3}));
}

template <typename T>
Targets<T> render_targets(const std::vector<AnnotationSet>& batch, std::size_t grid_h, std::size_t grid_w,
                          std::size_t stride, std::size_t num_classes) {
  const std::size_t n = batch.size();
  Targets<T> t{Tensor<T>({n, num_classes, grid_h, grid_w}), Tensor<T>({n, 2, grid_h, grid_w}),
               Tensor<T>({n, 2, grid_h, grid_w}), Tensor<T>({n, 1, grid_h, grid_w}), 0};
  const double r = static_cast<double>(stride);
  for (std::size_t b = 0; b < n; ++b) {
    for (const Annotation& a : batch[b]) {
      require(a.class_id >= 0 && static_cast<std::size_t>(a.class_id) < num_classes, ErrorKind::config,
              "render_targets: class_id out of range");
      const double cx = (a.x + a.w / 2.0) / r, cy = (a.y + a.h / 2.0) / r;
      const double fx = std::floor(cx), fy = std::floor(cy);
      if (fx < 0 || fy < 0 || fx >= double(grid_w) || fy >= double(grid_h)) continue;
      const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);

      const double sigma = gaussian_radius(a.h / r, a.w / r) / 3.0;
      const auto reach = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
      for (std::ptrdiff_t dy = -reach; dy <= reach; ++dy) {
        for (std::ptrdiff_t dx = -reach; dx <= reach; ++dx) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(iy) + dy, x = static_cast<std::ptrdiff_t>(ix) + dx;
          if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(grid_h) || x >= static_cast<std::ptrdiff_t>(grid_w))
            continue;
          const double d2 = double(dx * dx + dy * dy);
          const double v = d2 == 0.0 ? 1.0 : (sigma > 0.0 ? std::exp(-d2 / (2.0 * sigma * sigma)) : 0.0);
          T& cell = t.heatmap.at(b, static_cast<std::size_t>(a.class_id), static_cast<std::size_t>(y),
                                 static_cast<std::size_t>(x));
          cell = std::max(cell, static_cast<T>(v));
        }
      }
      t.size.at(b, 0, iy, ix) = static_cast<T>(a.w / r);
      t.size.at(b, 1, iy, ix) = static_cast<T>(a.h / r);
      t.offset.at(b, 0, iy, ix) = static_cast<T>(cx - fx);
      t.offset.at(b, 1, iy, ix) = static_cast<T>(cy - fy);
      T& m = t.mask.at(b, 0, iy, ix);
      if (m == T{0}) ++t.num_objects;
      m = T{1};
    }
  }
  return t;
}

template <typename T>
Var<T> focal_loss(const Var<T>& logits, const Tensor<T>& target, std::size_t num_objects, double alpha, double beta) {
  require(logits.shape() == target.shape(), ErrorKind::dimension,
          "focal_loss: logits " + shape_string(logits.shape()) + " vs target " + shape_string(target.shape()));
  constexpr double lo = 1e-4, hi = 1.0 - 1e-4;
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(num_objects, 1));
  const std::size_t count = target.size();
  std::vector<T> dlogit(count);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double x = static_cast<double>(logits.value()[i]);
    const double raw = 1.0 / (1.0 + std::exp(-x));
    const double p = std::clamp(raw, lo, hi);
    const bool clamped = raw != p;
    const double t = static_cast<double>(target[i]);
    double term, dterm;  // term and d(term)/dx
    if (t == 1.0) {
      const double q = 1.0 - p;
      term = std::pow(q, alpha) * std::log(p);
      dterm = -alpha * p * std::pow(q, alpha) * std::log(p) + std::pow(q, alpha + 1.0);
    } else {
      const double wgt = std::pow(1.0 - t, beta);
      term = wgt * std::pow(p, alpha) * std::log(1.0 - p);
      dterm = wgt * (alpha * std::pow(p, alpha) * (1.0 - p) * std::log(1.0 - p) - std::pow(p, alpha + 1.0));
    }
    total -= term;
    dlogit[i] = clamped ? T{0} : static_cast<T>(-dterm * norm);
  }
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(total * norm)}), {logits},
                        [dlogit = std::move(dlogit)](Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            const T up = self.grad[0];
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += up * dlogit[i];
                          }
                        });
}

template <typename T>
Var<T> l1_masked(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, std::size_t num_objects) {
  const Shape& s = pred.shape();
  require(s == target.shape() && s.size() == 4 && mask.shape() == Shape({s[0], 1, s[2], s[3]}), ErrorKind::dimension,
          "l1_masked: pred " + shape_string(s) + ", target " + shape_string(target.shape()) + ", mask " +
              shape_string(mask.shape()));
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(num_objects, 1));
  const std::size_t plane = s[2] * s[3];
  std::vector<T> sign(pred.size(), T{0});
  double total = 0.0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        if (mask[n * plane + i] == T{0}) continue;
        const std::size_t k = (n * s[1] + c) * plane + i;
        const double d = static_cast<double>(pred.value()[k]) - static_cast<double>(target[k]);
        total += std::abs(d);
        sign[k] = static_cast<T>((d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * norm);
      }
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(total * norm)}), {pred},
                        [sign = std::move(sign)](Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            const T up = self.grad[0];
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += up * sign[i];
                          }
                        });
}

template <typename T>
Var<T> kd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::size_t steps) {
  require(student_logits.shape() == teacher_logits.shape(), ErrorKind::dimension,
          "kd_loss: student " + shape_string(student_logits.shape()) + " vs teacher " +
              shape_string(teacher_logits.shape()));
  require(steps >= 1 && !student_logits.shape().empty() && student_logits.shape()[0] % steps == 0,
          ErrorKind::dimension, "kd_loss: batch dimension is not a multiple of the step count");
  const double norm = 1.0 / static_cast<double>(student_logits.shape()[0]);  // 1 / (T * N)
  double total = 0.0;
  for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
    const double d = static_cast<double>(student_logits.value()[i]) - static_cast<double>(teacher_logits[i]);
    total += d * d;
  }
  return make_result<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(total * norm)}), {student_logits},
                        [teacher = teacher_logits, norm](Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            const T scale = static_cast<T>(2.0 * norm) * self.grad[0];
                            const Tensor<T>& s = self.parents[0]->value;
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += scale * (s[i] - teacher[i]);
                          }
                        });
}

template <typename T>
LossTerms<T> total_loss(const HeadOutputs<T>& outputs, const Targets<T>& targets,
                        const std::optional<Tensor<T>>& teacher_heatmap, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t steps = outputs.steps;
  const Var<T> hm = temporal_mean(outputs.heatmap, steps);
  const Var<T> sz = temporal_mean(outputs.size, steps);
  const Var<T> off = temporal_mean(outputs.offset, steps);
  const Var<T> focal = focal_loss(hm, targets.heatmap, targets.num_objects, cfg.focal_alpha, cfg.focal_beta);
  const Var<T> l_size = l1_masked(sz, targets.size, targets.mask, targets.num_objects);
  const Var<T> l_off = l1_masked(off, targets.offset, targets.mask, targets.num_objects);
  Var<T> total = add(add(focal, scale(l_size, static_cast<T>(cfg.size_weight))),
                     scale(l_off, static_cast<T>(cfg.offset_weight)));

  LossTerms<T> terms;
  terms.focal = static_cast<double>(focal.value()[0]);
  terms.size = static_cast<double>(l_size.value()[0]);
  terms.offset = static_cast<double>(l_off.value()[0]);
  terms.detection = static_cast<double>(total.value()[0]);
  if (teacher_heatmap) {
    const Var<T> kd = kd_loss(outputs.heatmap, *teacher_heatmap, steps);
    terms.kd = static_cast<double>(kd.value()[0]);
    // a zero weight leaves the graph exactly as without a teacher
    if (cfg.alpha_kd != 0.0) total = add(total, scale(kd, static_cast<T>(cfg.alpha_kd)));
  }
  terms.total = total;
  return terms;
}

#define SCN_INSTANTIATE_LOSS(T)                                                                                  \
  template Targets<T> render_targets(const std::vector<AnnotationSet>&, std::size_t, std::size_t, std::size_t,  \
                                     std::size_t);                                                               \
  template Var<T> focal_loss(const Var<T>&, const Tensor<T>&, std::size_t, double, double);                      \
  template Var<T> l1_masked(const Var<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);                     \
  template Var<T> kd_loss(const Var<T>&, const Tensor<T>&, std::size_t);                                         \
  template LossTerms<T> total_loss(const HeadOutputs<T>&, const Targets<T>&, const std::optional<Tensor<T>>&,    \
                                   const LossConfig&);

SCN_INSTANTIATE_LOSS(float)
SCN_INSTANTIATE_LOSS(double)

}  // namespace scn
