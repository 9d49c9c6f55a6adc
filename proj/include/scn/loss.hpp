#pragma once

#include <optional>

#include "scn/eventio.hpp"
#include "scn/model.hpp"

namespace scn {

struct LossConfig {
  double alpha_kd = 1.0;
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double size_weight = 0.1;
  double offset_weight = 1.0;

  void validate() const;
};

// CenterNet targets for a batch; maps are [N, ·, grid_h, grid_w].
template <typename T>
struct Targets {
  Tensor<T> heatmap;  // [N, K, h, w]
  Tensor<T> size;     // [N, 2, h, w] (w, h) in grid units
  Tensor<T> offset;   // [N, 2, h, w] (dx, dy)
  Tensor<T> mask;     // [N, 1, h, w]
  std::size_t num_objects = 0;  // mask cells over the whole batch
};

// Largest corner displacement that keeps IoU >= min_overlap for a (h, w) box.
double gaussian_radius(double h, double w, double min_overlap = 0.7);

template <typename T>
Targets<T> render_targets(const std::vector<AnnotationSet>& batch, std::size_t grid_h, std::size_t grid_w,
                          std::size_t stride, std::size_t num_classes);

// Penalty-reduced pixelwise focal loss on logits, summed and divided by
// max(num_objects, 1). Probabilities are clamped to [1e-4, 1 - 1e-4].
template <typename T>
Var<T> focal_loss(const Var<T>& logits, const Tensor<T>& target, std::size_t num_objects, double alpha = 2.0,
                  double beta = 4.0);

// Sum of |pred - target| over masked cells and both channels, / max(N, 1).
template <typename T>
Var<T> l1_masked(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, std::size_t num_objects);

// (1/T) sum_t sum_pixels (s - t)^2, averaged over the batch. The teacher
// side is a plain tensor, so nothing flows back into it.
template <typename T>
Var<T> kd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::size_t steps);

template <typename T>
struct LossTerms {
  Var<T> total;
  double focal = 0.0;
  double size = 0.0;
  double offset = 0.0;
  double detection = 0.0;
  double kd = 0.0;
};

// Detection terms use the temporal mean of the head maps. `teacher_heatmap`
// holds per-step teacher logits laid out like outputs.heatmap.
template <typename T>
LossTerms<T> total_loss(const HeadOutputs<T>& outputs, const Targets<T>& targets,
                        const std::optional<Tensor<T>>& teacher_heatmap, const LossConfig& cfg);

}  // namespace scn
