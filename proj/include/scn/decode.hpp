#pragma once

// NMS-free CenterNet decoding and COCO-style evaluation.

#include <vector>

#include "scn/eventio.hpp"
#include "scn/model.hpp"

namespace scn {

struct Box {
  double x = 0, y = 0, w = 0, h = 0;  // top-left corner and size, input pixels
};

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
};

struct Peak {
  std::size_t class_id = 0;
  std::size_t y = 0;
  std::size_t x = 0;
  double score = 0.0;
};

struct DecodeConfig {
  std::size_t max_dets = 100;
  double score_threshold = 0.01;
};

// probs: [K, h, w] in [0, 1]. A cell is a peak iff it is >= every cell of its
// zero-padded 3x3 neighbourhood.
template <typename T>
std::vector<Peak> extract_peaks(const Tensor<T>& probs, const DecodeConfig& cfg = {});

// size_map, offset_map: [2, h, w].
template <typename T>
std::vector<Detection> assemble_boxes(const std::vector<Peak>& peaks, const Tensor<T>& size_map,
                                      const Tensor<T>& offset_map, std::size_t stride);

// Temporal mean of each head, logistic on the heatmap, then per-sample peaks
// and boxes. Returns one detection list per sample.
template <typename T>
std::vector<std::vector<Detection>> decode_outputs(const HeadOutputs<T>& outputs, const DecodeConfig& cfg = {});

double iou(const Box& a, const Box& b);

Box annotation_box(const Annotation& a);

// Per class: detections sorted by descending score are greedily matched to the
// unmatched ground truth of the same image with the highest IoU >= threshold;
// AP is the 101-point interpolated precision.
double average_precision(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<AnnotationSet>& ground_truth, int class_id, double iou_threshold);

struct ClassReport {
  int class_id = 0;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
  std::vector<double> ap;  // one entry per IoU threshold
};

struct EvalReport {
  std::vector<double> iou_thresholds;
  std::vector<ClassReport> classes;  // classes present in the ground truth
  double map = 0.0;                  // mean over classes and thresholds
  double map_50 = 0.0;
  double map_75 = 0.0;
  std::size_t num_detections = 0;
  std::size_t num_gt = 0;
};

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

EvalReport coco_map(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<AnnotationSet>& ground_truth);

}  // namespace scn
