#include "scn/decode.hpp"

#include <cmath>
#include <map>
#include <set>

namespace scn {

template <typename T>
std::vector<Peak> extract_peaks(const Tensor<T>& probs, const DecodeConfig& cfg) {
  require(probs.rank() == 3, ErrorKind::dimension, "extract_peaks: expected [K, h, w], got " + shape_string(probs.shape()));
  const std::size_t k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  std::vector<Peak> peaks;
  for (std::size_t c = 0; c < k; ++c) {
    const T* plane = probs.data() + c * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const T v = plane[y * w + x];
        // zero padding: border cells also compete with 0
        bool peak = (y > 0 && y + 1 < h && x > 0 && x + 1 < w) || v >= T{0};
        for (int dy = -1; dy <= 1 && peak; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) continue;
            if (plane[yy * static_cast<std::ptrdiff_t>(w) + xx] > v) {
              peak = false;
              break;
            }
          }
        }
        if (peak) peaks.push_back({c, y, x, static_cast<double>(v)});
      }
    }
  }
  // peaks are generated in row-major order, so a stable sort breaks ties by index
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (peaks.size() > cfg.max_dets) peaks.resize(cfg.max_dets);
  std::erase_if(peaks, [&](const Peak& p) { return p.score < cfg.score_threshold; });
  return peaks;
}

template <typename T>
std::vector<Detection> assemble_boxes(const std::vector<Peak>& peaks, const Tensor<T>& size_map,
                                      const Tensor<T>& offset_map, std::size_t stride) {
  require(size_map.rank() == 3 && size_map.dim(0) == 2 && offset_map.shape() == size_map.shape(),
          ErrorKind::dimension, "assemble_boxes: size and offset maps must both be [2, h, w]");
  const std::size_t h = size_map.dim(1), w = size_map.dim(2);
  const double r = static_cast<double>(stride);
  std::vector<Detection> out;
  out.reserve(peaks.size());
  for (const Peak& p : peaks) {
    require(p.y < h && p.x < w, ErrorKind::dimension, "assemble_boxes: peak outside the map");
    const std::size_t i = p.y * w + p.x;
    const double cx = (static_cast<double>(p.x) + static_cast<double>(offset_map[i])) * r;
    const double cy = (static_cast<double>(p.y) + static_cast<double>(offset_map[h * w + i])) * r;
    const double bw = std::max(0.0, static_cast<double>(size_map[i])) * r;
    const double bh = std::max(0.0, static_cast<double>(size_map[h * w + i])) * r;
    out.push_back({static_cast<int>(p.class_id), p.score, {cx - bw / 2.0, cy - bh / 2.0, bw, bh}});
  }
  return out;
}

template <typename T>
std::vector<std::vector<Detection>> decode_outputs(const HeadOutputs<T>& outputs, const DecodeConfig& cfg) {
  NoGradGuard no_grad;
  const Tensor<T> hm = temporal_mean(outputs.heatmap, outputs.steps).value();
  const Tensor<T> sz = temporal_mean(outputs.size, outputs.steps).value();
  const Tensor<T> off = temporal_mean(outputs.offset, outputs.steps).value();
  const std::size_t n = hm.dim(0), k = hm.dim(1), h = hm.dim(2), w = hm.dim(3);
  std::vector<std::vector<Detection>> all(n);
  for (std::size_t b = 0; b < n; ++b) {
    Tensor<T> probs({k, h, w});
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double x = static_cast<double>(hm[b * k * h * w + i]);
      probs[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
    }
    Tensor<T> s({2, h, w}, std::vector<T>(sz.data() + b * 2 * h * w, sz.data() + (b + 1) * 2 * h * w));
    Tensor<T> o({2, h, w}, std::vector<T>(off.data() + b * 2 * h * w, off.data() + (b + 1) * 2 * h * w));
    all[b] = assemble_boxes(extract_peaks(probs, cfg), s, o, kOutputStride);
  }
  return all;
}

double iou(const Box& a, const Box& b) {
  if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) return 0.0;
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box annotation_box(const Annotation& a) { return {a.x, a.y, a.w, a.h}; }

double average_precision(const std::vector<std::vector<Detection>>& detections,
                         const std::vector<AnnotationSet>& ground_truth, int class_id, double iou_threshold) {
  require(detections.size() == ground_truth.size(), ErrorKind::dimension,
          "average_precision: detection and ground-truth image counts differ");
  struct Ranked {
    std::size_t image;
    const Detection* det;
  };
  std::vector<Ranked> ranked;
  std::vector<std::vector<Box>> gts(ground_truth.size());
  std::size_t num_gt = 0;
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    for (const auto& a : ground_truth[i])
      if (a.class_id == class_id) gts[i].push_back(annotation_box(a));
    num_gt += gts[i].size();
    for (const auto& d : detections[i])
      if (d.class_id == class_id) ranked.push_back({i, &d});
  }
  if (num_gt == 0 || ranked.empty()) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.det->score > b.det->score; });

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<double> precision(ranked.size()), recall(ranked.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& cand = gts[ranked[k].image];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      if (used[ranked[k].image][j]) continue;
      const double v = iou(ranked[k].det->box, cand[j]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= 0.0) {
      used[ranked[k].image][best_j] = true;
      ++tp;
    }
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t k = precision.size() - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
  double sum = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

EvalReport coco_map(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<AnnotationSet>& ground_truth) {
  require(detections.size() == ground_truth.size(), ErrorKind::dimension,
          "coco_map: detection and ground-truth image counts differ");
  EvalReport report;
  report.iou_thresholds = coco_iou_thresholds();
  std::map<int, ClassReport> classes;
  for (const auto& img : ground_truth)
    for (const auto& a : img) {
      classes[a.class_id].class_id = a.class_id;
      ++classes[a.class_id].num_gt;
    }
  for (const auto& img : detections) {
    report.num_detections += img.size();
    for (const auto& d : img)
      if (auto it = classes.find(d.class_id); it != classes.end()) ++it->second.num_detections;
  }
  double total = 0.0, at50 = 0.0, at75 = 0.0;
  for (auto& [id, cls] : classes) {
    for (double thr : report.iou_thresholds) cls.ap.push_back(average_precision(detections, ground_truth, id, thr));
    for (double ap : cls.ap) total += ap;
    at50 += cls.ap[0];
    at75 += cls.ap[5];
    report.num_gt += cls.num_gt;
    report.classes.push_back(cls);
  }
  if (!classes.empty()) {
    const double nc = static_cast<double>(classes.size());
    report.map = total / (nc * static_cast<double>(report.iou_thresholds.size()));
    report.map_50 = at50 / nc;
    report.map_75 = at75 / nc;
  }
  return report;
}

template std::vector<Peak> extract_peaks(const Tensor<float>&, const DecodeConfig&);
template std::vector<Peak> extract_peaks(const Tensor<double>&, const DecodeConfig&);
template std::vector<Detection> assemble_boxes(const std::vector<Peak>&, const Tensor<float>&, const Tensor<float>&,
                                               std::size_t);
template std::vector<Detection> assemble_boxes(const std::vector<Peak>&, const Tensor<double>&,
                                               const Tensor<double>&, std::size_t);
template std::vector<std::vector<Detection>> decode_outputs(const HeadOutputs<float>&, const DecodeConfig&);
template std::vector<std::vector<Detection>> decode_outputs(const HeadOutputs<double>&, const DecodeConfig&);

}  // namespace scn
