#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scn/tensor.hpp"

namespace scn {

struct Event {
  std::int64_t t_us = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::uint8_t polarity = 0;  // 0 = decrease, 1 = increase

  bool operator==(const Event&) const = default;
};

struct EventStream {
  std::size_t sensor_width = 0;
  std::size_t sensor_height = 0;
  std::vector<Event> events;  // non-decreasing t_us
};

struct Annotation {
  std::int64_t t_us = 0;
  double x = 0, y = 0;  // top-left corner
  double w = 0, h = 0;
  int class_id = 0;

  bool operator==(const Annotation&) const = default;
};

using AnnotationSet = std::vector<Annotation>;

// EVT-CSV: header "t_us,x,y,p", one event per row, ascending t_us.
EventStream read_events(const std::filesystem::path& path, std::size_t sensor_width, std::size_t sensor_height);
EventStream parse_events(const std::string& text, std::size_t sensor_width, std::size_t sensor_height);
void write_events(const std::filesystem::path& path, const EventStream& stream);
std::string format_events(const EventStream& stream);

// JSON-lines with keys t_us, x, y, w, h, class_id. Result is sorted by t_us.
AnnotationSet read_annotations(const std::filesystem::path& path, std::size_t num_classes);
AnnotationSet parse_annotations(const std::string& text, std::size_t num_classes);
void write_annotations(const std::filesystem::path& path, const AnnotationSet& annotations);
std::string format_annotations(const AnnotationSet& annotations);

struct SynthConfig {
  std::size_t sensor_width = 64;
  std::size_t sensor_height = 64;
  std::size_t num_classes = 2;
  std::vector<double> class_aspect{1.6, 0.5};  // w / h per class
  std::int64_t duration_ms = 200;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_size = 10.0;  // sqrt(w * h) in pixels
  double max_size = 22.0;
  double min_speed = 0.02;  // pixels per ms
  double max_speed = 0.08;
  double event_rate = 4.0;  // boundary events per object per ms
  double noise_rate = 0.5;  // background events per ms over the whole sensor
  std::int64_t annotation_period_ms = 20;
};

struct SynthSequence {
  EventStream events;
  AnnotationSet annotations;
};

SynthSequence synth_sequence(const SynthConfig& cfg, std::uint64_t seed);

struct EncodingConfig {
  std::int64_t window_ms = 100;
  std::size_t time_steps = 5;
  std::size_t micro_bins = 2;
};

// Binary [T, 2 * micro_bins, H, W] cube over [t_ref - window, t_ref).
struct VoxelCube {
  Tensor<std::uint8_t> data;
  std::int64_t t_ref_us = 0;
  std::int64_t window_ms = 0;

  std::size_t time_steps() const { return data.dim(0); }
};

VoxelCube encode_voxel_cube(const EventStream& stream, std::int64_t t_ref_us, const EncodingConfig& enc,
                            std::size_t out_h, std::size_t out_w);

// Position of one event inside a window, or false if it falls outside.
struct VoxelIndex {
  std::size_t step = 0;
  std::size_t micro_bin = 0;
};
bool voxel_slot(std::int64_t t_us, std::int64_t t_ref_us, const EncodingConfig& enc, VoxelIndex& slot);

}  // namespace scn
