#pragma once

// On-disk synthetic datasets and annotation-aligned windows.
//
//   DIR/manifest.toml
//   DIR/{train,val,test}/seq_0000.csv    EVT-CSV events
//   DIR/{train,val,test}/seq_0000.jsonl  annotations

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scn/eventio.hpp"

namespace scn {

struct SplitSizes {
  std::size_t train = 20;
  std::size_t val = 5;
  std::size_t test = 5;
};

struct DatasetManifest {
  std::size_t sensor_width = 0;
  std::size_t sensor_height = 0;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  SplitSizes splits;
};

DatasetManifest read_manifest(const std::filesystem::path& dir);

inline const std::vector<std::string> kSplitNames{"train", "val", "test"};

// Seed of sequence `index` in `split`, derived from the dataset seed.
std::uint64_t sequence_seed(std::uint64_t seed, const std::string& split, std::size_t index);

// Generates every split into `dir` (which must exist) and writes the manifest.
void write_synth_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, const SplitSizes& splits,
                         std::uint64_t seed);

struct SequenceData {
  std::string name;
  EventStream events;
  AnnotationSet annotations;
};

std::vector<SequenceData> read_split(const std::filesystem::path& dir, const std::string& split);

// One window per distinct annotation timestamp, ending at that timestamp.
struct Window {
  std::size_t sequence = 0;
  std::int64_t t_ref_us = 0;
  AnnotationSet annotations;
};

struct Dataset {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t num_classes = 0;
  EncodingConfig encoding;
  std::vector<Window> windows;
  std::vector<Tensor<std::uint8_t>> cubes;  // [T, C, H, W], parallel to windows

  std::size_t size() const { return windows.size(); }
  std::vector<AnnotationSet> ground_truth() const;
};

Dataset make_dataset(const std::vector<SequenceData>& sequences, std::size_t num_classes, const EncodingConfig& enc);

Dataset load_dataset(const std::filesystem::path& dir, const std::string& split, const EncodingConfig& enc);

}  // namespace scn
