#pragma once

// TOML run configuration. Every section and key is optional; unknown keys are
// config errors so typos do not silently fall back to defaults.
//
//   [synth] [splits] [encoding] [model] [model.plif] [loss] [train] [decode]

#include <filesystem>
#include <string>

#include "scn/dataset.hpp"
#include "scn/decode.hpp"
#include "scn/loss.hpp"
#include "scn/model.hpp"
#include "scn/trainer.hpp"

namespace scn {

struct RunConfig {
  SynthConfig synth;
  SplitSizes splits;
  EncodingConfig encoding;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DecodeConfig decode;

  void validate() const;
};

RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
RunConfig read_run_config(const std::filesystem::path& path);

// Canonical TOML with every key spelled out; parse(to_toml(c)) == c.
std::string to_toml(const RunConfig& config);

}  // namespace scn
