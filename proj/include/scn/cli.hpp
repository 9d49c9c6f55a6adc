#pragma once

// The `scn` command-line tool and the pieces the acceptance harness reuses.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "scn/config.hpp"
#include "scn/energy.hpp"
#include "scn/trainer.hpp"

namespace scn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Git blob id: SHA-1 of "blob <size>\0" + content, hex encoded.
std::string git_blob_sha1(const std::string& bytes);
std::string file_hash(const std::filesystem::path& path);
// SHA-1 over the sorted "<relative path> <blob id>\n" lines of every regular
// file below `dir`, skipping files named in `exclude`.
std::string tree_hash(const std::filesystem::path& dir, const std::vector<std::string>& exclude = {});

struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::string config_toml;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
  std::vector<std::string> outputs;

  // Combined hash over the input hashes, in order.
  std::string input_hash() const;
  nlohmann::json to_json() const;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const EnergyReport& report);
nlohmann::json to_json(const std::vector<Detection>& detections);

// Evaluation of a checkpoint's model with the cube encoding overridden.
EvalReport eval_model(const Model<float>& model, const RunConfig& cfg, const std::filesystem::path& data,
                      const std::string& split, std::size_t time_steps, std::int64_t window_ms);

struct AblationRow {
  std::size_t time_steps = 0;
  std::int64_t window_ms = 0;
  double map = 0.0;
  double map_50 = 0.0;
};

enum class AblationMode { fixed, variable };

// fixed: every T sees the last 100 ms; variable: T steps of 20 ms each.
std::vector<AblationRow> ablate(const Model<float>& model, const RunConfig& cfg, const std::filesystem::path& data,
                                const std::string& split, std::size_t first, std::size_t last, AblationMode mode);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_svg(const std::vector<AblationRow>& rows, const std::string& title);

// 8-bit binary PGM, row-major.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

int run(int argc, char** argv);

}  // namespace scn::cli
