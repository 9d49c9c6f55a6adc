#pragma once

// Initialization, AdamW with cosine annealing, global-norm clipping, the BPTT
// training loop and checkpoint files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scn/dataset.hpp"
#include "scn/decode.hpp"
#include "scn/loss.hpp"
#include "scn/model.hpp"

namespace scn {

struct TrainConfig {
  std::size_t epochs = 50;
  double lr0 = 1e-4;
  double lr_min = 1e-5;
  double clip_norm = 1.0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  bool kd_enabled = false;
  // Kaiming gain for layers feeding a PLIF neuron (ReLU layers use sqrt(2)).
  double spiking_gain = 1.0;

  void validate() const;
};

// Kaiming-uniform (fan-in) conv weights and zero biases; the last conv of each
// head is Normal(0, 1e-3) with biases -2.19 (heatmap), 0.15 (size) and 0.5
// (offset). PLIF leak parameters start at 0 (k = 0.5).
template <typename T>
void init_params(Model<T>& model, std::uint64_t seed, double spiking_gain = 1.0);

struct OptimState {
  std::uint64_t step = 0;
  std::vector<TensorF> m;  // parallel to Model::parameters()
  std::vector<TensorF> v;
};

struct AdamWParams {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled decay p *= 1 - lr*wd, then the bias-corrected Adam update.
// Parameters without a gradient count as zero gradient.
void adamw_step(std::vector<NamedParam<float>>& params, OptimState& state, const AdamWParams& hp);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min);

// Scales every gradient by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
double clip_gradients(std::vector<NamedParam<float>>& params, double max_norm);

// Everything a training run produces besides checkpoints.
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_map = 0.0;
  double val_map_50 = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;  // total loss per optimizer step
  double best_map = -1.0;
  std::size_t best_epoch = 0;
};

struct TrainOutputs {
  std::filesystem::path best_checkpoint;  // empty: not written
  std::filesystem::path last_checkpoint;
  std::filesystem::path log;  // JSON lines
  std::string config_snapshot;  // TOML stored in every checkpoint
};

// Student and teacher see the same batched cube: the student unrolls it over
// its T steps, the teacher treats every step as an independent single-step
// image. `teacher` must be non-spiking, single-step and isomorphic.
TrainResult train_loop(Model<float>& student, Model<float>* teacher, const Dataset& train, const Dataset& val,
                       const TrainConfig& cfg, const LossConfig& loss_cfg, const DecodeConfig& decode_cfg,
                       const TrainOutputs& outputs);

// Fuses a copy of the model and evaluates it on every window of `data`.
EvalReport evaluate(const Model<float>& model, const Dataset& data, const DecodeConfig& cfg,
                    std::size_t batch_size = 8);

// Raw per-window detections of the fused model.
std::vector<std::vector<Detection>> detect(Model<float>& fused, const Dataset& data, const DecodeConfig& cfg,
                                           std::size_t batch_size = 8);

// Step-major [T*N, C, H, W] network input from cubes [first, first + count).
TensorF batch_input(const Dataset& data, std::size_t first, std::size_t count);
TensorF batch_input(const Dataset& data, const std::vector<std::size_t>& indices);

// Checkpoint file: magic "SCNCKPT1", u32 version, config TOML, then a named
// table of float32 tensors (parameters, then BN running statistics), then an
// optional optimizer section. Integers are little-endian.
inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'N', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  TensorF value;
};

struct Checkpoint {
  std::string config_toml;
  std::vector<NamedTensor> tensors;
  std::optional<OptimState> optim;
};

void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const std::string& config_toml,
                     const OptimState* optim = nullptr);
std::string serialize_checkpoint(Model<float>& model, const std::string& config_toml,
                                 const OptimState* optim = nullptr);

Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(const std::string& bytes);

// Copies the checkpoint tensors into `model`; the first parameter or buffer
// the file lacks is reported as a structural error.
void load_weights(Model<float>& model, const Checkpoint& ckpt);

struct RunConfig;

// Builds the model described by the stored config and loads its weights.
Model<float> load_model(const std::filesystem::path& path, RunConfig* config_out = nullptr);

}  // namespace scn
