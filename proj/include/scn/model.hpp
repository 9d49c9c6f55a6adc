#pragma once

// Spiking CenterNet: residual-free ResNet-18-style encoder, three upsampling
// decode blocks with channel-concatenated skips, and heatmap/size/offset heads.
// Time steps are unrolled into the batch dimension step-major, so every
// tensor is [T*N, C, H, W] and the per-step maps of sample n at step t live at
// batch index t*N + n.

#include <optional>
#include <string>
#include <vector>

#include "scn/neuron.hpp"

namespace scn {

inline constexpr std::size_t kOutputStride = 4;

struct ModelConfig {
  std::size_t in_channels = 4;
  std::size_t num_classes = 2;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::size_t blocks_per_stage = 2;
  std::size_t head_hidden = 64;
  std::size_t time_steps = 5;
  bool spiking = true;
  // hidden width of a decode block = round(expansion * input channels)
  double decoder_expansion = 1.75;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  PlifParams plif;

  void validate() const;
  // Channel widths of the full-size detector.
  static ModelConfig full_size();
};

template <typename T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;  // undefined when the conv has no bias
  Conv2dOptions options;
};

template <typename T>
struct BatchNormParams {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
struct ActivationParams {
  Var<T> w;  // PLIF leak parameter; undefined for ReLU
  PlifState<T> state;
};

// conv -> optional BN -> optional activation
template <typename T>
struct Unit {
  std::string name;
  ConvParams<T> conv;
  std::optional<BatchNormParams<T>> bn;
  std::optional<ActivationParams<T>> act;
  bool binary_input = false;  // input is spikes or the event cube
};

template <typename T>
struct DecodeBlock {
  Unit<T> pw;
  std::optional<Unit<T>> dw;  // absent once merged into pwl
  Unit<T> pwl;
};

template <typename T>
struct Head {
  Unit<T> hidden;
  Unit<T> out;
};

// Per-step head maps, each [T*N, ·, H/4, W/4].
template <typename T>
struct HeadOutputs {
  Var<T> heatmap;
  Var<T> size;
  Var<T> offset;
  std::size_t steps = 1;
};

enum class ParamKind { synaptic, neuron };

enum class BoundaryKind { activation, pool, upsample, concat };

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  ParamKind kind;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// Hooks for energy counting and binarity checks.
template <typename T>
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  virtual void on_conv(const Unit<T>& unit, const Tensor<T>& input, const Shape& output_shape) {
    (void)unit, (void)input, (void)output_shape;
  }
  // Tensors passed between layers: activation outputs, pooled maps, upsampled
  // maps and decoder concatenations.
  virtual void on_boundary(const std::string& name, BoundaryKind kind, const Tensor<T>& value) {
    (void)name, (void)kind, (void)value;
  }
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // Zeroes every membrane potential; call between independent samples.
  void reset_states();
  // Changes the number of unrolled steps expected by forward (ablation).
  void set_time_steps(std::size_t steps);

  // input: [T*N, in_channels, H, W] step-major, H and W divisible by 32.
  HeadOutputs<T> forward(const Var<T>& input, std::size_t steps, ForwardObserver<T>* observer = nullptr);

  std::vector<NamedParam<T>> parameters();
  std::vector<NamedBuffer<T>> buffers();
  std::size_t parameter_count(bool synaptic_only = false);

  std::vector<Unit<T>*> units();

  bool bn_fused() const { return bn_fused_; }
  bool dw_fused() const { return dw_fused_; }

  // Independent deep copy (fresh graph nodes, same values).
  Model clone() const;

  Unit<T> stem;
  std::vector<std::vector<std::pair<Unit<T>, Unit<T>>>> stages;  // [stage][block] = (conv1, conv2)
  std::vector<DecodeBlock<T>> decoder;
  Head<T> heatmap_head, size_head, offset_head;

 private:
  template <typename U>
  friend Model<U> fuse_conv_bn(const Model<U>& model);
  template <typename U>
  friend Model<U> fuse_dw_pw(const Model<U>& model);

  Var<T> run_unit(Unit<T>& unit, const Var<T>& x, std::size_t steps, ForwardObserver<T>* observer);
  Var<T> boundary(const std::string& name, BoundaryKind kind, Var<T> x, ForwardObserver<T>* observer);

  ModelConfig config_;
  bool training_ = false;
  bool bn_fused_ = false;
  bool dw_fused_ = false;
};

// Folds every BN into its preceding conv. Requires eval mode.
template <typename T>
Model<T> fuse_conv_bn(const Model<T>& model);

// Merges the depthwise / pointwise-linear pair of each decode block into one
// dense 3x3 conv. Requires fuse_conv_bn first.
template <typename T>
Model<T> fuse_dw_pw(const Model<T>& model);

// Both fusions, in order.
template <typename T>
Model<T> fuse_for_inference(const Model<T>& model);

// w' = w * g / sqrt(v + eps), b' = (b - m) * g / sqrt(v + eps) + beta.
template <typename T>
void fold_batch_norm(Unit<T>& unit, double eps);

}  // namespace scn
