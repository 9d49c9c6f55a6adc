#pragma once

// Synaptic-operation accounting: accumulates (ACs) for layers fed by binary
// inputs and multiply-accumulates (MACs) for real-valued inputs.

#include <map>
#include <string>
#include <vector>

#include "scn/model.hpp"

namespace scn {

struct EnergyConstants {
  double e_ac_pj = 0.9;
  double e_mac_pj = 4.6;
};

struct LayerOps {
  std::string name;
  bool binary_input = false;
  double dense_ops = 0.0;      // output elements * fan-in, per sample and step
  double acs = 0.0;            // dense ops * input spike density
  double macs = 0.0;           // dense ops for real-valued input
  double input_density = 0.0;  // fraction of ones in the input (binary inputs)
};

struct OpCounts {
  std::vector<LayerOps> layers;  // model order
  double dense_total = 0.0;
  double acs_total = 0.0;   // O_AC per step
  double macs_total = 0.0;  // O_MAC per step
  double firing_rate = 0.0;
  std::vector<std::pair<std::string, double>> layer_firing_rates;
  std::size_t samples = 0;
};

struct EnergyReport {
  std::size_t time_steps = 1;
  OpCounts counts;
  double energy_per_step_mj = 0.0;
  double energy_total_mj = 0.0;
};

// energy per step = e_ac * O_AC + e_mac * O_MAC; spike density is already part
// of the measured ACs, so no separate firing-rate factor is applied.
EnergyReport energy_estimate(const OpCounts& counts, const EnergyConstants& constants, std::size_t time_steps);

// Total spikes over total neuron-step slots.
double firing_rate(double spikes, double slots);

// Observer that accumulates counts over forward passes of a fused model.
template <typename T>
class OpCounter : public ForwardObserver<T> {
 public:
  explicit OpCounter(bool spiking) : spiking_(spiking) {}

  void on_conv(const Unit<T>& unit, const Tensor<T>& input, const Shape& output_shape) override;
  void on_boundary(const std::string& name, BoundaryKind kind, const Tensor<T>& value) override;

  // Per-sample, per-step averages over everything seen so far; `slots` is the
  // number of (sample, step) pairs processed.
  OpCounts finish(std::size_t slots) const;

 private:
  struct Acc {
    bool binary = false;
    double dense = 0.0, acs = 0.0, macs = 0.0, ones = 0.0, inputs = 0.0;
  };
  bool spiking_;
  std::vector<std::string> order_;
  std::map<std::string, Acc> layers_;
  std::vector<std::string> act_order_;
  std::map<std::string, std::pair<double, double>> spikes_;  // name -> (ones, elements)
};

// Runs the fused model over `inputs` ([T*N, C, H, W] each, T = model steps)
// and returns per-step counts. Unfused models are rejected.
template <typename T>
OpCounts count_ops(Model<T>& fused, const std::vector<Tensor<T>>& inputs);

}  // namespace scn
