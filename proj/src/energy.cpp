#include "scn/energy.hpp"

namespace scn {

EnergyReport energy_estimate(const OpCounts& counts, const EnergyConstants& constants, std::size_t time_steps) {
  require(counts.acs_total >= 0.0 && counts.macs_total >= 0.0, ErrorKind::internal,
          "energy_estimate: negative operation counts");
  require(constants.e_ac_pj > 0.0 && constants.e_mac_pj > 0.0, ErrorKind::config,
          "energy_estimate: energy constants must be positive");
  EnergyReport r;
  r.time_steps = time_steps;
  r.counts = counts;
  // pJ -> mJ
  r.energy_per_step_mj = (constants.e_ac_pj * counts.acs_total + constants.e_mac_pj * counts.macs_total) * 1e-9;
  r.energy_total_mj = static_cast<double>(time_steps) * r.energy_per_step_mj;
  return r;
}

double firing_rate(double spikes, double slots) {
  require(spikes >= 0.0 && slots >= 0.0 && spikes <= slots, ErrorKind::internal, "firing_rate: bad spike counts");
  return slots > 0.0 ? spikes / slots : 0.0;
}

template <typename T>
void OpCounter<T>::on_conv(const Unit<T>& unit, const Tensor<T>& input, const Shape& output_shape) {
  const Shape& w = unit.conv.weight.shape();
  const double fan_in = static_cast<double>(w[1] * w[2] * w[3]);
  const double dense = static_cast<double>(shape_numel(output_shape)) * fan_in;
  auto [it, fresh] = layers_.try_emplace(unit.name);
  if (fresh) order_.push_back(unit.name);
  Acc& a = it->second;
  a.binary = unit.binary_input;
  a.dense += dense;
  if (unit.binary_input) {
    double ones = 0.0;
    for (const T v : input.values()) {
      require(v == T{0} || v == T{1}, ErrorKind::internal, unit.name + ": input marked binary is not");
      ones += static_cast<double>(v);
    }
    const double density = input.size() ? ones / static_cast<double>(input.size()) : 0.0;
    a.acs += dense * density;
    a.ones += ones;
    a.inputs += static_cast<double>(input.size());
  } else {
    a.macs += dense;
  }
}

template <typename T>
void OpCounter<T>::on_boundary(const std::string& name, BoundaryKind kind, const Tensor<T>& value) {
  if (kind != BoundaryKind::activation) return;
  auto [it, fresh] = spikes_.try_emplace(name, 0.0, 0.0);
  if (fresh) act_order_.push_back(name);
  double ones = 0.0;
  if (spiking_) {
    for (const T v : value.values()) ones += static_cast<double>(v);
  } else {
    ones = static_cast<double>(value.size());  // every unit transmits a real value each step
  }
  it->second.first += ones;
  it->second.second += static_cast<double>(value.size());
}

template <typename T>
OpCounts OpCounter<T>::finish(std::size_t slots) const {
  require(slots > 0, ErrorKind::usage, "OpCounter: no samples were counted");
  const double n = static_cast<double>(slots);
  OpCounts c;
  for (const auto& name : order_) {
    const Acc& a = layers_.at(name);
    LayerOps l{name, a.binary, a.dense / n, a.acs / n, a.macs / n, a.inputs > 0 ? a.ones / a.inputs : 0.0};
    c.dense_total += l.dense_ops;
    c.acs_total += l.acs;
    c.macs_total += l.macs;
    c.layers.push_back(l);
  }
  double ones = 0.0, total = 0.0;
  for (const auto& name : act_order_) {
    const auto& [o, t] = spikes_.at(name);
    c.layer_firing_rates.emplace_back(name, firing_rate(o, t));
    ones += o;
    total += t;
  }
  c.firing_rate = firing_rate(ones, total);
  return c;
}

template <typename T>
OpCounts count_ops(Model<T>& fused, const std::vector<Tensor<T>>& inputs) {
  require(fused.bn_fused() && fused.dw_fused(), ErrorKind::usage,
          "count_ops: model must be fused (conv-BN and depthwise-pointwise) before counting");
  NoGradGuard no_grad;
  const std::size_t steps = fused.config().time_steps;
  OpCounter<T> counter(fused.config().spiking);
  std::size_t slots = 0;
  for (const auto& x : inputs) {
    fused.reset_states();
    fused.forward(Var<T>(x), steps, &counter);
    slots += x.dim(0);
  }
  fused.reset_states();
  OpCounts c = counter.finish(slots);
  c.samples = slots / steps;
  return c;
}

template class OpCounter<float>;
template class OpCounter<double>;
template OpCounts count_ops(Model<float>&, const std::vector<Tensor<float>>&);
template OpCounts count_ops(Model<double>&, const std::vector<Tensor<double>>&);

}  // namespace scn
