#include "scn/model.hpp"

#include <cmath>

namespace scn {

void ModelConfig::validate() const {
  require(in_channels >= 1 && num_classes >= 1, ErrorKind::config, "model: in_channels and num_classes must be >= 1");
  require(stage_channels.size() == 4, ErrorKind::config,
          "model: stage_channels must list exactly 4 widths, got " + std::to_string(stage_channels.size()));
  for (std::size_t c : stage_channels) require(c >= 1, ErrorKind::config, "model: stage width must be >= 1");
  require(stem_channels >= 1 && head_hidden >= 1, ErrorKind::config, "model: stem and head widths must be >= 1");
  require(blocks_per_stage >= 1, ErrorKind::config, "model: blocks_per_stage must be >= 1");
  require(time_steps >= 1, ErrorKind::config, "model: time_steps must be >= 1");
  require(decoder_expansion > 0.0, ErrorKind::config, "model: decoder_expansion must be positive");
  require(bn_eps >= 0.0, ErrorKind::config, "model: bn_eps must be non-negative");
  require(bn_momentum >= 0.0 && bn_momentum <= 1.0, ErrorKind::config, "model: bn_momentum must be in [0, 1]");
  require(plif.surrogate_alpha > 0.0, ErrorKind::config, "model: surrogate alpha must be positive");
}

ModelConfig ModelConfig::full_size() {
  ModelConfig c;
  c.stem_channels = 64;
  c.stage_channels = {64, 128, 256, 512};
  c.head_hidden = 64;
  return c;
}

namespace {

struct UnitSpec {
  std::string name;
  std::size_t cin, cout, kernel, stride, padding, groups;
  bool bias, bn, act, binary_input;
};

template <typename T>
Unit<T> make_unit(const UnitSpec& s, bool spiking) {
  Unit<T> u;
  u.name = s.name;
  u.conv.weight = Var<T>::parameter(Tensor<T>({s.cout, s.cin / s.groups, s.kernel, s.kernel}));
  if (s.bias) u.conv.bias = Var<T>::parameter(Tensor<T>({s.cout}));
  u.conv.options = {s.stride, s.padding, s.groups};
  if (s.bn) {
    u.bn = BatchNormParams<T>{Var<T>::parameter(Tensor<T>({s.cout}, T{1})), Var<T>::parameter(Tensor<T>({s.cout})),
                              Tensor<T>({s.cout}), Tensor<T>({s.cout}, T{1})};
  }
  if (s.act) {
    u.act.emplace();
    if (spiking) u.act->w = Var<T>::parameter(Tensor<T>({1}));
  }
  u.binary_input = s.binary_input;
  return u;
}

template <typename T>
Var<T> deep_copy(const Var<T>& v) {
  return v.defined() ? Var<T>(v.value(), v.requires_grad()) : Var<T>();
}

template <typename T>
void deepen(Unit<T>& u) {
  u.conv.weight = deep_copy(u.conv.weight);
  u.conv.bias = deep_copy(u.conv.bias);
  if (u.bn) {
    u.bn->gamma = deep_copy(u.bn->gamma);
    u.bn->beta = deep_copy(u.bn->beta);
  }
  if (u.act) u.act->w = deep_copy(u.act->w);
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const bool sp = config_.spiking;
  const auto& ch = config_.stage_channels;
  stem = make_unit<T>({"stem", config_.in_channels, config_.stem_channels, 7, 2, 3, 1, false, true, true, true}, sp);

  std::size_t cin = config_.stem_channels;
  stages.resize(4);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string base = "enc" + std::to_string(s + 1) + "." + std::to_string(b);
      auto c1 = make_unit<T>({base + ".conv1", cin, ch[s], 3, stride, 1, 1, false, true, true, sp}, sp);
      auto c2 = make_unit<T>({base + ".conv2", ch[s], ch[s], 3, 1, 1, 1, false, true, true, sp}, sp);
      stages[s].emplace_back(std::move(c1), std::move(c2));
      cin = ch[s];
    }
  }

  std::size_t deep = ch[3];
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t skip = ch[2 - i];
    const std::size_t in = deep + skip;
    const auto hidden = static_cast<std::size_t>(std::max(1.0, std::round(config_.decoder_expansion * double(in))));
    const std::string base = "dec" + std::to_string(i + 1);
    DecodeBlock<T> blk{make_unit<T>({base + ".pw", in, hidden, 1, 1, 0, 1, false, true, true, sp}, sp),
                       make_unit<T>({base + ".dw", hidden, hidden, 3, 1, 1, hidden, false, true, false, sp}, sp),
                       make_unit<T>({base + ".pwl", hidden, skip, 1, 1, 0, 1, false, true, true, false}, sp)};
    decoder.push_back(std::move(blk));
    deep = skip;
  }

  auto head = [&](const std::string& name, std::size_t outputs) {
    return Head<T>{
        make_unit<T>({"head." + name + ".hidden", ch[0], config_.head_hidden, 3, 1, 1, 1, true, false, true, sp}, sp),
        make_unit<T>({"head." + name + ".out", config_.head_hidden, outputs, 1, 1, 0, 1, true, false, false, sp}, sp)};
  };
  heatmap_head = head("heatmap", config_.num_classes);
  size_head = head("size", 2);
  offset_head = head("offset", 2);
}

template <typename T>
std::vector<Unit<T>*> Model<T>::units() {
  std::vector<Unit<T>*> out{&stem};
  for (auto& stage : stages)
    for (auto& [c1, c2] : stage) {
      out.push_back(&c1);
      out.push_back(&c2);
    }
  for (auto& blk : decoder) {
    out.push_back(&blk.pw);
    if (blk.dw) out.push_back(&*blk.dw);
    out.push_back(&blk.pwl);
  }
  for (Head<T>* h : {&heatmap_head, &size_head, &offset_head}) {
    out.push_back(&h->hidden);
    out.push_back(&h->out);
  }
  return out;
}

template <typename T>
void Model<T>::reset_states() {
  for (Unit<T>* u : units())
    if (u->act) u->act->state.reset();
}

template <typename T>
void Model<T>::set_time_steps(std::size_t steps) {
  require(steps >= 1, ErrorKind::config, "model: time_steps must be >= 1");
  config_.time_steps = steps;
  reset_states();
}

template <typename T>
std::vector<NamedParam<T>> Model<T>::parameters() {
  std::vector<NamedParam<T>> out;
  for (Unit<T>* u : units()) {
    out.push_back({u->name + ".conv.weight", u->conv.weight, ParamKind::synaptic});
    if (u->conv.bias.defined()) out.push_back({u->name + ".conv.bias", u->conv.bias, ParamKind::synaptic});
    if (u->bn) {
      out.push_back({u->name + ".bn.gamma", u->bn->gamma, ParamKind::synaptic});
      out.push_back({u->name + ".bn.beta", u->bn->beta, ParamKind::synaptic});
    }
    if (u->act && u->act->w.defined()) out.push_back({u->name + ".act.w", u->act->w, ParamKind::neuron});
  }
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Model<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  for (Unit<T>* u : units()) {
    if (!u->bn) continue;
    out.push_back({u->name + ".bn.running_mean", &u->bn->running_mean});
    out.push_back({u->name + ".bn.running_var", &u->bn->running_var});
  }
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count(bool synaptic_only) {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (!synaptic_only || p.kind == ParamKind::synaptic) n += p.var.size();
  return n;
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model copy = *this;
  for (Unit<T>* u : copy.units()) deepen(*u);
  return copy;
}

template <typename T>
Var<T> Model<T>::boundary(const std::string& name, BoundaryKind kind, Var<T> x, ForwardObserver<T>* observer) {
  if (observer) observer->on_boundary(name, kind, x.value());
  return x;
}

template <typename T>
Var<T> Model<T>::run_unit(Unit<T>& unit, const Var<T>& x, std::size_t steps, ForwardObserver<T>* observer) {
  std::optional<Var<T>> bias;
  if (unit.conv.bias.defined()) bias = unit.conv.bias;
  Var<T> y = conv2d(x, unit.conv.weight, bias, unit.conv.options);
  if (observer) observer->on_conv(unit, x.value(), y.shape());
  if (unit.bn) {
    y = batch_norm(y, unit.bn->gamma, unit.bn->beta, unit.bn->running_mean, unit.bn->running_var,
                   {config_.bn_eps, config_.bn_momentum, training_});
  }
  if (!unit.act) return y;
  y = config_.spiking ? plif_multistep(y, unit.act->w, unit.act->state, steps, config_.plif) : relu(y);
  return boundary(unit.name, BoundaryKind::activation, y, observer);
}

template <typename T>
HeadOutputs<T> Model<T>::forward(const Var<T>& input, std::size_t steps, ForwardObserver<T>* observer) {
  require(steps == config_.time_steps, ErrorKind::usage,
          "model expects " + std::to_string(config_.time_steps) + " time steps, input has " + std::to_string(steps));
  const Shape& s = input.shape();
  require(s.size() == 4 && s[1] == config_.in_channels && s[0] % steps == 0 && s[0] > 0, ErrorKind::dimension,
          "model: input " + shape_string(s) + " is not [T*N, " + std::to_string(config_.in_channels) + ", H, W]");
  require(s[2] % 32 == 0 && s[3] % 32 == 0, ErrorKind::dimension,
          "model: input height and width must be multiples of 32, got " + shape_string(s));

  Var<T> x = run_unit(stem, input, steps, observer);
  x = boundary("stem.pool", BoundaryKind::pool, max_pool2d(x, 3, 2, 1), observer);
  std::vector<Var<T>> features;
  for (auto& stage : stages) {
    for (auto& [c1, c2] : stage) x = run_unit(c2, run_unit(c1, x, steps, observer), steps, observer);
    features.push_back(x);
  }

  Var<T> d = features[3];
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    auto& blk = decoder[i];
    const std::string base = "dec" + std::to_string(i + 1);
    Var<T> up = boundary(base + ".up", BoundaryKind::upsample, upsample_nearest2x(d), observer);
    Var<T> cat = boundary(base + ".cat", BoundaryKind::concat, concat_channels(up, features[2 - i]), observer);
    Var<T> h = run_unit(blk.pw, cat, steps, observer);
    if (blk.dw) h = run_unit(*blk.dw, h, steps, observer);
    d = run_unit(blk.pwl, h, steps, observer);
  }

  auto head = [&](Head<T>& h) { return run_unit(h.out, run_unit(h.hidden, d, steps, observer), steps, observer); };
  HeadOutputs<T> out;
  out.heatmap = head(heatmap_head);
  out.size = head(size_head);
  out.offset = head(offset_head);
  out.steps = steps;
  return out;
}

// --- inference fusion ------------------------------------------------------------

template <typename T>
void fold_batch_norm(Unit<T>& unit, double eps) {
  require(unit.bn.has_value(), ErrorKind::structural, unit.name + ": no batch norm to fold");
  require(unit.conv.weight.defined() && unit.conv.weight.shape().size() == 4 &&
              unit.conv.weight.shape()[0] == unit.bn->gamma.size(),
          ErrorKind::structural, unit.name + ": batch norm is not preceded by a matching conv");
  const auto& bn = *unit.bn;
  const std::size_t cout = bn.gamma.size();
  const std::size_t per_out = unit.conv.weight.size() / cout;
  Tensor<T> w = unit.conv.weight.value();
  Tensor<T> b({cout});
  for (std::size_t o = 0; o < cout; ++o) {
    const double var = static_cast<double>(bn.running_var[o]) + eps;
    const double scale = var > 0.0 ? static_cast<double>(bn.gamma.value()[o]) / std::sqrt(var) : 0.0;
    for (std::size_t i = 0; i < per_out; ++i) w[o * per_out + i] = static_cast<T>(static_cast<double>(w[o * per_out + i]) * scale);
    const double b0 = unit.conv.bias.defined() ? static_cast<double>(unit.conv.bias.value()[o]) : 0.0;
    b[o] = static_cast<T>((b0 - static_cast<double>(bn.running_mean[o])) * scale + static_cast<double>(bn.beta.value()[o]));
  }
  unit.conv.weight = Var<T>(std::move(w), true);
  unit.conv.bias = Var<T>(std::move(b), true);
  unit.bn.reset();
}

template <typename T>
Model<T> fuse_conv_bn(const Model<T>& model) {
  require(!model.training(), ErrorKind::usage, "fuse_conv_bn: model must be in eval mode");
  require(!model.bn_fused_, ErrorKind::ordering, "fuse_conv_bn: batch norms are already folded");
  Model<T> m = model.clone();
  for (Unit<T>* u : m.units())
    if (u->bn) fold_batch_norm(*u, m.config_.bn_eps);
  m.bn_fused_ = true;
  return m;
}

template <typename T>
Model<T> fuse_dw_pw(const Model<T>& model) {
  require(model.bn_fused_, ErrorKind::ordering, "fuse_dw_pw: fold batch norms (fuse_conv_bn) first");
  require(!model.dw_fused_, ErrorKind::ordering, "fuse_dw_pw: already merged");
  Model<T> m = model.clone();
  for (auto& blk : m.decoder) {
    Unit<T>& dw = *blk.dw;
    Unit<T>& pwl = blk.pwl;
    const Tensor<T>& kd = dw.conv.weight.value();  // [H, 1, kh, kw]
    const Tensor<T>& kp = pwl.conv.weight.value();  // [O, H, 1, 1]
    const std::size_t hidden = kd.dim(0), kh = kd.dim(2), kw = kd.dim(3), outs = kp.dim(0);
    require(kp.dim(1) == hidden && kp.dim(2) == 1 && kp.dim(3) == 1 && kd.dim(1) == 1, ErrorKind::structural,
            pwl.name + ": not a depthwise / pointwise pair");
    Tensor<T> k({outs, hidden, kh, kw});
    Tensor<T> b({outs});
    for (std::size_t o = 0; o < outs; ++o) {
      double acc = pwl.conv.bias.defined() ? static_cast<double>(pwl.conv.bias.value()[o]) : 0.0;
      for (std::size_t i = 0; i < hidden; ++i) {
        const T p = kp[o * hidden + i];
        for (std::size_t r = 0; r < kh * kw; ++r) k[(o * hidden + i) * kh * kw + r] = p * kd[i * kh * kw + r];
        if (dw.conv.bias.defined()) acc += static_cast<double>(p) * static_cast<double>(dw.conv.bias.value()[i]);
      }
      b[o] = static_cast<T>(acc);
    }
    pwl.conv.weight = Var<T>(std::move(k), true);
    pwl.conv.bias = Var<T>(std::move(b), true);
    pwl.conv.options = {dw.conv.options.stride, dw.conv.options.padding, 1};
    pwl.binary_input = dw.binary_input;
    blk.dw.reset();
  }
  m.dw_fused_ = true;
  return m;
}

template <typename T>
Model<T> fuse_for_inference(const Model<T>& model) {
  return fuse_dw_pw(fuse_conv_bn(model));
}

template class Model<float>;
template class Model<double>;
template Model<float> fuse_conv_bn(const Model<float>&);
template Model<double> fuse_conv_bn(const Model<double>&);
template Model<float> fuse_dw_pw(const Model<float>&);
template Model<double> fuse_dw_pw(const Model<double>&);
template Model<float> fuse_for_inference(const Model<float>&);
template Model<double> fuse_for_inference(const Model<double>&);
template void fold_batch_norm(Unit<float>&, double);
template void fold_batch_norm(Unit<double>&, double);

}  // namespace scn
