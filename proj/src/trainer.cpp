#include "scn/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "scn/config.hpp"
#include "scn/rng.hpp"

namespace scn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void TrainConfig::validate() const {
  require(lr_min > 0.0 && lr0 >= lr_min, ErrorKind::config, "train: need lr0 >= lr_min > 0");
  require(clip_norm > 0.0, ErrorKind::config, "train: clip_norm must be positive");
  require(weight_decay >= 0.0, ErrorKind::config, "train: weight_decay must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0, ErrorKind::config,
          "train: betas must be in [0, 1) and adam_eps positive");
  require(batch_size >= 1, ErrorKind::config, "train: batch_size must be >= 1");
  require(spiking_gain > 0.0, ErrorKind::config, "train: spiking_gain must be positive");
}

template <typename T>
void init_params(Model<T>& model, std::uint64_t seed, double spiking_gain) {
  Rng rng(seed);
  const Unit<T>* finals[] = {&model.heatmap_head.out, &model.size_head.out, &model.offset_head.out};
  const double final_bias[] = {-2.19, 0.15, 0.5};
  for (Unit<T>* u : model.units()) {
    Tensor<T>& w = u->conv.weight.mutable_value();
    const auto* it = std::find(std::begin(finals), std::end(finals), u);
    if (it != std::end(finals)) {
      for (T& v : w.values()) v = static_cast<T>(rng.normal(0.0, 1e-3));
      if (u->conv.bias.defined()) u->conv.bias.mutable_value().fill(static_cast<T>(final_bias[it - std::begin(finals)]));
      continue;
    }
    const double fan_in = static_cast<double>(w.size() / w.dim(0));
    const double gain = !u->act ? 1.0 : (model.config().spiking ? spiking_gain : std::numbers::sqrt2);
    const double bound = gain * std::sqrt(3.0 / fan_in);
    for (T& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    if (u->conv.bias.defined()) u->conv.bias.mutable_value().fill(T{0});
    if (u->bn) {
      u->bn->gamma.mutable_value().fill(T{1});
      u->bn->beta.mutable_value().fill(T{0});
      u->bn->running_mean.fill(T{0});
      u->bn->running_var.fill(T{1});
    }
    if (u->act && u->act->w.defined()) u->act->w.mutable_value().fill(T{0});
  }
  model.reset_states();
}

template void init_params(Model<float>&, std::uint64_t, double);
template void init_params(Model<double>&, std::uint64_t, double);

// ---------------------------------------------------------------------------
// Optimization

namespace {

Tensor<float>* grad_of(NamedParam<float>& p) {
  Node<float>* n = p.var.node();
  return n->grad.shape() == n->value.shape() && !n->grad.empty() ? &n->grad : nullptr;
}

}  // namespace

void adamw_step(std::vector<NamedParam<float>>& params, OptimState& state, const AdamWParams& hp) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.var.shape());
      state.v.emplace_back(p.var.shape());
    }
  }
  require(state.m.size() == params.size() && state.v.size() == params.size(), ErrorKind::structural,
          "adamw_step: optimizer state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - hp.lr * hp.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float>& w = params[i].var.mutable_value();
    TensorF& m = state.m[i];
    TensorF& v = state.v[i];
    require(m.shape() == w.shape(), ErrorKind::structural,
            "adamw_step: moment shape mismatch for '" + params[i].name + "'");
    const Tensor<float>* g = grad_of(params[i]);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g ? static_cast<double>((*g)[k]) : 0.0;
      const double mk = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
      const double vk = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = hp.lr * (mk / bc1) / (std::sqrt(vk / bc2) + hp.eps);
      w[k] = static_cast<float>(static_cast<double>(w[k]) * decay - update);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
  if (total_steps == 0) return lr0;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_gradients(std::vector<NamedParam<float>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    if (const Tensor<float>* g = grad_of(p))
      for (float v : g->values()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& p : params)
      if (Tensor<float>* g = grad_of(p))
        for (float& v : g->values()) v *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Batching, evaluation

TensorF batch_input(const Dataset& data, const std::vector<std::size_t>& indices) {
  require(!indices.empty(), ErrorKind::usage, "batch_input: empty batch");
  const Shape& s = data.cubes.at(indices[0]).shape();
  const std::size_t steps = s[0], plane = s[1] * s[2] * s[3], n = indices.size();
  TensorF x({steps * n, s[1], s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b) {
    const auto& cube = data.cubes.at(indices[b]);
    require(cube.shape() == s, ErrorKind::dimension, "batch_input: cubes of different shapes");
    for (std::size_t t = 0; t < steps; ++t)
      std::transform(cube.data() + t * plane, cube.data() + (t + 1) * plane, x.data() + (t * n + b) * plane,
                     [](std::uint8_t v) { return static_cast<float>(v); });
  }
  return x;
}

TensorF batch_input(const Dataset& data, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return batch_input(data, idx);
}

std::vector<std::vector<Detection>> detect(Model<float>& fused, const Dataset& data, const DecodeConfig& cfg,
                                           std::size_t batch_size) {
  NoGradGuard no_grad;
  if (data.size() > 0 && fused.config().time_steps != data.encoding.time_steps)
    fused.set_time_steps(data.encoding.time_steps);
  std::vector<std::vector<Detection>> all;
  all.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - i);
    fused.reset_states();
    const auto out = fused.forward(VarF(batch_input(data, i, n)), data.encoding.time_steps);
    for (auto& dets : decode_outputs(out, cfg)) all.push_back(std::move(dets));
  }
  fused.reset_states();
  return all;
}

EvalReport evaluate(const Model<float>& model, const Dataset& data, const DecodeConfig& cfg, std::size_t batch_size) {
  Model<float> m = model.clone();
  m.set_training(false);
  Model<float> fused = fuse_for_inference(m);
  return coco_map(detect(fused, data, cfg, batch_size), data.ground_truth());
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

void check_teacher(Model<float>& student, Model<float>& teacher) {
  require(!teacher.config().spiking && teacher.config().time_steps == 1, ErrorKind::config,
          "teacher must be a non-spiking single-step model");
  auto sp = student.parameters();
  auto tp = teacher.parameters();
  std::vector<const NamedParam<float>*> ss, ts;
  for (const auto& p : sp)
    if (p.kind == ParamKind::synaptic) ss.push_back(&p);
  for (const auto& p : tp)
    if (p.kind == ParamKind::synaptic) ts.push_back(&p);
  require(ss.size() == ts.size(), ErrorKind::config, "teacher and student have different layer counts");
  for (std::size_t i = 0; i < ss.size(); ++i) {
    require(ss[i]->name == ts[i]->name && ss[i]->var.shape() == ts[i]->var.shape(), ErrorKind::config,
            "teacher shape mismatch at '" + ss[i]->name + "': " + shape_string(ss[i]->var.shape()) + " vs " +
                shape_string(ts[i]->var.shape()));
  }
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

TrainResult train_loop(Model<float>& student, Model<float>* teacher, const Dataset& train, const Dataset& val,
                       const TrainConfig& cfg, const LossConfig& loss_cfg, const DecodeConfig& decode_cfg,
                       const TrainOutputs& outputs) {
  cfg.validate();
  loss_cfg.validate();
  const bool kd = cfg.kd_enabled;
  require(!kd || teacher != nullptr, ErrorKind::config, "train: kd_enabled needs a teacher model");
  if (kd) {
    check_teacher(student, *teacher);
    teacher->set_training(false);
  }
  const std::size_t steps = student.config().time_steps;
  require(train.size() == 0 || train.encoding.time_steps == steps, ErrorKind::config,
          "train: dataset time steps differ from the model's");
  require(train.size() == 0 || (train.height % 32 == 0 && train.width % 32 == 0), ErrorKind::config,
          "train: sensor size must be a multiple of 32");

  std::ofstream log;
  if (!outputs.log.empty()) {
    log.open(outputs.log, std::ios::binary);
    require(static_cast<bool>(log), ErrorKind::io, "cannot write training log " + outputs.log.string());
  }
  auto params = student.parameters();
  OptimState optim;
  TrainResult result;
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  const std::size_t gh = train.height / kOutputStride, gw = train.width / kOutputStride;
  Rng order_rng(cfg.seed ^ 0x5ca1ab1e0ddba11ULL);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    student.set_training(true);
    const auto order = shuffled(train.size(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(train.size(), lo + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                         order.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<AnnotationSet> gt;
      for (std::size_t i : idx) gt.push_back(train.windows[i].annotations);
      const TensorF x = batch_input(train, idx);

      std::optional<TensorF> teacher_hm;
      if (kd) {
        NoGradGuard no_grad;
        teacher->reset_states();
        teacher_hm = teacher->forward(VarF(x), 1).heatmap.value();
      }
      student.reset_states();
      const HeadOutputs<float> out = student.forward(VarF(x), steps);
      const Targets<float> targets = render_targets<float>(gt, gh, gw, kOutputStride, train.num_classes);
      const LossTerms<float> terms = total_loss(out, targets, teacher_hm, loss_cfg);
      const double loss = static_cast<double>(terms.total.value()[0]);
      if (!std::isfinite(loss)) {
        fail(ErrorKind::internal, "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step) + " (focal " + std::to_string(terms.focal) + ", size " +
                                      std::to_string(terms.size) + ", offset " + std::to_string(terms.offset) +
                                      ", kd " + std::to_string(terms.kd) + ")");
      }
      backward(terms.total);
      const double grad_norm = clip_gradients(params, cfg.clip_norm);
      const double lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
      adamw_step(params, optim, {lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
      for (auto& p : params) p.var.zero_grad();

      result.step_losses.push_back(loss);
      epoch_loss += loss;
      if (log) {
        nlohmann::json j{{"epoch", epoch},       {"step", step},         {"lr", lr},
                         {"loss", loss},         {"focal", terms.focal}, {"size", terms.size},
                         {"offset", terms.offset}, {"kd", terms.kd},     {"grad_norm", grad_norm}};
        log << j.dump() << "\n";
      }
      ++step;
    }
    student.reset_states();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    if (val.size() > 0) {
      const EvalReport rep = evaluate(student, val, decode_cfg);
      rec.val_map = rep.map;
      rec.val_map_50 = rep.map_50;
    }
    result.epochs.push_back(rec);
    if (log) {
      nlohmann::json j{{"epoch", epoch}, {"train_loss", rec.train_loss}, {"val_map", rec.val_map},
                       {"val_map_50", rec.val_map_50}};
      log << j.dump() << "\n" << std::flush;
    }
    if (rec.val_map > result.best_map) {
      result.best_map = rec.val_map;
      result.best_epoch = epoch;
      if (!outputs.best_checkpoint.empty())
        save_checkpoint(outputs.best_checkpoint, student, outputs.config_snapshot, &optim);
    }
  }
  student.set_training(false);
  if (cfg.epochs == 0 && !outputs.best_checkpoint.empty())
    save_checkpoint(outputs.best_checkpoint, student, outputs.config_snapshot, &optim);
  if (!outputs.last_checkpoint.empty())
    save_checkpoint(outputs.last_checkpoint, student, outputs.config_snapshot, &optim);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

void put_tensor(std::string& out, const TensorF& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  TensorF get_tensor() {
    const auto rank = get<std::uint32_t>();
    require(rank <= 8, ErrorKind::format, "checkpoint: implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get<std::uint64_t>());
      require(d <= bytes_.size(), ErrorKind::format, "checkpoint: implausible tensor dimension");
      count *= d;
    }
    need(count * sizeof(float));
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return TensorF(std::move(shape), std::move(values));
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    require(n <= bytes_.size() - pos_, ErrorKind::format, "checkpoint: truncated file");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(Model<float>& model, const std::string& config_toml, const OptimState* optim) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, config_toml);
  auto params = model.parameters();
  auto buffers = model.buffers();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) {
    put_string(out, p.name);
    put_tensor(out, p.var.value());
  }
  for (const auto& b : buffers) {
    put_string(out, b.name);
    put_tensor(out, *b.tensor);
  }
  put<std::uint8_t>(out, optim ? 1 : 0);
  if (optim) {
    put<std::uint64_t>(out, optim->step);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(optim->m.size()));
    for (std::size_t i = 0; i < optim->m.size(); ++i) {
      put_tensor(out, optim->m[i]);
      put_tensor(out, optim->v[i]);
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const std::string& config_toml,
                     const OptimState* optim) {
  const std::string bytes = serialize_checkpoint(model, config_toml, optim);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "failed writing checkpoint " + path.string());
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  require(bytes.size() >= sizeof(kCheckpointMagic) &&
              std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) == 0,
          ErrorKind::format, "checkpoint: bad magic (not an SCNCKPT1 file)");
  const std::string body = bytes.substr(sizeof(kCheckpointMagic));
  Reader r(body);
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::format,
          "checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_toml = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    ck.tensors.push_back({std::move(name), r.get_tensor()});
  }
  if (r.get<std::uint8_t>() != 0) {
    OptimState st;
    st.step = r.get<std::uint64_t>();
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      st.m.push_back(r.get_tensor());
      st.v.push_back(r.get_tensor());
    }
    ck.optim = std::move(st);
  }
  require(r.done(), ErrorKind::format, "checkpoint: trailing bytes");
  return ck;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read checkpoint " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_checkpoint(os.str());
}

void load_weights(Model<float>& model, const Checkpoint& ckpt) {
  std::map<std::string, const TensorF*> table;
  for (const auto& t : ckpt.tensors) table[t.name] = &t.value;
  std::size_t used = 0;
  auto take = [&](const std::string& name, const Shape& shape) -> const TensorF& {
    const auto it = table.find(name);
    require(it != table.end(), ErrorKind::structural, "checkpoint lacks parameter '" + name + "'");
    require(it->second->shape() == shape, ErrorKind::structural,
            "checkpoint parameter '" + name + "' has shape " + shape_string(it->second->shape()) + ", model expects " +
                shape_string(shape));
    ++used;
    return *it->second;
  };
  for (auto& p : model.parameters()) p.var.mutable_value() = take(p.name, p.var.shape());
  for (auto& b : model.buffers()) *b.tensor = take(b.name, b.tensor->shape());
  require(used == table.size(), ErrorKind::structural,
          "checkpoint has " + std::to_string(table.size() - used) + " tensors the model does not use");
  model.reset_states();
}

Model<float> load_model(const std::filesystem::path& path, RunConfig* config_out) {
  const Checkpoint ck = read_checkpoint(path);
  RunConfig cfg = parse_run_config(ck.config_toml, path.string() + " (embedded config)");
  Model<float> model(cfg.model);
  load_weights(model, ck);
  if (config_out) *config_out = std::move(cfg);
  return model;
}

}  // namespace scn
