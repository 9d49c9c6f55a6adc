#include "scn/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

#include <toml.hpp>

namespace scn {

namespace {

struct Field {
  std::string key;
  std::function<void(const toml::node&, const std::string&)> read;
  std::function<void(toml::table&)> write;
};

[[noreturn]] void bad_type(const std::string& where, const char* expected) {
  fail(ErrorKind::config, where + ": expected " + expected);
}

template <typename V>
V scalar_from(const toml::node& node, const std::string& where) {
  if constexpr (std::is_same_v<V, bool>) {
    if (!node.is_boolean()) bad_type(where, "a boolean");
    return *node.value<bool>();
  } else if constexpr (std::is_floating_point_v<V>) {
    if (!node.is_number()) bad_type(where, "a number");
    return static_cast<V>(*node.value<double>());
  } else {
    if (!node.is_integer()) bad_type(where, "an integer");
    const std::int64_t v = *node.value<std::int64_t>();
    if constexpr (std::is_unsigned_v<V>) {
      if (v < 0) fail(ErrorKind::config, where + ": must be non-negative");
    }
    return static_cast<V>(v);
  }
}

template <typename V>
auto to_node(V v) {
  if constexpr (std::is_same_v<V, bool> || std::is_floating_point_v<V>) {
    return v;
  } else {
    return static_cast<std::int64_t>(v);
  }
}

template <typename V>
Field field(std::string key, V& ref) {
  Field f;
  f.key = key;
  if constexpr (requires { typename V::value_type; }) {
    using E = typename V::value_type;
    f.read = [&ref](const toml::node& node, const std::string& where) {
      const toml::array* arr = node.as_array();
      if (!arr) bad_type(where, "an array");
      V out;
      for (std::size_t i = 0; i < arr->size(); ++i)
        out.push_back(scalar_from<E>(*arr->get(i), where + "[" + std::to_string(i) + "]"));
      ref = std::move(out);
    };
    f.write = [key, &ref](toml::table& t) {
      toml::array arr;
      for (const E& e : ref) arr.push_back(to_node(e));
      t.insert_or_assign(key, std::move(arr));
    };
  } else {
    f.read = [&ref](const toml::node& node, const std::string& where) { ref = scalar_from<V>(node, where); };
    f.write = [key, &ref](toml::table& t) { t.insert_or_assign(key, to_node(ref)); };
  }
  return f;
}

struct Section {
  std::string name;  // dotted path
  std::vector<Field> fields;
};

std::vector<Section> sections(RunConfig& c) {
  auto& s = c.synth;
  auto& m = c.model;
  auto& t = c.train;
  return {
      {"synth",
       {field("sensor_width", s.sensor_width), field("sensor_height", s.sensor_height),
        field("num_classes", s.num_classes), field("class_aspect", s.class_aspect), field("duration_ms", s.duration_ms),
        field("min_objects", s.min_objects), field("max_objects", s.max_objects), field("min_size", s.min_size),
        field("max_size", s.max_size), field("min_speed", s.min_speed), field("max_speed", s.max_speed),
        field("event_rate", s.event_rate), field("noise_rate", s.noise_rate),
        field("annotation_period_ms", s.annotation_period_ms)}},
      {"splits", {field("train", c.splits.train), field("val", c.splits.val), field("test", c.splits.test)}},
      {"encoding",
       {field("window_ms", c.encoding.window_ms), field("time_steps", c.encoding.time_steps),
        field("micro_bins", c.encoding.micro_bins)}},
      {"model",
       {field("in_channels", m.in_channels), field("num_classes", m.num_classes),
        field("stem_channels", m.stem_channels), field("stage_channels", m.stage_channels),
        field("blocks_per_stage", m.blocks_per_stage), field("head_hidden", m.head_hidden),
        field("time_steps", m.time_steps), field("spiking", m.spiking), field("decoder_expansion", m.decoder_expansion),
        field("bn_eps", m.bn_eps), field("bn_momentum", m.bn_momentum)}},
      {"model.plif",
       {field("threshold", m.plif.threshold), field("v_reset", m.plif.v_reset),
        field("surrogate_alpha", m.plif.surrogate_alpha), field("detach_reset", m.plif.detach_reset),
        field("relaxed", m.plif.relaxed)}},
      {"loss",
       {field("alpha_kd", c.loss.alpha_kd), field("focal_alpha", c.loss.focal_alpha),
        field("focal_beta", c.loss.focal_beta), field("size_weight", c.loss.size_weight),
        field("offset_weight", c.loss.offset_weight)}},
      {"train",
       {field("epochs", t.epochs), field("lr0", t.lr0), field("lr_min", t.lr_min), field("clip_norm", t.clip_norm),
        field("weight_decay", t.weight_decay), field("beta1", t.beta1), field("beta2", t.beta2),
        field("adam_eps", t.adam_eps), field("batch_size", t.batch_size), field("seed", t.seed),
        field("kd_enabled", t.kd_enabled), field("spiking_gain", t.spiking_gain)}},
      {"decode", {field("max_dets", c.decode.max_dets), field("score_threshold", c.decode.score_threshold)}},
  };
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  train.validate();
  require(encoding.window_ms > 0 && encoding.time_steps >= 1 && encoding.micro_bins >= 1, ErrorKind::config,
          "encoding: window_ms, time_steps and micro_bins must be positive");
  require(encoding.time_steps == model.time_steps, ErrorKind::config,
          "encoding.time_steps (" + std::to_string(encoding.time_steps) + ") must equal model.time_steps (" +
              std::to_string(model.time_steps) + ")");
  require(2 * encoding.micro_bins == model.in_channels, ErrorKind::config,
          "model.in_channels must be 2 * encoding.micro_bins");
  require(synth.num_classes == model.num_classes, ErrorKind::config,
          "synth.num_classes must equal model.num_classes");
  require(synth.sensor_width % 32 == 0 && synth.sensor_height % 32 == 0 && synth.sensor_width > 0 &&
              synth.sensor_height > 0,
          ErrorKind::config, "synth: sensor size must be a positive multiple of 32");
  require(decode.max_dets >= 1, ErrorKind::config, "decode.max_dets must be >= 1");
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  toml::table tbl;
  try {
    tbl = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << origin << ":" << e.source().begin.line << ": " << e.description();
    fail(ErrorKind::parse, os.str());
  }
  RunConfig c;
  auto secs = sections(c);
  std::set<std::string> known_tables;
  for (const auto& sec : secs) known_tables.insert(sec.name);

  for (const auto& sec : secs) {
    const toml::node* node = tbl.at_path(sec.name).node();
    if (!node) continue;
    const toml::table* t = node->as_table();
    require(t != nullptr, ErrorKind::config, origin + ": [" + sec.name + "] must be a table");
    for (const auto& [k, v] : *t) {
      const std::string key(k.str());
      if (known_tables.count(sec.name + "." + key)) continue;
      const auto it = std::find_if(sec.fields.begin(), sec.fields.end(), [&](const Field& f) { return f.key == key; });
      require(it != sec.fields.end(), ErrorKind::config, origin + ": unknown key '" + sec.name + "." + key + "'");
      it->read(v, origin + ": " + sec.name + "." + key);
    }
  }
  for (const auto& [k, v] : tbl) {
    require(known_tables.count(std::string(k.str())) > 0, ErrorKind::config,
            origin + ": unknown section '" + std::string(k.str()) + "'");
  }
  c.validate();
  return c;
}

RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_run_config(os.str(), path.string());
}

std::string to_toml(const RunConfig& config) {
  RunConfig c = config;
  std::ostringstream os;
  for (const auto& sec : sections(c)) {
    toml::table t;
    for (const auto& f : sec.fields) f.write(t);
    os << "[" << sec.name << "]\n" << t << "\n\n";
  }
  return os.str();
}

}  // namespace scn
