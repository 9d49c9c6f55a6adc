#include "scn/eventio.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "scn/rng.hpp"

namespace scn {

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

template <typename Int>
bool parse_int(std::string_view field, Int& out) {
  field = trim(field);
  if (field.empty()) return false;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc() && ptr == field.data() + field.size();
}

}  // namespace

EventStream parse_events(const std::string& text, std::size_t sensor_width, std::size_t sensor_height) {
  EventStream stream;
  stream.sensor_width = sensor_width;
  stream.sensor_height = sensor_height;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool seen_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line = trim(std::string_view(text).substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (!seen_header) {
      require(line == "t_us,x,y,p", ErrorKind::parse, "line 1: expected header 't_us,x,y,p'");
      seen_header = true;
      continue;
    }
    if (line.empty()) continue;

    std::string_view fields[4];
    std::size_t count = 0, start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        if (count < 4) fields[count] = line.substr(start, i - start);
        ++count;
        start = i + 1;
      }
    }
    const std::string where = "line " + std::to_string(line_no);
    require(count == 4, ErrorKind::parse, where + ": expected 4 fields, got " + std::to_string(count));
    Event e;
    int p = 0;
    require(parse_int(fields[0], e.t_us) && parse_int(fields[1], e.x) && parse_int(fields[2], e.y) &&
                parse_int(fields[3], p),
            ErrorKind::parse, where + ": malformed row '" + std::string(line) + "'");
    require(e.t_us >= 0, ErrorKind::parse, where + ": negative timestamp");
    require(p == 0 || p == 1, ErrorKind::parse, where + ": polarity must be 0 or 1");
    require(e.x >= 0 && static_cast<std::size_t>(e.x) < sensor_width && e.y >= 0 &&
                static_cast<std::size_t>(e.y) < sensor_height,
            ErrorKind::format, where + ": coordinate outside the " + std::to_string(sensor_width) + "x" +
                                   std::to_string(sensor_height) + " sensor");
    require(stream.events.empty() || stream.events.back().t_us <= e.t_us, ErrorKind::format,
            where + ": timestamps not sorted");
    e.polarity = static_cast<std::uint8_t>(p);
    stream.events.push_back(e);
  }
  require(seen_header, ErrorKind::parse, "line 1: missing header");
  return stream;
}

EventStream read_events(const std::filesystem::path& path, std::size_t sensor_width, std::size_t sensor_height) {
  try {
    return parse_events(slurp(path), sensor_width, sensor_height);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::io) throw;
    throw Error(e.kind(), path.string() + ": " + e.detail());
  }
}

std::string format_events(const EventStream& stream) {
  std::string out = "t_us,x,y,p\n";
  out.reserve(stream.events.size() * 16 + out.size());
  for (const Event& e : stream.events) {
    out += std::to_string(e.t_us);
    out += ',';
    out += std::to_string(e.x);
    out += ',';
    out += std::to_string(e.y);
    out += ',';
    out += static_cast<char>('0' + e.polarity);
    out += '\n';
  }
  return out;
}

void write_events(const std::filesystem::path& path, const EventStream& stream) { spit(path, format_events(stream)); }

AnnotationSet parse_annotations(const std::string& text, std::size_t num_classes) {
  AnnotationSet out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, where + ": " + e.what());
    }
    require(j.is_object(), ErrorKind::parse, where + ": expected a JSON object");
    for (const char* key : {"t_us", "x", "y", "w", "h", "class_id"}) {
      require(j.contains(key) && j[key].is_number(), ErrorKind::parse,
              where + ": missing or non-numeric field '" + key + "'");
    }
    require(j.size() == 6, ErrorKind::parse, where + ": unexpected extra fields");
    require(j["t_us"].is_number_integer() && j["class_id"].is_number_integer(), ErrorKind::parse,
            where + ": t_us and class_id must be integers");
    Annotation a;
    a.t_us = j["t_us"].get<std::int64_t>();
    a.x = j["x"].get<double>();
    a.y = j["y"].get<double>();
    a.w = j["w"].get<double>();
    a.h = j["h"].get<double>();
    const auto cls = j["class_id"].get<std::int64_t>();
    require(a.w > 0 && a.h > 0, ErrorKind::format, where + ": box width and height must be positive");
    require(cls >= 0 && static_cast<std::size_t>(cls) < num_classes, ErrorKind::config,
            where + ": unknown class_id " + std::to_string(cls));
    a.class_id = static_cast<int>(cls);
    out.push_back(a);
  }
  std::stable_sort(out.begin(), out.end(), [](const Annotation& a, const Annotation& b) { return a.t_us < b.t_us; });
  return out;
}

AnnotationSet read_annotations(const std::filesystem::path& path, std::size_t num_classes) {
  return parse_annotations(slurp(path), num_classes);
}

std::string format_annotations(const AnnotationSet& annotations) {
  std::string out;
  for (const Annotation& a : annotations) {
    nlohmann::ordered_json j;
    j["t_us"] = a.t_us;
    j["x"] = a.x;
    j["y"] = a.y;
    j["w"] = a.w;
    j["h"] = a.h;
    j["class_id"] = a.class_id;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_annotations(const std::filesystem::path& path, const AnnotationSet& annotations) {
  spit(path, format_annotations(annotations));
}

// --- synthetic scenes --------------------------------------------------------

namespace {

struct MovingBox {
  double x, y, w, h, vx, vy;
  int class_id;

  void advance(double width, double height) {
    x += vx;
    y += vy;
    bounce(x, vx, width - w);
    bounce(y, vy, height - h);
  }

  static void bounce(double& p, double& v, double hi) {
    if (p < 0.0) {
      p = -p;
      v = -v;
    } else if (p > hi) {
      p = 2.0 * hi - p;
      v = -v;
    }
    p = std::clamp(p, 0.0, hi);
  }
};

std::size_t draw_count(Rng& rng, double rate) {
  const double whole = std::floor(rate);
  return static_cast<std::size_t>(whole) + (rng.bernoulli(rate - whole) ? 1 : 0);
}

}  // namespace

SynthSequence synth_sequence(const SynthConfig& cfg, std::uint64_t seed) {
  require(cfg.sensor_width > 0 && cfg.sensor_height > 0, ErrorKind::config, "synth: sensor has zero area");
  require(cfg.duration_ms > 0, ErrorKind::config, "synth: duration must be positive");
  require(cfg.num_classes >= 1 && cfg.class_aspect.size() == cfg.num_classes, ErrorKind::config,
          "synth: need one aspect ratio per class");
  require(cfg.min_objects <= cfg.max_objects, ErrorKind::config, "synth: min_objects > max_objects");
  require(cfg.min_size > 0 && cfg.min_size <= cfg.max_size, ErrorKind::config, "synth: bad size range");
  require(cfg.min_speed >= 0 && cfg.min_speed <= cfg.max_speed, ErrorKind::config, "synth: bad speed range");
  require(cfg.event_rate >= 0 && cfg.noise_rate >= 0, ErrorKind::config, "synth: rates must be non-negative");
  require(cfg.annotation_period_ms > 0, ErrorKind::config, "synth: annotation period must be positive");

  Rng rng(seed);
  const double width = static_cast<double>(cfg.sensor_width);
  const double height = static_cast<double>(cfg.sensor_height);
  const std::size_t count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
  std::vector<MovingBox> boxes;
  for (std::size_t i = 0; i < count; ++i) {
    MovingBox b{};
    b.class_id = static_cast<int>(rng.below(cfg.num_classes));
    const double size = rng.uniform(cfg.min_size, cfg.max_size);
    const double aspect = cfg.class_aspect[b.class_id];
    b.w = std::clamp(std::round(size * std::sqrt(aspect)), 1.0, width);
    b.h = std::clamp(std::round(size / std::sqrt(aspect)), 1.0, height);
    b.x = rng.uniform(0.0, width - b.w);
    b.y = rng.uniform(0.0, height - b.h);
    const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    b.vx = speed * std::cos(angle);
    b.vy = speed * std::sin(angle);
    boxes.push_back(b);
  }

  SynthSequence seq;
  seq.events.sensor_width = cfg.sensor_width;
  seq.events.sensor_height = cfg.sensor_height;
  auto& events = seq.events.events;
  for (std::int64_t tick = 0; tick <= cfg.duration_ms; ++tick) {
    if (tick > 0) {
      for (auto& b : boxes) b.advance(width, height);
    }
    if (tick % cfg.annotation_period_ms == 0 && tick > 0) {
      for (const auto& b : boxes)
        seq.annotations.push_back({tick * 1000, std::round(b.x), std::round(b.y), b.w, b.h, b.class_id});
    }
    if (tick == cfg.duration_ms) break;

    for (const auto& b : boxes) {
      // edges facing the direction of motion brighten, trailing edges darken
      const std::size_t n = std::max<std::size_t>(1, draw_count(rng, cfg.event_rate));
      const double perimeter = 2.0 * (b.w + b.h);
      for (std::size_t k = 0; k < n; ++k) {
        double u = rng.uniform() * perimeter;
        double px, py, nx = 0, ny = 0;
        if (u < b.w) {
          px = b.x + u, py = b.y, ny = -1;
        } else if ((u -= b.w) < b.h) {
          px = b.x + b.w, py = b.y + u, nx = 1;
        } else if ((u -= b.h) < b.w) {
          px = b.x + b.w - u, py = b.y + b.h, ny = 1;
        } else {
          u -= b.w;
          px = b.x, py = b.y + b.h - u, nx = -1;
        }
        Event e;
        e.t_us = tick * 1000 + static_cast<std::int64_t>(rng.below(1000));
        e.x = static_cast<std::int32_t>(std::clamp(std::floor(px), 0.0, width - 1));
        e.y = static_cast<std::int32_t>(std::clamp(std::floor(py), 0.0, height - 1));
        e.polarity = nx * b.vx + ny * b.vy >= 0.0 ? 1 : 0;
        events.push_back(e);
      }
    }
    const std::size_t noise = draw_count(rng, cfg.noise_rate);
    for (std::size_t k = 0; k < noise; ++k) {
      Event e;
      e.t_us = tick * 1000 + static_cast<std::int64_t>(rng.below(1000));
      e.x = static_cast<std::int32_t>(rng.below(cfg.sensor_width));
      e.y = static_cast<std::int32_t>(rng.below(cfg.sensor_height));
      e.polarity = rng.bernoulli(0.5) ? 1 : 0;
      events.push_back(e);
    }
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  return seq;
}

// --- voxel encoding ------------------------------------------------------------

bool voxel_slot(std::int64_t t_us, std::int64_t t_ref_us, const EncodingConfig& enc, VoxelIndex& slot) {
  const std::int64_t window_us = enc.window_ms * 1000;
  const std::int64_t start = t_ref_us - window_us;
  if (t_us < start || t_us >= t_ref_us) return false;
  const auto bins = static_cast<std::int64_t>(enc.time_steps * enc.micro_bins);
  const std::int64_t b = (t_us - start) * bins / window_us;
  slot.step = static_cast<std::size_t>(b) / enc.micro_bins;
  slot.micro_bin = static_cast<std::size_t>(b) % enc.micro_bins;
  return true;
}

VoxelCube encode_voxel_cube(const EventStream& stream, std::int64_t t_ref_us, const EncodingConfig& enc,
                            std::size_t out_h, std::size_t out_w) {
  require(enc.window_ms > 0, ErrorKind::config, "encode: window_ms must be positive");
  require(enc.time_steps >= 1 && enc.micro_bins >= 1, ErrorKind::config,
          "encode: time_steps and micro_bins must be >= 1");
  require(out_h == stream.sensor_height && out_w == stream.sensor_width, ErrorKind::dimension,
          "encode: output " + std::to_string(out_h) + "x" + std::to_string(out_w) + " does not match sensor " +
              std::to_string(stream.sensor_height) + "x" + std::to_string(stream.sensor_width));
  const std::size_t channels = 2 * enc.micro_bins;
  VoxelCube cube{Tensor<std::uint8_t>({enc.time_steps, channels, out_h, out_w}), t_ref_us, enc.window_ms};
  const std::int64_t start = t_ref_us - enc.window_ms * 1000;
  const auto& ev = stream.events;
  auto it = std::lower_bound(ev.begin(), ev.end(), start, [](const Event& e, std::int64_t t) { return e.t_us < t; });
  for (; it != ev.end() && it->t_us < t_ref_us; ++it) {
    if (it->x < 0 || it->y < 0 || static_cast<std::size_t>(it->x) >= out_w || static_cast<std::size_t>(it->y) >= out_h)
      continue;
    VoxelIndex slot;
    if (!voxel_slot(it->t_us, t_ref_us, enc, slot)) continue;
    cube.data.at(slot.step, slot.micro_bin * 2 + it->polarity, it->y, it->x) = 1;
  }
  return cube;
}

}  // namespace scn
