#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "scn/cli.hpp"

namespace scn::cli {

namespace {

std::string sha1_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr) == 1, ErrorKind::internal,
          "SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

std::string git_blob_sha1(const std::string& bytes) {
  std::string data = "blob " + std::to_string(bytes.size());
  data.push_back('\0');
  data += bytes;
  return sha1_hex(data);
}

std::string file_hash(const std::filesystem::path& path) { return git_blob_sha1(slurp(path)); }

std::string tree_hash(const std::filesystem::path& dir, const std::vector<std::string>& exclude) {
  std::vector<std::string> lines;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (std::find(exclude.begin(), exclude.end(), name) != exclude.end()) continue;
    lines.push_back(std::filesystem::relative(entry.path(), dir).generic_string() + " " + file_hash(entry.path()) +
                    "\n");
  }
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) all += l;
  return sha1_hex(all);
}

std::string RunManifest::input_hash() const {
  std::string all;
  for (const auto& [path, hash] : inputs) all += hash + "\n";
  return sha1_hex(all);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json in = nlohmann::json::array();
  for (const auto& [path, hash] : inputs) in.push_back({{"path", path}, {"sha1", hash}});
  return {{"command", command}, {"args", args},        {"config", config_toml}, {"seed", seed},
          {"inputs", in},       {"input_hash", input_hash()}, {"outputs", outputs}};
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << manifest.to_json().dump(2) << "\n";
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : report.classes)
    classes.push_back(
        {{"class_id", c.class_id}, {"num_gt", c.num_gt}, {"num_detections", c.num_detections}, {"ap", c.ap}});
  return {{"iou_thresholds", report.iou_thresholds},
          {"classes", classes},
          {"map", report.map},
          {"map_50", report.map_50},
          {"map_75", report.map_75},
          {"num_detections", report.num_detections},
          {"num_gt", report.num_gt}};
}

nlohmann::json to_json(const EnergyReport& report) {
  const OpCounts& c = report.counts;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"name", l.name},
                      {"binary_input", l.binary_input},
                      {"dense_ops", l.dense_ops},
                      {"acs", l.acs},
                      {"macs", l.macs},
                      {"input_density", l.input_density}});
  nlohmann::json rates = nlohmann::json::array();
  for (const auto& [name, f] : c.layer_firing_rates) rates.push_back({{"name", name}, {"firing_rate", f}});
  return {{"time_steps", report.time_steps},
          {"samples", c.samples},
          {"layers", layers},
          {"dense_total", c.dense_total},
          {"acs_total", c.acs_total},
          {"macs_total", c.macs_total},
          {"firing_rate", c.firing_rate},
          {"layer_firing_rates", rates},
          {"energy_per_step_mj", report.energy_per_step_mj},
          {"energy_total_mj", report.energy_total_mj}};
}

nlohmann::json to_json(const std::vector<Detection>& detections) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : detections)
    out.push_back({{"class_id", d.class_id},
                   {"score", d.score},
                   {"x", d.box.x},
                   {"y", d.box.y},
                   {"w", d.box.w},
                   {"h", d.box.h}});
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "time_steps,window_ms,map,map_50\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.time_steps << "," << r.window_ms << "," << r.map << "," << r.map_50 << "\n";
  return os.str();
}

std::string ablation_svg(const std::vector<AblationRow>& rows, const std::string& title) {
  constexpr double width = 480, height = 320, left = 60, right = 20, top = 40, bottom = 50;
  const double pw = width - left - right, ph = height - top - bottom;
  std::size_t tmin = rows.empty() ? 1 : rows.front().time_steps, tmax = rows.empty() ? 1 : rows.front().time_steps;
  double ymax = 0.0;
  for (const auto& r : rows) {
    tmin = std::min(tmin, r.time_steps);
    tmax = std::max(tmax, r.time_steps);
    ymax = std::max(ymax, r.map);
  }
  ymax = ymax > 0.0 ? std::ceil(ymax * 10.0 + 1e-9) / 10.0 : 1.0;
  auto px = [&](std::size_t t) {
    return left + (tmax == tmin ? pw / 2.0 : pw * double(t - tmin) / double(tmax - tmin));
  };
  auto py = [&](double v) { return top + ph * (1.0 - v / ymax); };

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"11\">" << std::setprecision(3) << v << std::setprecision(2) << "</text>\n";
  }
  for (const auto& r : rows)
    os << "<text x=\"" << px(r.time_steps) << "\" y=\"" << top + ph + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << r.time_steps << "</text>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">time steps</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">mAP</text>\n";
  os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (const auto& r : rows) os << px(r.time_steps) << "," << py(r.map) << " ";
  os << "\"/>\n";
  for (const auto& r : rows)
    os << "<circle cx=\"" << px(r.time_steps) << "\" cy=\"" << py(r.map) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  os << "</svg>\n";
  return os.str();
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
  require(pixels.size() == width * height, ErrorKind::dimension, "write_pgm: pixel count does not match size");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace scn::cli
