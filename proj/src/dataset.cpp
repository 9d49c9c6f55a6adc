#include "scn/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <toml.hpp>

namespace scn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string sequence_stem(std::size_t index) {
  std::ostringstream os;
  os << "seq_" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

template <typename V>
V manifest_value(const toml::table& tbl, std::string_view key, const std::filesystem::path& path) {
  const auto node = tbl[key].value<V>();
  require(node.has_value(), ErrorKind::format, path.string() + ": missing or mistyped key '" + std::string(key) + "'");
  return *node;
}

std::size_t manifest_size(const toml::table& tbl, std::string_view key, const std::filesystem::path& path) {
  const auto v = manifest_value<std::int64_t>(tbl, key, path);
  require(v >= 0, ErrorKind::format, path.string() + ": '" + std::string(key) + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::uint64_t sequence_seed(std::uint64_t seed, const std::string& split, std::size_t index) {
  std::uint64_t tag = 0;
  for (char c : split) tag = tag * 131 + static_cast<unsigned char>(c);
  return splitmix64(splitmix64(seed ^ splitmix64(tag)) + index);
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.toml";
  require(std::filesystem::exists(path), ErrorKind::io, "no manifest at " + path.string());
  toml::table tbl;
  try {
    tbl = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    fail(ErrorKind::parse, path.string() + ": " + std::string(e.description()));
  }
  DatasetManifest m;
  m.sensor_width = manifest_size(tbl, "sensor_width", path);
  m.sensor_height = manifest_size(tbl, "sensor_height", path);
  m.seed = static_cast<std::uint64_t>(manifest_value<std::int64_t>(tbl, "seed", path));
  const toml::array* names = tbl["class_names"].as_array();
  require(names != nullptr, ErrorKind::format, path.string() + ": missing class_names");
  for (const auto& n : *names) {
    const auto s = n.value<std::string>();
    require(s.has_value(), ErrorKind::format, path.string() + ": class_names must be strings");
    m.class_names.push_back(*s);
  }
  const toml::table* splits = tbl["splits"].as_table();
  require(splits != nullptr, ErrorKind::format, path.string() + ": missing [splits]");
  m.splits.train = manifest_size(*splits, "train", path);
  m.splits.val = manifest_size(*splits, "val", path);
  m.splits.test = manifest_size(*splits, "test", path);
  return m;
}

void write_synth_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, const SplitSizes& splits,
                         std::uint64_t seed) {
  const std::size_t counts[] = {splits.train, splits.val, splits.test};
  for (std::size_t s = 0; s < kSplitNames.size(); ++s) {
    const auto split_dir = dir / kSplitNames[s];
    std::filesystem::create_directories(split_dir);
    for (std::size_t i = 0; i < counts[s]; ++i) {
      const SynthSequence seq = synth_sequence(cfg, sequence_seed(seed, kSplitNames[s], i));
      write_events(split_dir / (sequence_stem(i) + ".csv"), seq.events);
      write_annotations(split_dir / (sequence_stem(i) + ".jsonl"), seq.annotations);
    }
  }

  toml::array names;
  for (std::size_t k = 0; k < cfg.num_classes; ++k) names.push_back("class" + std::to_string(k));
  toml::table tbl{
      {"sensor_width", static_cast<std::int64_t>(cfg.sensor_width)},
      {"sensor_height", static_cast<std::int64_t>(cfg.sensor_height)},
      {"class_names", names},
      {"seed", static_cast<std::int64_t>(seed)},
      {"splits", toml::table{{"train", static_cast<std::int64_t>(splits.train)},
                             {"val", static_cast<std::int64_t>(splits.val)},
                             {"test", static_cast<std::int64_t>(splits.test)}}},
  };
  std::ofstream out(dir / "manifest.toml", std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + (dir / "manifest.toml").string());
  out << tbl << "\n";
}

std::vector<SequenceData> read_split(const std::filesystem::path& dir, const std::string& split) {
  const DatasetManifest m = read_manifest(dir);
  const std::size_t count = split == "train" ? m.splits.train
                            : split == "val" ? m.splits.val
                            : split == "test" ? m.splits.test
                                              : (fail(ErrorKind::usage, "unknown split '" + split + "'"), 0);
  std::vector<SequenceData> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string stem = sequence_stem(i);
    SequenceData seq;
    seq.name = split + "/" + stem;
    seq.events = read_events(dir / split / (stem + ".csv"), m.sensor_width, m.sensor_height);
    seq.annotations = read_annotations(dir / split / (stem + ".jsonl"), m.class_names.size());
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<AnnotationSet> Dataset::ground_truth() const {
  std::vector<AnnotationSet> gt;
  gt.reserve(windows.size());
  for (const auto& w : windows) gt.push_back(w.annotations);
  return gt;
}

Dataset make_dataset(const std::vector<SequenceData>& sequences, std::size_t num_classes, const EncodingConfig& enc) {
  Dataset d;
  d.num_classes = num_classes;
  d.encoding = enc;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const SequenceData& seq = sequences[s];
    if (s == 0) {
      d.width = seq.events.sensor_width;
      d.height = seq.events.sensor_height;
    }
    require(seq.events.sensor_width == d.width && seq.events.sensor_height == d.height, ErrorKind::dimension,
            "make_dataset: sequences have different sensor sizes");
    std::map<std::int64_t, AnnotationSet> by_time;
    for (const auto& a : seq.annotations) by_time[a.t_us].push_back(a);
    for (auto& [t, anns] : by_time) {
      d.cubes.push_back(encode_voxel_cube(seq.events, t, enc, d.height, d.width).data);
      d.windows.push_back({s, t, std::move(anns)});
    }
  }
  return d;
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& split, const EncodingConfig& enc) {
  const DatasetManifest m = read_manifest(dir);
  Dataset d = make_dataset(read_split(dir, split), m.class_names.size(), enc);
  d.width = m.sensor_width;
  d.height = m.sensor_height;
  return d;
}

}  // namespace scn
