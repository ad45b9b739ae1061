#include "ctxtrack/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ctxtrack/config.hpp"

namespace ctxtrack {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { out_ += s; }
  void str(const std::string& s) {
    u64(s.size());
    raw(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Cursor {
 public:
  explicit Cursor(const std::string& bytes) : bytes_(bytes) {}
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated data reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return raw(u64(what), what); }
  /// Element count read from the data that must still fit in the remaining bytes.
  std::size_t count(std::size_t min_bytes_each, const char* what) {
    const std::uint64_t n = u64(what);
    if (min_bytes_each && n > (bytes_.size() - pos_) / min_bytes_each)
      throw FormatError(std::string("implausible count for ") + what);
    return static_cast<std::size_t>(n);
  }
  void magic(const char* m) {
    if (raw(4, "magic") != m) throw FormatError(std::string("bad magic, expected ") + m);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string frame_key(std::size_t t, const char* field) {
  std::string idx = std::to_string(t);
  if (idx.size() < 3) idx.insert(0, 3 - idx.size(), '0');
  return "frame" + idx + "." + field;
}

const Tensor& require(const NamedTensors& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("missing tensor '" + key + "'");
  return it->second;
}

}  // namespace

std::string encode_tensors(const NamedTensors& tensors) {
  Writer w;
  w.raw("CTXT");
  w.u32(kTensorFormatVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u64(t.rank());
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.storage()) w.f64(v);
  }
  return w.take();
}

NamedTensors decode_tensors(const std::string& bytes) {
  Cursor c(bytes);
  c.magic("CTXT");
  const std::uint32_t version = c.u32("version");
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor container version " + std::to_string(version));
  NamedTensors out;
  const std::size_t count = c.count(16, "entry count");
  for (std::size_t i = 0; i < count; ++i) {
    std::string name = c.str("name");
    const std::size_t rank = c.count(8, "rank");
    Shape shape(rank);
    std::size_t size = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(c.u64("dim"));
      if (d != 0 && size > std::numeric_limits<std::size_t>::max() / d) throw FormatError("tensor too large");
      size *= d;
    }
    c.need(size * 8, "tensor data");
    std::vector<double> data(size);
    for (auto& v : data) v = c.f64("tensor data");
    if (!out.emplace(std::move(name), Tensor(std::move(shape), std::move(data))).second)
      throw FormatError("duplicate tensor name");
  }
  if (!c.done()) throw FormatError("trailing bytes after tensor container");
  return out;
}

void save_checkpoint(const std::string& path, const ParameterSet& params) {
  write_file_atomic(path, encode_tensors(params.items()));
}

ParameterSet load_checkpoint(const std::string& path) {
  ParameterSet p;
  for (auto& [name, t] : decode_tensors(read_binary_file(path))) p.set(name, std::move(t));
  return p;
}

std::vector<std::uint64_t> rle_encode(const Tensor& mask) {
  std::vector<std::uint64_t> runs;
  double current = 0.0;
  std::uint64_t length = 0;
  for (double v : mask.storage()) {
    if (v != 0.0 && v != 1.0) throw FormatError("run-length encoding needs a binary mask");
    if (v != current) {
      runs.push_back(length);
      current = v;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

Tensor rle_decode(const std::vector<std::uint64_t>& runs, std::size_t height, std::size_t width) {
  Tensor m({height, width}, 0.0);
  std::size_t pos = 0;
  double value = 0.0;
  for (std::uint64_t r : runs) {
    if (r > m.size() - pos) throw FormatError("mask runs exceed the mask size");
    std::fill_n(m.storage().begin() + static_cast<std::ptrdiff_t>(pos), r, value);
    pos += r;
    value = 1.0 - value;
  }
  if (pos != m.size()) throw FormatError("mask runs do not cover the mask");
  return m;
}

std::string encode_scenario(const Scenario& s) {
  Writer w;
  w.raw("CTXS");
  w.u32(kScenarioFormatVersion);
  w.str(to_text(s.config));
  const std::size_t h = s.config.height, wd = s.config.width;
  w.u64(s.gt.frames);
  w.u64(h);
  w.u64(wd);
  w.u64(s.gt.tracks.size());
  for (const auto& track : s.gt.tracks) {
    w.u64(track.identity);
    w.u64(track.label);
    if (track.masks.size() != s.gt.frames) throw FormatError("track mask count differs from frame count");
    for (const auto& m : track.masks) {
      w.u8(m.has_value());
      if (!m) continue;
      if (m->shape() != Shape{h, wd}) throw FormatError("gt mask shape differs from the grid");
      const auto runs = rle_encode(*m);
      w.u64(runs.size());
      for (auto r : runs) w.u64(r);
    }
  }
  w.u64(s.frames.size());
  NamedTensors tensors;
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& f = s.frames[t];
    w.u64(f.detection_object.size());
    for (auto k : f.detection_object) w.u64(k);
    tensors[frame_key(t, "features")] = f.observation.features;
    tensors[frame_key(t, "core")] = f.observation.core;
    tensors[frame_key(t, "masks")] = f.observation.masks;
    tensors[frame_key(t, "class_scores")] = f.observation.class_scores;
  }
  w.str(encode_tensors(tensors));
  return w.take();
}

Scenario decode_scenario(const std::string& bytes) {
  Cursor c(bytes);
  c.magic("CTXS");
  const std::uint32_t version = c.u32("version");
  if (version != kScenarioFormatVersion) throw FormatError("unsupported scenario version " + std::to_string(version));
  Scenario s;
  s.config = scenario_config_from_text(c.str("config"));
  s.gt.frames = static_cast<std::size_t>(c.u64("frames"));
  const std::size_t h = static_cast<std::size_t>(c.u64("height"));
  const std::size_t wd = static_cast<std::size_t>(c.u64("width"));
  if (h != s.config.height || wd != s.config.width) throw FormatError("mask grid differs from the config");
  const std::size_t tracks = c.count(16, "track count");
  for (std::size_t k = 0; k < tracks; ++k) {
    GroundTruthTrack track;
    track.identity = static_cast<std::size_t>(c.u64("identity"));
    track.label = static_cast<std::size_t>(c.u64("label"));
    for (std::size_t t = 0; t < s.gt.frames; ++t) {
      const std::uint8_t present = c.u8("presence flag");
      if (present > 1) throw FormatError("bad presence flag");
      if (!present) {
        track.masks.emplace_back();
        continue;
      }
      std::vector<std::uint64_t> runs(c.count(8, "run count"));
      for (auto& r : runs) r = c.u64("run");
      track.masks.emplace_back(rle_decode(runs, h, wd));
    }
    s.gt.tracks.push_back(std::move(track));
  }
  const std::size_t frames = c.count(8, "observation frames");
  std::vector<std::vector<std::size_t>> detections(frames);
  for (auto& d : detections) {
    d.resize(c.count(8, "detection count"));
    for (auto& k : d) k = static_cast<std::size_t>(c.u64("detection object"));
  }
  const NamedTensors tensors = decode_tensors(c.str("observations"));
  if (!c.done()) throw FormatError("trailing bytes after scenario");
  if (tensors.size() != 4 * frames) throw FormatError("unexpected observation tensors");
  for (std::size_t t = 0; t < frames; ++t) {
    ScenarioFrame f;
    f.observation.features = require(tensors, frame_key(t, "features"));
    f.observation.core = require(tensors, frame_key(t, "core"));
    f.observation.masks = require(tensors, frame_key(t, "masks"));
    f.observation.class_scores = require(tensors, frame_key(t, "class_scores"));
    f.observation.validate();
    f.detection_object = std::move(detections[t]);
    s.frames.push_back(std::move(f));
  }
  return s;
}

void save_scenario(const std::string& path, const Scenario& scenario) {
  write_file_atomic(path, encode_scenario(scenario));
}

Scenario load_scenario(const std::string& path) { return decode_scenario(read_binary_file(path)); }

std::string read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw ConfigError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

}  // namespace ctxtrack
