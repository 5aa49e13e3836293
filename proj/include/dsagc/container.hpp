#pragma once

// Feature container: an 8-byte magic, a little-endian u64 header length, a
// UTF-8 JSON header, then the payload:
//   de      n_records x rows x cols float64 (record-major, channel-major, band-minor)
//   labels  n_records int16, -1 = unlabeled
//   ids     n_records x (subject, trial, segment) int32
// All multi-byte values are little-endian.

#include "dsagc/featio.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dsagc::featio {

inline constexpr char kFeatureMagic[8] = {'D', 'S', 'A', 'G', 'C', 'F', 'E', 'A'};
inline constexpr int kFeatureFormatVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_i16(std::string& out, std::int16_t v) {
  const auto u = static_cast<std::uint16_t>(v);
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>(u >> 8));
}
inline void put_i32(std::string& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::int16_t i16() {
    need(2);
    const auto lo = static_cast<unsigned char>(bytes_[pos_]);
    const auto hi = static_cast<unsigned char>(bytes_[pos_ + 1]);
    pos_ += 2;
    return static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  std::int32_t i32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return static_cast<std::int32_t>(v);
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw TruncatedPayloadError("feature file: truncated payload");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : m.bands) bands.push_back({b.low_hz, b.high_hz});
  return {{"n_subjects", m.n_subjects}, {"n_trials_per_subject", m.n_trials_per_subject},
          {"channels", m.channels},     {"bands", bands},
          {"fs", m.fs},                 {"n_classes", m.n_classes}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.n_subjects = j.at("n_subjects").get<int>();
  m.n_trials_per_subject = j.at("n_trials_per_subject").get<int>();
  m.channels = j.at("channels").get<std::vector<std::string>>();
  for (const auto& b : j.at("bands")) {
    if (!b.is_array() || b.size() != 2) throw MalformedHeaderError("feature file: band entry must be [low, high]");
    m.bands.push_back({b[0].get<double>(), b[1].get<double>()});
  }
  m.fs = j.at("fs").get<double>();
  m.n_classes = j.at("n_classes").get<int>();
  return m;
}

inline std::string encode_features(const Dataset& ds) {
  ds.validate();
  const int rows = ds.manifest.n_channels();
  const int cols = ds.manifest.n_bands();
  nlohmann::json header = {{"format", "dsagc-features"},
                           {"version", kFeatureFormatVersion},
                           {"manifest", manifest_to_json(ds.manifest)},
                           {"n_records", ds.records.size()},
                           {"rows", rows},
                           {"cols", cols}};
  const std::string text = header.dump();

  std::string out(kFeatureMagic, sizeof kFeatureMagic);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + ds.records.size() * (rows * cols * 8 + 14));
  for (const auto& r : ds.records)
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) detail::put_f64(out, r.de(i, j));
  for (const auto& r : ds.records) detail::put_i16(out, static_cast<std::int16_t>(r.label.value_or(-1)));
  for (const auto& r : ds.records) {
    detail::put_i32(out, r.subject);
    detail::put_i32(out, r.trial);
    detail::put_i32(out, r.segment);
  }
  return out;
}

inline Dataset decode_features(const std::string& bytes) {
  detail::Reader in(bytes);
  if (bytes.size() < sizeof kFeatureMagic + 8 || !std::equal(std::begin(kFeatureMagic), std::end(kFeatureMagic), bytes.begin()))
    throw MalformedHeaderError("feature file: bad magic");
  in.take(sizeof kFeatureMagic);
  const std::uint64_t header_len = in.u64();
  if (header_len > in.remaining()) throw MalformedHeaderError("feature file: header length exceeds file size");

  Dataset ds;
  std::size_t n_records = 0;
  int rows = 0, cols = 0;
  try {
    const auto header = nlohmann::json::parse(in.take(header_len));
    if (header.at("format").get<std::string>() != "dsagc-features")
      throw MalformedHeaderError("feature file: unexpected format tag");
    if (header.at("version").get<int>() != kFeatureFormatVersion)
      throw MalformedHeaderError("feature file: unsupported version");
    ds.manifest = manifest_from_json(header.at("manifest"));
    n_records = header.at("n_records").get<std::size_t>();
    rows = header.at("rows").get<int>();
    cols = header.at("cols").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeaderError(std::string("feature file: malformed header: ") + e.what());
  }
  if (rows != ds.manifest.n_channels() || cols != ds.manifest.n_bands())
    throw DimensionMismatchError("feature file: payload is " + std::to_string(rows) + " x " + std::to_string(cols) +
                                 " but manifest declares " + std::to_string(ds.manifest.n_channels()) + " channels x " +
                                 std::to_string(ds.manifest.n_bands()) + " bands");

  const std::size_t need = n_records * (static_cast<std::size_t>(rows) * cols * 8 + 2 + 12);
  if (in.remaining() < need) throw TruncatedPayloadError("feature file: truncated payload");
  if (in.remaining() > need) throw LoadError("feature file: trailing bytes after payload");

  ds.records.resize(n_records);
  for (auto& r : ds.records) {
    r.de.resize(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) r.de(i, j) = in.f64();
  }
  for (auto& r : ds.records) {
    const int l = in.i16();
    if (l >= 0) r.label = l;
  }
  for (auto& r : ds.records) {
    r.subject = in.i32();
    r.trial = in.i32();
    r.segment = in.i32();
  }
  return ds;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline void save_features(const Dataset& ds, const std::filesystem::path& path) { write_file(path, encode_features(ds)); }

// Accepts either a single container file or a directory holding one
// container per subject (*.dsf). Directory manifests must agree on
// everything except n_subjects.
inline Dataset load_features(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) return decode_features(read_file(path));

  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".dsf") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .dsf feature files in " + path.string());

  Dataset out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    Dataset part = decode_features(read_file(files[i]));
    if (i == 0) {
      out.manifest = part.manifest;
    } else {
      auto a = out.manifest, b = part.manifest;
      a.n_subjects = b.n_subjects = 0;
      if (!(a == b)) throw DimensionMismatchError("feature directory: manifest of " + files[i].string() + " differs");
    }
    for (auto& r : part.records) out.records.push_back(std::move(r));
  }
  out.manifest.n_subjects = static_cast<int>(out.subjects().size());
  return out;
}

inline void save_feature_dir(const Dataset& ds, const std::filesystem::path& dir) {
  for (int s : ds.subjects()) {
    Dataset part;
    part.manifest = ds.manifest;
    part.manifest.n_subjects = 1;
    for (const auto& r : ds.records)
      if (r.subject == s) part.records.push_back(r);
    char name[32];
    std::snprintf(name, sizeof name, "subject_%03d.dsf", s);
    save_features(part, dir / name);
  }
}

inline std::uint64_t fingerprint(const Dataset& ds) {
  const std::string bytes = encode_features(ds);
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace dsagc::featio
