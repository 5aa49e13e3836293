#pragma once

// Checkpoint file: magic, u64 header length, JSON header, then every
// parameter tensor as little-endian f64 in slot order.

#include "dsagc/config.hpp"
#include "dsagc/container.hpp"

namespace dsagc::engine {

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'A', 'G', 'C', 'C', 'K', 'P'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  cli::RunConfig config;
  int target_subject = 0;
  int n_unlabeled = 0;
  int epoch = 0;  // training epochs completed when saved
  std::uint64_t dataset_fingerprint = 0;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const auto& d = ck.params.dims;
  nlohmann::json h;
  h["format"] = "dsagc-checkpoint";
  h["version"] = kCheckpointVersion;
  h["dims"] = {{"n_channels", d.n_channels},
               {"n_bands", d.n_bands},
               {"n_classes", d.n_classes},
               {"drop_count", d.drop_count},
               {"cheb_order", d.cheb_order}};
  h["config"] = cli::render(ck.config);
  h["target_subject"] = ck.target_subject;
  h["n_unlabeled"] = ck.n_unlabeled;
  h["epoch"] = ck.epoch;
  h["dataset"] = ck.dataset_fingerprint;
  auto& ts = h["tensors"] = nlohmann::json::array();
  for (const auto& t : ck.params.tensors) ts.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  const std::string header = h.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  featio::detail::put_u64(out, header.size());
  out += header;
  for (const auto& t : ck.params.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) featio::detail::put_f64(out, t.value.data()[i]);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0)
    throw MalformedHeaderError("checkpoint: bad magic");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (hlen > bytes.size() - 16) throw TruncatedPayloadError("checkpoint: header length exceeds file size");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeaderError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (h.at("format") != "dsagc-checkpoint") throw MalformedHeaderError("checkpoint: wrong format tag");
    if (h.at("version").get<int>() != kCheckpointVersion)
      throw MalformedHeaderError("checkpoint: unsupported version " + h.at("version").dump());
    const auto& d = h.at("dims");
    ModelDims dims{d.at("n_channels").get<int>(), d.at("n_bands").get<int>(), d.at("n_classes").get<int>(),
                   d.at("drop_count").get<int>(), d.at("cheb_order").get<int>()};
    ck.config = cli::parse(h.at("config").get<std::string>());
    ck.target_subject = h.at("target_subject").get<int>();
    ck.n_unlabeled = h.at("n_unlabeled").get<int>();
    ck.epoch = h.at("epoch").get<int>();
    ck.dataset_fingerprint = h.at("dataset").get<std::uint64_t>();
    // The slot layout is fixed by the dims; check that the file agrees.
    std::mt19937_64 unused(0);
    ck.params = init_params(dims, unused);
    const auto& ts = h.at("tensors");
    if (ts.size() != ck.params.tensors.size()) throw DimensionMismatchError("checkpoint: tensor count mismatch");
    std::size_t off = 16 + hlen;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& t = ck.params.tensors[i];
      if (ts[i].at("name") != t.name || ts[i].at("rows").get<Eigen::Index>() != t.value.rows() ||
          ts[i].at("cols").get<Eigen::Index>() != t.value.cols())
        throw DimensionMismatchError("checkpoint: tensor '" + ts[i].at("name").get<std::string>() +
                                     "' does not match the model layout");
      const auto n = static_cast<std::size_t>(t.value.size());
      if (bytes.size() < off + 8 * n) throw TruncatedPayloadError("checkpoint: payload ends inside '" + t.name + "'");
      for (std::size_t k = 0; k < n; ++k, off += 8) {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + b])) << (8 * b);
        t.value.data()[k] = std::bit_cast<double>(u);
      }
    }
    if (off != bytes.size()) throw LoadError("checkpoint: trailing bytes after payload");
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeaderError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  featio::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(featio::read_file(path)); }

// Throws unless the checkpoint's layer widths fit the dataset.
inline void check_compatible(const Checkpoint& ck, const featio::DatasetManifest& m) {
  const auto& d = ck.params.dims;
  if (d.n_channels != m.n_channels() || d.n_bands != m.n_bands() || d.n_classes != m.n_classes)
    throw DimensionMismatchError("checkpoint was trained on " + std::to_string(d.n_channels) + " channels x " +
                                 std::to_string(d.n_bands) + " bands, " + std::to_string(d.n_classes) +
                                 " classes; dataset has " + std::to_string(m.n_channels()) + " x " +
                                 std::to_string(m.n_bands()) + ", " + std::to_string(m.n_classes) + " classes");
}

}  // namespace dsagc::engine
