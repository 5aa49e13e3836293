#pragma once

// Raw-signal directory ingest for the extract command.
//
// Layout:
//   manifest.json        manifest fields plus "trial_labels": [label per trial]
//   s<subject>_t<trial>.csv   one row per channel, one column per sample
//
// Each trial is cut into non-overlapping 1 s windows (fs samples); a trailing
// partial window is dropped.

#include "dsagc/container.hpp"

#include <regex>

namespace dsagc::featio {

struct RawDirectory {
  DatasetManifest manifest;
  std::vector<int> trial_labels;
  std::map<std::pair<int, int>, std::filesystem::path> files;  // (subject, trial) -> csv
};

inline Matrix read_signal_csv(const std::filesystem::path& path, int n_channels) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw InputError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  if (static_cast<int>(rows.size()) != n_channels)
    throw ShapeError(path.string() + ": " + std::to_string(rows.size()) + " channel rows, manifest has " +
                     std::to_string(n_channels));
  const std::size_t n = rows.front().size();
  Matrix m(n_channels, static_cast<Eigen::Index>(n));
  for (int c = 0; c < n_channels; ++c) {
    if (rows[c].size() != n) throw ShapeError(path.string() + ": channel rows differ in length");
    for (std::size_t k = 0; k < n; ++k) m(c, static_cast<Eigen::Index>(k)) = rows[c][k];
  }
  return m;
}

inline RawDirectory scan_raw_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  RawDirectory raw;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "manifest.json"));
    raw.manifest = manifest_from_json(j);
    raw.trial_labels = j.at("trial_labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeaderError("raw manifest: " + std::string(e.what()));
  }
  raw.manifest.validate();
  if (static_cast<int>(raw.trial_labels.size()) != raw.manifest.n_trials_per_subject)
    throw ConfigError("raw manifest: trial_labels must have one entry per trial");
  for (int l : raw.trial_labels)
    if (l < 0 || l >= raw.manifest.n_classes) throw ConfigError("raw manifest: trial label out of range");

  const std::regex name(R"(s(\d+)_t(\d+)\.csv)");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string fn = e.path().filename().string();
    if (!e.is_regular_file() || !std::regex_match(fn, m, name)) continue;
    const int trial = std::stoi(m[2]);
    if (trial < 0 || trial >= raw.manifest.n_trials_per_subject)
      throw ConfigError(fn + ": trial index outside manifest range");
    raw.files[{std::stoi(m[1]), trial}] = e.path();
  }
  if (raw.files.empty()) throw IoError("no s<subject>_t<trial>.csv files in " + dir.string());
  return raw;
}

// DE features for every 1 s window, then smoothing within each trial.
inline Dataset extract_directory(const std::filesystem::path& dir, const std::optional<SmoothConfig>& smooth) {
  const RawDirectory raw = scan_raw_directory(dir);
  Dataset ds;
  ds.manifest = raw.manifest;
  const int win = static_cast<int>(std::lround(raw.manifest.fs));
  for (const auto& [key, path] : raw.files) {
    const Matrix sig = read_signal_csv(path, raw.manifest.n_channels());
    const int n_win = static_cast<int>(sig.cols()) / win;
    for (int g = 0; g < n_win; ++g) {
      FeatureRecord r;
      r.subject = key.first;
      r.trial = key.second;
      r.segment = g;
      r.label = raw.trial_labels[key.second];
      r.de = extract_de(sig.middleCols(static_cast<Eigen::Index>(g) * win, win), raw.manifest);
      ds.records.push_back(std::move(r));
    }
  }
  if (smooth) smooth_dataset(ds, *smooth);
  ds.manifest.n_subjects = static_cast<int>(ds.subjects().size());
  ds.validate();
  return ds;
}

}  // namespace dsagc::featio
