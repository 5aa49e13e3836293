#pragma once

// Consolidates metrics CSVs into a methods x N accuracy table.

#include "dsagc/common.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dsagc::report {

struct RunSummary {
  std::filesystem::path file;
  std::string method;
  std::string ce_mode;
  int e_t = 0;
  int n_unlabeled = 0;
  std::string seed;
  double mean = 0.0;
  double std = 0.0;
  std::string dataset;

  std::string label() const {
    std::string l = method;
    if (ce_mode != "inside_log") l += " [" + ce_mode + "]";
    return l + " E_t=" + std::to_string(e_t);
  }
};

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Summary rows of one metrics CSV (one per run; E_t sweeps append several).
// Empty if the file is not a metrics CSV.
inline std::vector<RunSummary> read_summaries(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string line;
  std::vector<RunSummary> out;
  if (!std::getline(in, line)) return out;
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"row", "n_unlabeled", "e_t", "method", "ce_mode", "seed", "accuracy", "std", "dataset"})
    if (!col.count(need)) return out;
  while (std::getline(in, line)) {
    const auto f = split_csv(line);
    if (f.size() != header.size() || f[col["row"]] != "summary") continue;
    RunSummary r;
    r.file = file;
    r.method = f[col["method"]];
    r.ce_mode = f[col["ce_mode"]];
    r.seed = f[col["seed"]];
    r.dataset = f[col["dataset"]];
    try {
      r.e_t = std::stoi(f[col["e_t"]]);
      r.n_unlabeled = std::stoi(f[col["n_unlabeled"]]);
      r.mean = std::stod(f[col["accuracy"]]);
      r.std = std::stod(f[col["std"]]);
    } catch (const std::exception&) {
      throw InputError("malformed summary row in " + file.string());
    }
    out.push_back(r);
  }
  if (out.empty()) throw InputError("metrics file without summary row: " + file.string());
  return out;
}

// Percent mean and std, both zero-padded to two integer digits.
inline std::string format_cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%05.2f±%05.2f", 100.0 * mean, 100.0 * std);
  return buf;
}

struct Table {
  std::vector<int> columns;       // N values, ascending
  std::vector<std::string> rows;  // method labels, first-seen order sorted
  std::map<std::pair<std::string, int>, std::string> cells;

  std::string csv() const {
    std::string out = "method";
    for (int n : columns) out += ",N=" + std::to_string(n);
    out += "\n";
    for (const auto& r : rows) {
      out += r;
      for (int n : columns) {
        const auto it = cells.find({r, n});
        out += "," + (it == cells.end() ? std::string() : it->second);
      }
      out += "\n";
    }
    return out;
  }

  // Column widths count code points so the +- sign aligns.
  std::string text() const {
    auto width = [](const std::string& s) {
      std::size_t n = 0;
      for (unsigned char ch : s) n += (ch & 0xc0) != 0x80;
      return n;
    };
    std::vector<std::string> head{"method"};
    for (int n : columns) head.push_back("N=" + std::to_string(n));
    std::vector<std::vector<std::string>> body;
    for (const auto& r : rows) {
      std::vector<std::string> line{r};
      for (int n : columns) {
        const auto it = cells.find({r, n});
        line.push_back(it == cells.end() ? "-" : it->second);
      }
      body.push_back(line);
    }
    std::vector<std::size_t> w(head.size());
    for (std::size_t i = 0; i < head.size(); ++i) {
      w[i] = width(head[i]);
      for (const auto& b : body) w[i] = std::max(w[i], width(b[i]));
    }
    auto emit = [&](const std::vector<std::string>& cells_) {
      std::string line;
      for (std::size_t i = 0; i < cells_.size(); ++i) {
        line += cells_[i] + std::string(w[i] - width(cells_[i]) + (i + 1 < cells_.size() ? 2 : 0), ' ');
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      return line + "\n";
    };
    std::string out = emit(head);
    std::size_t total = 0;
    for (auto x : w) total += x + 2;
    out += std::string(total - 2, '-') + "\n";
    for (const auto& b : body) out += emit(b);
    return out;
  }
};

// Every summary row of every metrics CSV under `dir` contributes one cell.
// Runs over different datasets, or two runs claiming the same cell, are
// conflicts and reported together.
inline Table build_table(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename() != "report.csv")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunSummary> runs;
  for (const auto& f : files)
    for (auto& r : read_summaries(f)) runs.push_back(std::move(r));
  if (runs.empty()) throw IoError("no metrics CSV found under " + dir.string());

  std::map<std::string, std::vector<std::string>> by_dataset;
  for (const auto& r : runs) by_dataset[r.dataset].push_back(r.file.string());
  std::map<std::pair<std::string, int>, std::vector<std::string>> by_cell;
  for (const auto& r : runs) by_cell[{r.label(), r.n_unlabeled}].push_back(r.file.string());
  std::string conflicts;
  if (by_dataset.size() > 1) {
    conflicts += "metrics come from different datasets:\n";
    for (const auto& [fp, fs] : by_dataset)
      for (const auto& f : fs) conflicts += "  dataset " + fp + ": " + f + "\n";
  }
  for (const auto& [cell, fs] : by_cell)
    if (fs.size() > 1) {
      conflicts += "several runs for '" + cell.first + "' at N=" + std::to_string(cell.second) + ":\n";
      for (const auto& f : fs) conflicts += "  " + f + "\n";
    }
  if (!conflicts.empty()) throw InputError("conflicting metrics manifests\n" + conflicts);

  Table t;
  std::set<int> cols;
  std::set<std::string> rows;
  for (const auto& r : runs) {
    cols.insert(r.n_unlabeled);
    rows.insert(r.label());
    t.cells[{r.label(), r.n_unlabeled}] = format_cell(r.mean, r.std);
  }
  t.columns.assign(cols.begin(), cols.end());
  t.rows.assign(rows.begin(), rows.end());
  return t;
}

}  // namespace dsagc::report
