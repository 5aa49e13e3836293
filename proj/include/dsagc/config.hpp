#pragma once

// Plain-text run configuration: one `key = value` per line, `#` comments.
// Unknown keys are rejected so that a typo cannot silently fall back to a
// default.

#include "dsagc/model.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

namespace dsagc::cli {

struct RunConfig {
  engine::TrainConfig train;
  std::string dataset;
  std::string out = "runs";
  int n_unlabeled = 2;
  int jobs = 1;
  std::vector<int> et_sweep;  // empty = single run at train.e_t

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string render_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) parts.push_back(trim(cur));
  return parts;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field number(const std::string& key, T engine::TrainConfig::*m) {
  return {key,
          [m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return render_double(c.train.*m);
            else return std::to_string(c.train.*m);
          },
          [m, key](RunConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) c.train.*m = parse_double(key, v);
            else c.train.*m = parse_int<T>(key, v);
          }};
}

inline std::string render_ablation(const engine::Ablation& a) {
  const auto tag = engine::ablation_tag(a);
  std::string out = tag;
  for (auto& ch : out)
    if (ch == '+') ch = ',';
  return out.empty() ? "none" : out;
}

inline const std::vector<Field>& fields() {
  using engine::TrainConfig;
  static const std::vector<Field> table = {
      {"dataset", [](const RunConfig& c) { return c.dataset; }, [](RunConfig& c, const std::string& v) { c.dataset = v; }},
      {"out", [](const RunConfig& c) { return c.out; }, [](RunConfig& c, const std::string& v) { c.out = v; }},
      {"n_unlabeled", [](const RunConfig& c) { return std::to_string(c.n_unlabeled); },
       [](RunConfig& c, const std::string& v) { c.n_unlabeled = parse_int<int>("n_unlabeled", v); }},
      {"jobs", [](const RunConfig& c) { return std::to_string(c.jobs); },
       [](RunConfig& c, const std::string& v) { c.jobs = parse_int<int>("jobs", v); }},
      {"et_sweep",
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.et_sweep.size(); ++i) s += (i ? "," : "") + std::to_string(c.et_sweep[i]);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         c.et_sweep.clear();
         if (v.empty()) return;
         for (const auto& p : split(v, ',')) c.et_sweep.push_back(parse_int<int>("et_sweep", p));
       }},
      number("lr", &TrainConfig::lr),
      number("batch_size", &TrainConfig::batch_size),
      number("e_t", &TrainConfig::e_t),
      number("max_epochs", &TrainConfig::max_epochs),
      number("tau", &TrainConfig::tau),
      number("lambda_reg", &TrainConfig::lambda_reg),
      number("cheb_order", &TrainConfig::cheb_order),
      number("heads", &TrainConfig::heads),
      number("drop_count", &TrainConfig::drop_count),
      number("alpha_disc", &TrainConfig::alpha_disc),
      number("alpha_gcn", &TrainConfig::alpha_gcn),
      number("alpha_gcl", &TrainConfig::alpha_gcl),
      number("seed", &TrainConfig::seed),
      {"ce_mode", [](const RunConfig& c) { return std::string(fusion::ce_mode_name(c.train.ce_mode)); },
       [](RunConfig& c, const std::string& v) { c.train.ce_mode = fusion::parse_ce_mode(v); }},
      {"ablate", [](const RunConfig& c) { return render_ablation(c.train.ablate); },
       [](RunConfig& c, const std::string& v) {
         c.train.ablate = {};
         if (v == "none" || v.empty()) return;
         for (const auto& name : split(v, ',')) engine::set_ablation(c.train.ablate, name);
       }},
      number("grl_mu", &TrainConfig::grl_mu),
      number("dropout", &TrainConfig::dropout),
      number("rms_decay", &TrainConfig::rms_decay),
      number("rms_eps", &TrainConfig::rms_eps),
      number("power_tol", &TrainConfig::power_tol),
      number("power_max_iter", &TrainConfig::power_max_iter),
      number("eval_views", &TrainConfig::eval_views),
      number("snapshot_epoch", &TrainConfig::snapshot_epoch),
      {"capture_embeddings", [](const RunConfig& c) { return std::string(c.train.capture_embeddings ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.train.capture_embeddings = parse_bool("capture_embeddings", v); }},
      number("embed_max_per_domain", &TrainConfig::embed_max_per_domain),
  };
  return table;
}

}  // namespace detail

inline std::string render(const RunConfig& c) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

// Applies `text` on top of `base`. Later lines win.
inline RunConfig parse(const std::string& text, RunConfig base = {}) {
  std::map<std::string, const detail::Field*> index;
  for (const auto& f : detail::fields()) index[f.key] = &f;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(base, value);
  }
  return base;
}

inline void validate(const RunConfig& c) {
  // With a sweep the single e_t value is never used.
  engine::TrainConfig t = c.train;
  if (!c.et_sweep.empty()) t.e_t = 0;
  t.validate();
  if (c.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (c.n_unlabeled < 0) throw ConfigError("n_unlabeled must be >= 0");
  for (int et : c.et_sweep)
    if (et < 0 || et > c.train.max_epochs) throw ConfigError("et_sweep value " + std::to_string(et) + " outside [0, max_epochs]");
}

}  // namespace dsagc::cli
