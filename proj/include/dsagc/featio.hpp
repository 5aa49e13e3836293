#pragma once

// Feature records, differential-entropy extraction, temporal smoothing and
// the incomplete-label leave-one-subject-out partition.

#include "dsagc/common.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace dsagc::featio {

struct FeatureRecord {
  int subject = 0;
  int trial = 0;
  int segment = 0;
  Matrix de;  // N_G x C_de, nats
  std::optional<int> label;

  bool operator==(const FeatureRecord& o) const {
    return subject == o.subject && trial == o.trial && segment == o.segment && label == o.label &&
           de.rows() == o.de.rows() && de.cols() == o.de.cols() && de == o.de;
  }
};

struct Band {
  double low_hz = 0.0;
  double high_hz = 0.0;
  bool operator==(const Band&) const = default;
};

struct DatasetManifest {
  int n_subjects = 15;
  int n_trials_per_subject = 15;
  std::vector<std::string> channels;
  std::vector<Band> bands;
  double fs = 200.0;
  int n_classes = 3;

  int n_channels() const { return static_cast<int>(channels.size()); }
  int n_bands() const { return static_cast<int>(bands.size()); }

  bool operator==(const DatasetManifest&) const = default;

  void validate() const {
    if (n_subjects < 1 || n_trials_per_subject < 1 || n_classes < 2)
      throw ConfigError("manifest: counts must be >= 1 and n_classes >= 2");
    if (channels.empty() || bands.empty()) throw ConfigError("manifest: channels and bands must be nonempty");
    double top = 0.0;
    for (const auto& b : bands) {
      if (!(b.low_hz >= 0.0 && b.high_hz > b.low_hz)) throw ConfigError("manifest: band edges must satisfy 0 <= low < high");
      top = std::max(top, b.high_hz);
    }
    if (!(fs > 2.0 * top)) throw ConfigError("manifest: fs must exceed twice the highest band edge");
  }
};

// Delta, theta, alpha, beta, gamma as used by the SEED release.
inline std::vector<Band> default_bands() { return {{1, 4}, {4, 8}, {8, 14}, {14, 31}, {31, 50}}; }

inline std::vector<std::string> numbered_channels(int n) {
  std::vector<std::string> names;
  names.reserve(n);
  for (int i = 0; i < n; ++i) names.push_back("ch" + std::to_string(i));
  return names;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<FeatureRecord> records;

  bool operator==(const Dataset&) const = default;

  std::vector<int> subjects() const {
    std::set<int> s;
    for (const auto& r : records) s.insert(r.subject);
    return {s.begin(), s.end()};
  }

  void validate() const {
    manifest.validate();
    for (const auto& r : records) {
      if (r.de.rows() != manifest.n_channels() || r.de.cols() != manifest.n_bands())
        throw ShapeError("dataset: record shape does not match manifest");
      if (!r.de.allFinite()) throw InputError("dataset: non-finite DE value");
      if (r.label && (*r.label < 0 || *r.label >= manifest.n_classes)) throw InputError("dataset: label out of range");
    }
  }
};

inline constexpr double kVarianceFloor = 1e-12;

inline double gaussian_de(double variance) {
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * std::max(variance, kVarianceFloor));
}

// Band-limited variance per channel and band from a one-second window via the
// FFT periodogram. Bins with low <= f < high count toward a band; interior
// bins are doubled to account for the mirrored half of the spectrum.
inline Matrix band_variance(const Eigen::Ref<const Matrix>& window, const DatasetManifest& manifest) {
  const int n = static_cast<int>(window.cols());
  const int expected = static_cast<int>(std::lround(manifest.fs));
  if (window.rows() != manifest.n_channels() || n != expected)
    throw ShapeError("extract_de: window must be N_G x fs samples (" + std::to_string(manifest.n_channels()) + " x " +
                     std::to_string(expected) + "), got " + std::to_string(window.rows()) + " x " + std::to_string(n));
  if (!window.allFinite()) throw InputError("extract_de: non-finite samples in window");

  const int half = n / 2 + 1;
  std::vector<double> in(n);
  auto* out = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * half));
  fftw_plan plan;
  {
    // Planner calls are not thread-safe.
    static std::mutex planner_mutex;
    std::lock_guard lock(planner_mutex);
    plan = fftw_plan_dft_r2c_1d(n, in.data(), out, FFTW_ESTIMATE);
  }

  Matrix var = Matrix::Zero(window.rows(), manifest.n_bands());
  const double df = manifest.fs / n;
  for (Eigen::Index ch = 0; ch < window.rows(); ++ch) {
    for (int i = 0; i < n; ++i) in[i] = window(ch, i);
    fftw_execute(plan);
    for (int k = 0; k < half; ++k) {
      const double f = k * df;
      const double p = out[k][0] * out[k][0] + out[k][1] * out[k][1];
      const bool mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
      const double contrib = (mirrored ? 2.0 : 1.0) * p / (static_cast<double>(n) * n);
      for (int b = 0; b < manifest.n_bands(); ++b) {
        if (f >= manifest.bands[b].low_hz && f < manifest.bands[b].high_hz) var(ch, b) += contrib;
      }
    }
  }
  {
    static std::mutex destroy_mutex;
    std::lock_guard lock(destroy_mutex);
    fftw_destroy_plan(plan);
  }
  fftw_free(out);
  return var;
}

inline Matrix extract_de(const Eigen::Ref<const Matrix>& window, const DatasetManifest& manifest) {
  Matrix var = band_variance(window, manifest);
  return var.unaryExpr([](double v) { return gaussian_de(v); });
}

enum class SmoothMethod { kalman, moving_average };

struct SmoothConfig {
  SmoothMethod method = SmoothMethod::kalman;
  double r = 10.0;  // observation / process noise ratio
  int window = 5;   // moving-average width
};

// Fixed-parameter scalar Kalman filter with Rauch-Tung-Striebel smoothing.
// Random-walk state (transition 1), process noise 1, observation noise r.
// Prior mean is the first observation with prior variance r.
inline std::vector<double> kalman_smooth(const std::vector<double>& y, double r) {
  const std::size_t n = y.size();
  if (n <= 1) return y;
  const double q = 1.0;
  std::vector<double> m(n), p(n);
  double m_pred = y[0];
  double p_pred = r;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      m_pred = m[t - 1];
      p_pred = p[t - 1] + q;
    }
    const double gain = p_pred / (p_pred + r);
    m[t] = m_pred + gain * (y[t] - m_pred);
    p[t] = (1.0 - gain) * p_pred;
  }
  std::vector<double> s(n);
  s[n - 1] = m[n - 1];
  for (std::size_t t = n - 1; t-- > 0;) {
    const double g = p[t] / (p[t] + q);
    s[t] = m[t] + g * (s[t + 1] - m[t]);
  }
  return s;
}

inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

inline std::vector<double> moving_average(const std::vector<double>& y, int width) {
  const long n = static_cast<long>(y.size());
  if (n <= 1 || width <= 1) return y;
  const long half = width / 2;
  std::vector<double> out(y.size());
  for (long t = 0; t < n; ++t) {
    double acc = 0.0;
    for (long k = -half; k <= half; ++k) acc += y[reflect_index(t + k, n)];
    out[t] = acc / static_cast<double>(2 * half + 1);
  }
  return out;
}

inline std::vector<double> lds_smooth(const std::vector<double>& series, const SmoothConfig& cfg = {}) {
  if (series.empty()) throw InputError("lds_smooth: empty series");
  for (double v : series)
    if (!std::isfinite(v)) throw InputError("lds_smooth: non-finite value");
  return cfg.method == SmoothMethod::kalman ? kalman_smooth(series, cfg.r) : moving_average(series, cfg.window);
}

// Smooths every (channel, band) series independently within each trial.
// Records of one trial are ordered by segment index before smoothing.
inline void smooth_dataset(Dataset& ds, const SmoothConfig& cfg = {}) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> trials;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    trials[{ds.records[i].subject, ds.records[i].trial}].push_back(i);
  for (auto& [key, idx] : trials) {
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return ds.records[a].segment < ds.records[b].segment; });
    const auto& first = ds.records[idx.front()].de;
    std::vector<double> series(idx.size());
    for (Eigen::Index c = 0; c < first.rows(); ++c) {
      for (Eigen::Index b = 0; b < first.cols(); ++b) {
        for (std::size_t t = 0; t < idx.size(); ++t) series[t] = ds.records[idx[t]].de(c, b);
        auto sm = lds_smooth(series, cfg);
        for (std::size_t t = 0; t < idx.size(); ++t) ds.records[idx[t]].de(c, b) = sm[t];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Leave-one-subject-out partition with incomplete labels.

struct DomainSplit {
  int target_subject = 0;
  std::vector<int> labeled_subjects;
  std::vector<int> unlabeled_subjects;
  std::vector<FeatureRecord> S;  // labeled source
  std::vector<FeatureRecord> U;  // unlabeled source, labels stripped
  std::vector<FeatureRecord> T;  // target, labels kept for evaluation only
};

// U takes the N subjects cyclically following the target id in the sorted
// subject list; S is the remainder.
inline DomainSplit partition_loso(const Dataset& ds, int target_subject, int n_unlabeled) {
  const auto subjects = ds.subjects();
  const int n = static_cast<int>(subjects.size());
  if (n_unlabeled < 0 || n_unlabeled > n - 2)
    throw ConfigError("partition_loso: N=" + std::to_string(n_unlabeled) + " outside [0, " + std::to_string(n - 2) + "]");
  const auto pos = std::find(subjects.begin(), subjects.end(), target_subject);
  if (pos == subjects.end()) throw ConfigError("partition_loso: unknown target subject " + std::to_string(target_subject));
  const int t = static_cast<int>(pos - subjects.begin());

  DomainSplit split;
  split.target_subject = target_subject;
  std::set<int> unlabeled;
  for (int k = 1; k <= n_unlabeled; ++k) {
    const int s = subjects[(t + k) % n];
    split.unlabeled_subjects.push_back(s);
    unlabeled.insert(s);
  }
  for (int s : subjects)
    if (s != target_subject && !unlabeled.count(s)) split.labeled_subjects.push_back(s);

  for (const auto& r : ds.records) {
    if (r.subject == target_subject) {
      split.T.push_back(r);
    } else if (unlabeled.count(r.subject)) {
      auto u = r;
      u.label.reset();
      split.U.push_back(std::move(u));
    } else {
      if (!r.label) throw ProtocolError("partition_loso: labeled-source record without label");
      split.S.push_back(r);
    }
  }
  return split;
}

}  // namespace dsagc::featio
