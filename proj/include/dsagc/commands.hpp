#pragma once

// Command implementations behind the dsagc executable. Each returns the
// process exit status for outcomes that are not exceptions (failed folds);
// ConfigError and other Error types propagate to the caller.

#include "dsagc/checkpoint.hpp"
#include "dsagc/plot.hpp"
#include "dsagc/raw.hpp"
#include "dsagc/report.hpp"
#include "dsagc/synthetic.hpp"
#include "dsagc/train.hpp"
#include "dsagc/tsne.hpp"

#include <iostream>

namespace dsagc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  featio::SynthConfig synth;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  bool per_subject = false;  // write a directory of per-subject containers
};

inline std::string manifest_summary(const featio::Dataset& ds) {
  std::ostringstream os;
  const auto& m = ds.manifest;
  os << "records: " << ds.records.size() << "\n"
     << "subjects: " << ds.subjects().size() << "\n"
     << "trials per subject: " << m.n_trials_per_subject << "\n"
     << "channels: " << m.n_channels() << "\n"
     << "bands: " << m.n_bands() << "\n"
     << "classes: " << m.n_classes << "\n"
     << "fs: " << m.fs << "\n"
     << "fingerprint: " << engine::hex64(featio::fingerprint(ds)) << "\n";
  return os.str();
}

inline int cmd_synth(const SynthOptions& o, std::ostream& log = std::cout) {
  if (o.out.empty()) throw ConfigError("synth: --out is required");
  const auto ds = featio::generate_synthetic(o.synth, o.seed);
  if (o.per_subject) featio::save_feature_dir(ds, o.out);
  else featio::save_features(ds, o.out);
  log << "wrote " << o.out.string() << "\n" << manifest_summary(ds);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractOptions {
  std::filesystem::path input;
  std::filesystem::path out;
  std::string smooth = "kalman";  // kalman | moving_average | none
};

inline int cmd_extract(const ExtractOptions& o, std::ostream& log = std::cout) {
  if (o.input.empty() || o.out.empty()) throw ConfigError("extract: --input and --out are required");
  std::optional<featio::SmoothConfig> smooth;
  if (o.smooth == "kalman") smooth = featio::SmoothConfig{};
  else if (o.smooth == "moving_average") smooth = featio::SmoothConfig{featio::SmoothMethod::moving_average};
  else if (o.smooth != "none") throw ConfigError("extract: --smooth must be kalman, moving_average or none");
  const auto ds = featio::extract_directory(o.input, smooth);
  featio::save_features(ds, o.out);
  log << "wrote " << o.out.string() << "\n" << manifest_summary(ds);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

inline featio::Dataset load_dataset(const std::string& path) {
  if (path.empty()) throw ConfigError("--dataset is required");
  if (!std::filesystem::exists(path)) throw ConfigError("dataset not found: " + path);
  auto ds = featio::load_features(path);
  ds.validate();
  return ds;
}

inline std::string run_tag(const engine::TrainConfig& t, int n_unlabeled) {
  std::string tag = engine::method_name(t);
  for (auto& ch : tag)
    if (ch == '+') ch = '-';
  tag += "_N" + std::to_string(n_unlabeled);
  if (t.ce_mode != fusion::CeMode::inside_log) tag += std::string("_") + fusion::ce_mode_name(t.ce_mode);
  return tag + "_seed" + std::to_string(t.seed);
}

// Checks everything that can be checked before any training starts.
inline void preflight(const RunConfig& rc, const featio::Dataset& ds) {
  validate(rc);
  const int n_subj = static_cast<int>(ds.subjects().size());
  if (n_subj < 3) throw ConfigError("dataset has " + std::to_string(n_subj) + " subjects; at least 3 are needed");
  if (rc.n_unlabeled > n_subj - 2)
    throw ConfigError("N=" + std::to_string(rc.n_unlabeled) + " outside [0, " + std::to_string(n_subj - 2) + "]");
  engine::dims_for(ds.manifest, rc.train);
  for (int et : rc.et_sweep)
    if (et > rc.train.max_epochs) throw ConfigError("et_sweep value exceeds max_epochs");
}

struct TrainSummary {
  std::filesystem::path metrics;
  std::vector<engine::ProtocolResult> runs;
  int failures = 0;
};

inline TrainSummary run_training(const RunConfig& rc, const featio::Dataset& ds, std::ostream& log) {
  preflight(rc, ds);
  const std::filesystem::path out = rc.out;
  std::filesystem::create_directories(out);
  const std::vector<int> ets = rc.et_sweep.empty() ? std::vector<int>{rc.train.e_t} : rc.et_sweep;
  const std::string tag = run_tag(rc.train, rc.n_unlabeled);
  TrainSummary summary;
  summary.metrics = out / ("metrics_" + tag + (rc.et_sweep.empty() ? "" : "_etsweep") + ".csv");
  std::string csv;
  const std::uint64_t fp = featio::fingerprint(ds);

  for (int et : ets) {
    engine::TrainConfig cfg = rc.train;
    cfg.e_t = et;
    const std::filesystem::path run_dir = out / (tag + "_et" + std::to_string(et));
    engine::ProtocolOptions popts;
    popts.jobs = rc.jobs;
    popts.on_fold = [&](const engine::FoldOutcome& f) {
      log << "[" << tag << " E_t=" << et << "] fold target=" << f.target_subject << ": ";
      if (f.ok) log << "accuracy " << engine::format_fixed(f.result.accuracy, 4) << "\n";
      else log << "FAILED: " << f.error << "\n";
    };
    auto pr = engine::run_protocol(ds, rc.n_unlabeled, cfg, popts);

    RunConfig saved = rc;
    saved.train = cfg;
    saved.et_sweep.clear();
    featio::write_file(run_dir / "config.txt", render(saved));
    for (const auto& f : pr.folds) {
      const std::string fold = "fold_" + std::to_string(f.target_subject);
      featio::write_file(run_dir / "splits" / (fold + ".json"),
                         engine::split_manifest(f, rc.n_unlabeled, cfg).dump(2) + "\n");
      if (!f.ok) continue;
      engine::Checkpoint ck{f.result.params, saved, f.target_subject, rc.n_unlabeled, cfg.max_epochs, fp};
      engine::save_checkpoint(ck, run_dir / "checkpoints" / (fold + ".ckpt"));
      for (const auto& [epoch, params] : f.result.stage_params) {
        ck.params = params;
        ck.epoch = epoch;
        engine::save_checkpoint(ck, run_dir / "checkpoints" / (fold + "_epoch" + std::to_string(epoch) + ".ckpt"));
      }
    }
    std::string part = engine::metrics_csv(pr, ds.manifest.n_classes);
    if (!csv.empty()) part.erase(0, part.find('\n') + 1);  // header once
    csv += part;
    log << "[" << tag << " E_t=" << et << "] mean accuracy " << engine::format_fixed(pr.mean_acc, 4) << " std "
        << engine::format_fixed(pr.std_acc, 4) << "\n";
    summary.failures += pr.failures();
    summary.runs.push_back(std::move(pr));
  }
  featio::write_file(summary.metrics, csv);
  log << "wrote " << summary.metrics.string() << "\n";
  return summary;
}

inline int cmd_train(const RunConfig& rc, std::ostream& log = std::cout) {
  const auto ds = load_dataset(rc.dataset);
  const auto s = run_training(rc, ds, log);
  if (s.failures > 0) {
    log << s.failures << " fold(s) failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate: the full model followed by each single-switch variant.

inline int cmd_ablate(const RunConfig& rc, const std::vector<std::string>& variants, std::ostream& log = std::cout) {
  const auto ds = load_dataset(rc.dataset);
  std::vector<engine::Ablation> runs{{}};
  for (const auto& v : variants) {
    engine::Ablation a;
    engine::set_ablation(a, v);
    runs.push_back(a);
  }
  int failures = 0;
  for (const auto& a : runs) {
    RunConfig r = rc;
    r.train.ablate = a;
    failures += run_training(r, ds, log).failures;
  }
  return failures > 0 ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------------------
// embed-plot

struct EmbedOptions {
  std::filesystem::path checkpoint;
  std::string dataset;
  std::string stage;  // label; defaults to the checkpoint's epoch
  std::filesystem::path out;
  std::uint64_t seed = 0;
  double perplexity = 30.0;
  int iterations = 1000;
  int max_per_domain = 200;
};

inline int cmd_embed_plot(const EmbedOptions& o, std::ostream& log = std::cout) {
  if (o.checkpoint.empty() || o.out.empty()) throw ConfigError("embed-plot: --checkpoint and --out are required");
  if (o.max_per_domain < 1) throw ConfigError("embed-plot: --max-per-domain must be >= 1");
  const auto ds = load_dataset(o.dataset);
  const auto ck = engine::load_checkpoint(o.checkpoint);
  engine::check_compatible(ck, ds.manifest);

  const auto split = featio::partition_loso(ds, ck.target_subject, ck.n_unlabeled);
  // U labels are stripped by the split; recover them by record id for colouring.
  std::map<std::tuple<int, int, int>, int> label_of;
  for (const auto& r : ds.records) label_of[{r.subject, r.trial, r.segment}] = r.label.value_or(-1);

  const std::pair<const std::vector<featio::FeatureRecord>*, adapt::Domain> sets[] = {
      {&split.S, adapt::Domain::S}, {&split.U, adapt::Domain::U}, {&split.T, adapt::Domain::T}};
  std::vector<Matrix> parts;
  std::vector<viz::ScatterPoint> pts;
  Eigen::Index rows = 0;
  for (const auto& [records, dom] : sets) {
    const auto picked = engine::spaced(*records, o.max_per_domain);
    if (picked.empty()) continue;
    parts.push_back(engine::infer(ck.params, picked, ck.config.train, dom).fused);
    rows += parts.back().rows();
    const viz::Marker m = dom == adapt::Domain::S ? viz::Marker::circle
                          : dom == adapt::Domain::U ? viz::Marker::asterisk
                                                    : viz::Marker::triangle;
    for (const auto* r : picked) pts.push_back({0.0, 0.0, m, label_of.at({r->subject, r->trial, r->segment})});
  }
  Matrix x(rows, 2 * engine::kStreamWidth);
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    x.middleRows(row, p.rows()) = p;
    row += p.rows();
  }

  viz::TsneOptions topts;
  topts.seed = o.seed;
  topts.perplexity = o.perplexity;
  topts.iterations = o.iterations;
  const auto emb = viz::tsne(x, topts);
  if (!emb.warning.empty()) log << "warning: " << emb.warning << "\n";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pts[i].x = emb.y(static_cast<Eigen::Index>(i), 0);
    pts[i].y = emb.y(static_cast<Eigen::Index>(i), 1);
  }
  const std::string stage = o.stage.empty() ? "epoch " + std::to_string(ck.epoch) : o.stage;
  const std::map<std::string, std::string> meta = {
      {"Software", "dsagc embed-plot"},
      {"Title", "fused features, target subject " + std::to_string(ck.target_subject) + ", " + stage},
      {"dsagc.stage", stage},
      {"dsagc.target_subject", std::to_string(ck.target_subject)},
      {"dsagc.n_unlabeled", std::to_string(ck.n_unlabeled)},
      {"dsagc.points", std::to_string(pts.size())},
      {"dsagc.method", emb.used_pca ? "pca" : "tsne"},
      {"dsagc.tsne_seed", std::to_string(o.seed)},
      {"dsagc.perplexity", detail::render_double(o.perplexity)},
      {"dsagc.iterations", std::to_string(o.iterations)},
      {"dsagc.dataset", engine::hex64(ck.dataset_fingerprint)},
      {"dsagc.legend", "circle=S asterisk=U triangle=T; red/purple/blue=class 0/1/2"},
  };
  if (ck.dataset_fingerprint != featio::fingerprint(ds))
    log << "warning: checkpoint was trained on a different dataset fingerprint\n";
  viz::write_png(viz::scatter(pts), o.out, meta);
  log << "wrote " << o.out.string() << " (" << pts.size() << " points)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// report

inline int cmd_report(const std::filesystem::path& dir, const std::filesystem::path& out, std::ostream& log = std::cout) {
  const auto table = report::build_table(dir);
  log << table.text();
  if (!out.empty()) {
    featio::write_file(out / "report.csv", table.csv());
    featio::write_file(out / "report.txt", table.text());
  }
  return kExitOk;
}

}  // namespace dsagc::cli
