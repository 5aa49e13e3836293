#pragma once

// Staged training for one leave-one-subject-out fold, evaluation on the
// target subject, and the full protocol over all folds.

#include "dsagc/container.hpp"
#include "dsagc/model.hpp"
#include "dsagc/optim.hpp"

#include <atomic>
#include <cstdio>
#include <functional>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace dsagc::engine {

struct LossTrace {
  double ce = 0.0, disc = 0.0, gcn = 0.0, gcl = 0.0, total = 0.0;
};

// What entered the batches of one epoch.
struct EpochProvenance {
  int epoch = 0;  // 1-based
  int stage = 2;
  int steps = 0;
  long s_rows = 0, u_rows = 0, t_rows = 0;
  std::vector<int> u_subjects;  // distinct subjects of U rows seen
};

struct EmbeddingSnapshot {
  int epoch = 0;  // 0 = before training
  Matrix points;  // fused features, one row per record
  std::vector<adapt::Domain> domains;
  std::vector<int> labels;  // class labels (-1 if unknown)
};

struct FoldResult {
  int target_subject = 0;
  int n_unlabeled = 0;
  std::vector<int> labeled_subjects;
  std::vector<int> unlabeled_subjects;
  double accuracy = 0.0;
  Matrix confusion;  // rows: true class, cols: predicted
  std::vector<double> recall;
  std::vector<LossTrace> trace;  // one entry per epoch
  int stage_switch_epoch = 0;
  std::vector<EpochProvenance> provenance;
  std::vector<EmbeddingSnapshot> snapshots;
  // Parameters at the intermediate snapshot epochs (captured with embeddings).
  std::vector<std::pair<int, ModelParams>> stage_params;
  ModelParams params;
};

// Rows per domain in a step: halves in stage 2, thirds in stage 3 (S takes the
// remainder). Stage 3 without U falls back to halves.
struct SubBatch {
  int s = 0, u = 0, t = 0;
};

inline SubBatch sub_batch_sizes(int batch, int stage, bool have_u) {
  adapt::check_stage(stage);
  if (stage == 3 && have_u) {
    const int third = batch / 3;
    return {batch - 2 * third, third, third};
  }
  const int half = batch / 2;
  return {batch - half, 0, half};
}

// Endless shuffled pass over an index range, reshuffled on wrap.
class Cycler {
 public:
  Cycler(std::size_t n, std::mt19937_64& rng) : rng_(rng), order_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::mt19937_64& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Evaluation-mode fused features and class probabilities, computed in chunks
// of `batch` rows in the given order (last partial chunk kept).
struct Inference {
  Matrix probs;
  Matrix fused;
};

inline Inference infer(const ModelParams& params, const std::vector<const featio::FeatureRecord*>& recs,
                       const TrainConfig& cfg, adapt::Domain domain = adapt::Domain::T) {
  const ModelDims& d = params.dims;
  Inference out{Matrix::Zero(static_cast<Eigen::Index>(recs.size()), d.n_classes),
                Matrix(static_cast<Eigen::Index>(recs.size()), 2 * kStreamWidth)};
  std::mt19937_64 unused(0);
  for (std::size_t begin = 0; begin < recs.size(); begin += cfg.batch_size) {
    const std::size_t end = std::min(recs.size(), begin + cfg.batch_size);
    std::vector<const featio::FeatureRecord*> chunk(recs.begin() + begin, recs.begin() + end), none;
    // Batch layout only matters for loss computation, which is off here.
    DomainBatch batch = domain == adapt::Domain::S ? make_batch(chunk, none, none, 3)
                        : domain == adapt::Domain::U ? make_batch(none, chunk, none, 3)
                                                     : make_batch(none, none, chunk, 3);
    const auto n = static_cast<Eigen::Index>(end - begin);
    for (int view = 0; view < cfg.eval_views; ++view) {
      ad::Tape tape;
      tape.training = false;
      ad::Binding bind(tape, params.tensors);
      ForwardOptions opt;
      opt.compute_losses = false;
      opt.eval_view = view;
      auto o = forward(tape, bind, d, batch, cfg, unused, unused, opt);
      out.probs.middleRows(static_cast<Eigen::Index>(begin), n) += tape.value(o.probs) / cfg.eval_views;
      if (view == 0) out.fused.middleRows(static_cast<Eigen::Index>(begin), n) = tape.value(o.fused);
    }
  }
  return out;
}

inline std::vector<const featio::FeatureRecord*> pointers(const std::vector<featio::FeatureRecord>& v) {
  std::vector<const featio::FeatureRecord*> out;
  out.reserve(v.size());
  for (const auto& r : v) out.push_back(&r);
  return out;
}

// Evenly spaced subsample of at most `cap` records, order preserved.
inline std::vector<const featio::FeatureRecord*> spaced(const std::vector<featio::FeatureRecord>& v, int cap) {
  std::vector<const featio::FeatureRecord*> out;
  if (v.empty() || cap <= 0) return out;
  const std::size_t n = std::min<std::size_t>(v.size(), static_cast<std::size_t>(cap));
  for (std::size_t i = 0; i < n; ++i) out.push_back(&v[i * v.size() / n]);
  return out;
}

inline EmbeddingSnapshot take_snapshot(const ModelParams& params, const featio::DomainSplit& split,
                                       const TrainConfig& cfg, int epoch) {
  EmbeddingSnapshot snap;
  snap.epoch = epoch;
  std::vector<Matrix> parts;
  const std::pair<const std::vector<featio::FeatureRecord>*, adapt::Domain> sets[] = {
      {&split.S, adapt::Domain::S}, {&split.U, adapt::Domain::U}, {&split.T, adapt::Domain::T}};
  Eigen::Index rows = 0;
  for (const auto& [records, dom] : sets) {
    const auto picked = spaced(*records, cfg.embed_max_per_domain);
    if (picked.empty()) continue;
    parts.push_back(infer(params, picked, cfg, dom).fused);
    rows += parts.back().rows();
    for (const auto* r : picked) {
      snap.domains.push_back(dom);
      // U labels are stripped from the split; snapshots have no other source.
      snap.labels.push_back(r->label.value_or(-1));
    }
  }
  snap.points.resize(rows, 2 * kStreamWidth);
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    snap.points.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  return snap;
}

struct TrainHooks {
  std::function<void(int epoch, const LossTrace&)> on_epoch;
};

inline FoldResult train_fold(const featio::DomainSplit& split, const featio::DatasetManifest& manifest,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (split.S.empty()) throw ProtocolError("train_fold: labeled source domain is empty");
  if (split.T.empty()) throw ProtocolError("train_fold: target domain is empty");
  const ModelDims dims = dims_for(manifest, cfg);

  FoldResult res;
  res.target_subject = split.target_subject;
  res.n_unlabeled = static_cast<int>(split.unlabeled_subjects.size());
  res.labeled_subjects = split.labeled_subjects;
  res.unlabeled_subjects = split.unlabeled_subjects;
  res.stage_switch_epoch = cfg.e_t;

  std::mt19937_64 init_rng(derive_seed(cfg.seed, kStreamInit));
  res.params = init_params(dims, init_rng);
  ModelParams& params = res.params;
  RmsPropState opt_state = RmsPropState::zeros_like(params.tensors);
  const RmsPropConfig opt_cfg{cfg.lr, cfg.rms_decay, cfg.rms_eps};

  const auto tgt = static_cast<std::uint64_t>(split.target_subject);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, kStreamShuffle, tgt));
  std::mt19937_64 aug_rng(derive_seed(cfg.seed, kStreamAug, tgt));
  std::mt19937_64 drop_rng(derive_seed(cfg.seed, kStreamDropout, tgt));

  const auto s_ptr = pointers(split.S), u_ptr = pointers(split.U), t_ptr = pointers(split.T);
  Cycler u_cycle(u_ptr.size(), shuffle_rng);
  Cycler t_cycle(t_ptr.size(), shuffle_rng);
  std::vector<std::size_t> s_order(s_ptr.size());
  std::iota(s_order.begin(), s_order.end(), std::size_t{0});

  if (cfg.capture_embeddings) {
    res.snapshots.push_back(take_snapshot(params, split, cfg, 0));
    res.stage_params.emplace_back(0, params);
  }

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const int stage = epoch <= cfg.e_t ? 2 : 3;
    SubBatch sb = sub_batch_sizes(cfg.batch_size, stage, !u_ptr.empty());
    sb.s = std::min<int>(sb.s, static_cast<int>(s_ptr.size()));
    const int steps = static_cast<int>(s_ptr.size()) / sb.s;  // drop-last
    std::shuffle(s_order.begin(), s_order.end(), shuffle_rng);

    EpochProvenance prov;
    prov.epoch = epoch;
    prov.stage = stage;
    prov.steps = steps;
    std::set<int> u_seen;
    LossTrace sum;
    for (int step = 0; step < steps; ++step) {
      std::vector<const featio::FeatureRecord*> bs, bu, bt;
      for (int i = 0; i < sb.s; ++i) bs.push_back(s_ptr[s_order[static_cast<std::size_t>(step * sb.s + i)]]);
      for (int i = 0; i < sb.u; ++i) bu.push_back(u_ptr[u_cycle.next()]);
      for (int i = 0; i < sb.t; ++i) bt.push_back(t_ptr[t_cycle.next()]);
      const DomainBatch batch = make_batch(bs, bu, bt, stage);
      prov.s_rows += batch.n_s;
      prov.u_rows += batch.n_u;
      prov.t_rows += batch.n_t;
      for (const auto& id : batch.ids)
        if (batch.domains[&id - batch.ids.data()] == adapt::Domain::U) u_seen.insert(id.subject);

      ad::Tape tape;
      ad::Binding bind(tape, params.tensors);
      const auto out = forward(tape, bind, dims, batch, cfg, aug_rng, drop_rng);
      const ad::Var loss = total_loss(tape, out, cfg);
      tape.backward(loss);
      rmsprop_step(params.tensors, bind.grads(), opt_state, opt_cfg);
      if (!params.all_finite())
        throw NumericError("train_fold: non-finite parameter after epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));

      auto val = [&](ad::Var v) { return v.valid() ? tape.scalar(v) : 0.0; };
      sum.ce += val(out.l_ce);
      sum.disc += val(out.l_disc);
      sum.gcn += val(out.l_gcn);
      sum.gcl += val(out.l_gcl);
      sum.total += tape.scalar(loss);
    }
    prov.u_subjects.assign(u_seen.begin(), u_seen.end());
    res.provenance.push_back(std::move(prov));
    const double inv = steps > 0 ? 1.0 / steps : 0.0;
    const LossTrace mean{sum.ce * inv, sum.disc * inv, sum.gcn * inv, sum.gcl * inv, sum.total * inv};
    res.trace.push_back(mean);
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean);
    if (cfg.capture_embeddings && epoch == cfg.snapshot_epoch && epoch != cfg.max_epochs) {
      res.snapshots.push_back(take_snapshot(params, split, cfg, epoch));
      res.stage_params.emplace_back(epoch, params);
    }
  }
  if (cfg.capture_embeddings) res.snapshots.push_back(take_snapshot(params, split, cfg, cfg.max_epochs));

  // Target evaluation in stored order.
  const Inference inf = infer(params, t_ptr, cfg);
  const int c = dims.n_classes;
  res.confusion = Matrix::Zero(c, c);
  int correct = 0;
  for (std::size_t i = 0; i < t_ptr.size(); ++i) {
    if (!t_ptr[i]->label) throw ProtocolError("train_fold: target record without evaluation label");
    Eigen::Index pred = 0;
    inf.probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&pred);
    const int truth = *t_ptr[i]->label;
    res.confusion(truth, pred) += 1.0;
    correct += truth == pred;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(t_ptr.size());
  res.recall.resize(c);
  for (int k = 0; k < c; ++k) {
    const double n = res.confusion.row(k).sum();
    res.recall[k] = n > 0 ? res.confusion(k, k) / n : 0.0;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Protocol.

struct FoldOutcome {
  int target_subject = 0;
  bool ok = false;
  std::string error;
  FoldResult result;
};

struct ProtocolResult {
  int n_unlabeled = 0;
  TrainConfig cfg;
  std::uint64_t fingerprint = 0;
  std::vector<FoldOutcome> folds;  // ordered by target subject
  double mean_acc = 0.0;
  double std_acc = 0.0;  // population
  std::vector<double> mean_recall;

  int failures() const {
    int n = 0;
    for (const auto& f : folds) n += !f.ok;
    return n;
  }
};

struct ProtocolOptions {
  int jobs = 1;
  std::vector<int> targets;  // empty = every subject
  std::function<void(const FoldOutcome&)> on_fold;
};

inline ProtocolResult run_protocol(const featio::Dataset& ds, int n_unlabeled, const TrainConfig& cfg,
                                   const ProtocolOptions& opts = {}) {
  cfg.validate();
  const auto subjects = ds.subjects();
  if (subjects.size() < 3) throw ConfigError("run_protocol: need at least 3 subjects");
  if (n_unlabeled < 0 || n_unlabeled > static_cast<int>(subjects.size()) - 2)
    throw ConfigError("run_protocol: N=" + std::to_string(n_unlabeled) + " outside [0, " +
                      std::to_string(subjects.size() - 2) + "]");
  dims_for(ds.manifest, cfg);

  ProtocolResult pr;
  pr.n_unlabeled = n_unlabeled;
  pr.cfg = cfg;
  pr.fingerprint = featio::fingerprint(ds);
  const std::vector<int> targets = opts.targets.empty() ? subjects : opts.targets;
  pr.folds.resize(targets.size());

  std::atomic<std::size_t> next{0};
  std::mutex report_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < targets.size(); i = next++) {
      FoldOutcome& f = pr.folds[i];
      f.target_subject = targets[i];
      try {
        const auto split = featio::partition_loso(ds, targets[i], n_unlabeled);
        f.result = train_fold(split, ds.manifest, cfg);
        f.ok = true;
      } catch (const std::exception& e) {
        f.ok = false;
        f.error = e.what();
      }
      if (opts.on_fold) {
        std::lock_guard<std::mutex> lock(report_mu);
        opts.on_fold(f);
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opts.jobs, static_cast<int>(targets.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<double> accs;
  pr.mean_recall.assign(ds.manifest.n_classes, 0.0);
  for (const auto& f : pr.folds) {
    if (!f.ok) continue;
    accs.push_back(f.result.accuracy);
    for (int k = 0; k < ds.manifest.n_classes; ++k) pr.mean_recall[k] += f.result.recall[k];
  }
  if (!accs.empty()) {
    for (double a : accs) pr.mean_acc += a;
    pr.mean_acc /= static_cast<double>(accs.size());
    for (double a : accs) pr.std_acc += (a - pr.mean_acc) * (a - pr.mean_acc);
    pr.std_acc = std::sqrt(pr.std_acc / static_cast<double>(accs.size()));
    for (auto& r : pr.mean_recall) r /= static_cast<double>(accs.size());
  }
  return pr;
}

inline std::string method_name(const TrainConfig& cfg) {
  const std::string tag = ablation_tag(cfg.ablate);
  return tag.empty() ? "full" : tag;
}

inline std::string format_fixed(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// One row per fold plus a summary row. Failed folds carry status "failed"
// and empty metric cells.
inline std::string metrics_csv(const ProtocolResult& pr, int n_classes) {
  std::ostringstream os;
  os << "row,target_subject,n_unlabeled,e_t,method,ce_mode,seed,accuracy,std";
  for (int k = 0; k < n_classes; ++k) os << ",recall_" << k;
  os << ",dataset,status\n";
  const std::string common = std::to_string(pr.n_unlabeled) + "," + std::to_string(pr.cfg.e_t) + "," +
                             method_name(pr.cfg) + "," + fusion::ce_mode_name(pr.cfg.ce_mode) + "," +
                             std::to_string(pr.cfg.seed);
  for (const auto& f : pr.folds) {
    os << "fold," << f.target_subject << "," << common << ",";
    if (f.ok) {
      os << format_fixed(f.result.accuracy) << ",";
      for (double r : f.result.recall) os << "," << format_fixed(r);
    } else {
      os << ",";
      for (int k = 0; k < n_classes; ++k) os << ",";
    }
    os << "," << hex64(pr.fingerprint) << "," << (f.ok ? "ok" : "failed") << "\n";
  }
  os << "summary,all," << common << "," << format_fixed(pr.mean_acc) << "," << format_fixed(pr.std_acc);
  for (double r : pr.mean_recall) os << "," << format_fixed(r);
  os << "," << hex64(pr.fingerprint) << "," << (pr.failures() ? "failed" : "ok") << "\n";
  return os.str();
}

// Per-fold split manifest: subject assignment and per-epoch batch provenance.
inline nlohmann::json split_manifest(const FoldOutcome& f, int n_unlabeled, const TrainConfig& cfg) {
  nlohmann::json j;
  j["target_subject"] = f.target_subject;
  j["n_unlabeled"] = n_unlabeled;
  j["e_t"] = cfg.e_t;
  j["status"] = f.ok ? "ok" : "failed";
  if (!f.ok) {
    j["error"] = f.error;
    return j;
  }
  const auto& r = f.result;
  j["labeled_subjects"] = r.labeled_subjects;
  j["unlabeled_subjects"] = r.unlabeled_subjects;
  j["stage_switch_epoch"] = r.stage_switch_epoch;
  j["accuracy"] = r.accuracy;
  auto& epochs = j["epochs"] = nlohmann::json::array();
  for (std::size_t e = 0; e < r.provenance.size(); ++e) {
    const auto& p = r.provenance[e];
    const auto& t = r.trace[e];
    epochs.push_back({{"epoch", p.epoch},
                      {"stage", p.stage},
                      {"steps", p.steps},
                      {"s_rows", p.s_rows},
                      {"u_rows", p.u_rows},
                      {"t_rows", p.t_rows},
                      {"u_subjects", p.u_subjects},
                      {"loss", {{"ce", t.ce}, {"disc", t.disc}, {"gcn", t.gcn}, {"gcl", t.gcl}, {"total", t.total}}}});
  }
  return j;
}

}  // namespace dsagc::engine
