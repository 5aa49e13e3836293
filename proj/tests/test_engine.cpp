#include "dsagc/checkpoint.hpp"
#include "dsagc/gradcheck.hpp"
#include "dsagc/optim.hpp"
#include "dsagc/synthetic.hpp"
#include "dsagc/train.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace dsagc;
using namespace dsagc::engine;
using adapt::Domain;

namespace {

featio::SynthConfig small_synth() {
  featio::SynthConfig c;
  c.n_subjects = 4;
  c.n_trials = 3;
  c.segments_per_trial = 8;
  c.n_channels = 8;
  return c;
}

TrainConfig small_train() {
  TrainConfig c;
  c.batch_size = 12;
  c.max_epochs = 4;
  c.e_t = 2;
  c.drop_count = 2;
  c.heads = 4;
  return c;
}

DomainBatch micro_batch(const featio::Dataset& ds, int stage) {
  const auto split = featio::partition_loso(ds, 0, 1);
  std::vector<const featio::FeatureRecord*> s, u, t;
  for (int i = 0; i < 3; ++i) {
    s.push_back(&split.S[static_cast<std::size_t>(i) * 9]);
    if (stage == 3) u.push_back(&split.U[static_cast<std::size_t>(i) * 7]);
    t.push_back(&split.T[static_cast<std::size_t>(i) * 5]);
  }
  return make_batch(s, u, t, stage);
}

std::vector<Matrix> values(const ModelParams& p) {
  std::vector<Matrix> v;
  for (const auto& t : p.tensors) v.push_back(t.value);
  return v;
}

std::vector<std::string> names(const ModelParams& p) {
  std::vector<std::string> v;
  for (const auto& t : p.tensors) v.push_back(t.name);
  return v;
}

}  // namespace

TEST(RmsProp, SingleStepFromZeroState) {
  std::vector<ad::Parameter> params = {{"w", Matrix::Constant(1, 1, 1.0)}};
  auto state = RmsPropState::zeros_like(params);
  rmsprop_step(params, {Matrix::Constant(1, 1, 1.0)}, state, {});
  // s = 0.01, step = 1e-3 / (0.1 + 1e-8).
  EXPECT_NEAR(params[0].value(0, 0), 1.0 - 1e-3 / (0.1 + 1e-8), 1e-15);
  EXPECT_NEAR(params[0].value(0, 0), 0.99, 1e-6);
  EXPECT_NEAR(state.square_avg[0](0, 0), 0.01, 1e-15);
}

TEST(RmsProp, RejectsNonFiniteAndMismatchedGradients) {
  std::vector<ad::Parameter> params = {{"w", Matrix::Zero(2, 2)}};
  auto state = RmsPropState::zeros_like(params);
  Matrix g = Matrix::Zero(2, 2);
  g(1, 0) = std::numeric_limits<double>::infinity();
  try {
    rmsprop_step(params, {g}, state, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
  EXPECT_EQ(params[0].value, Matrix::Zero(2, 2));
  EXPECT_THROW(rmsprop_step(params, {Matrix::Zero(3, 2)}, state, {}), ShapeError);
}

TEST(Model, InitLayoutAndShapes) {
  std::mt19937_64 rng(1);
  const ModelDims d{62, 5, 3, 13, 3};
  const auto p = init_params(d, rng);
  ASSERT_EQ(p.tensors.size(), static_cast<std::size_t>(kSlotCount));
  EXPECT_EQ(p[kNsW1].rows(), 310);
  EXPECT_EQ(p[kSW1].rows(), 245);
  EXPECT_EQ(p[kWq].rows(), 128);
  EXPECT_EQ(p[kClsW].cols(), 3);
  EXPECT_EQ(p[kDW3].cols(), 3);
  EXPECT_EQ(p[kAdjW], Matrix::Ones(1, 5));
  EXPECT_EQ(p[kChebTheta](0, 0), 1.0);
  EXPECT_EQ(p[kNsB1], Matrix::Zero(1, 64));
  EXPECT_LE(p[kNsW1].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(310.0));
}

TEST(Model, ForwardShapesAndLosses) {
  const auto ds = featio::generate_synthetic(small_synth(), 1);
  auto cfg = small_train();
  const auto dims = dims_for(ds.manifest, cfg);
  std::mt19937_64 rng(2), aug(3), drop(4);
  const auto params = init_params(dims, rng);
  for (int stage : {2, 3}) {
    const auto batch = micro_batch(ds, stage);
    ad::Tape t;
    ad::Binding bind(t, params.tensors);
    const auto o = forward(t, bind, dims, batch, cfg, aug, drop);
    EXPECT_EQ(t.value(o.probs).rows(), batch.rows());
    EXPECT_EQ(t.value(o.probs).cols(), 3);
    EXPECT_EQ(t.value(o.fused).cols(), 128);
    EXPECT_EQ(t.value(o.features_ns).cols(), 64);
    EXPECT_EQ(t.value(o.features_s).cols(), 64);
    EXPECT_EQ(t.value(o.weights).rows(), batch.n_s);
    EXPECT_NEAR(t.value(o.weights).sum(), 1.0, 1e-12);
    EXPECT_LT((t.value(o.probs).rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    const double parts = t.scalar(o.l_ce) + t.scalar(o.l_disc) + t.scalar(o.l_gcn) + t.scalar(o.l_gcl);
    EXPECT_NEAR(t.scalar(total_loss(t, o, cfg)), parts, 1e-9);
  }
}

TEST(Model, AblationsRemoveTerms) {
  const auto ds = featio::generate_synthetic(small_synth(), 1);
  auto cfg = small_train();
  cfg.ablate = {true, true, true, true};
  const auto dims = dims_for(ds.manifest, cfg);
  std::mt19937_64 rng(2), aug(3), drop(4);
  const auto params = init_params(dims, rng);
  const auto batch = micro_batch(ds, 3);
  ad::Tape t;
  ad::Binding bind(t, params.tensors);
  const auto o = forward(t, bind, dims, batch, cfg, aug, drop);
  EXPECT_FALSE(o.l_disc.valid());
  EXPECT_FALSE(o.l_gcl.valid());
  EXPECT_FALSE(o.weights.valid());
  EXPECT_NEAR(t.scalar(total_loss(t, o, cfg)), t.scalar(o.l_ce) + t.scalar(o.l_gcn), 1e-12);
  // Concatenation instead of attention.
  Matrix cat(batch.rows(), 128);
  cat << t.value(o.features_ns), t.value(o.features_s);
  EXPECT_EQ(t.value(o.fused), cat);
}

TEST(Model, BatchRejectsUBeforeSwitch) {
  const auto ds = featio::generate_synthetic(small_synth(), 1);
  const featio::FeatureRecord* r = &ds.records[0];
  EXPECT_THROW(make_batch({r}, {r}, {r}, 2), ProtocolError);
  featio::FeatureRecord unlabeled = ds.records[0];
  unlabeled.label.reset();
  EXPECT_THROW(make_batch({&unlabeled}, {}, {r}, 3), ProtocolError);
}

TEST(Training, SubBatchSizes) {
  const auto h = sub_batch_sizes(48, 2, true);
  EXPECT_EQ(h.s, 24);
  EXPECT_EQ(h.u, 0);
  EXPECT_EQ(h.t, 24);
  const auto th = sub_batch_sizes(48, 3, true);
  EXPECT_EQ(th.s, 16);
  EXPECT_EQ(th.u, 16);
  EXPECT_EQ(th.t, 16);
  const auto odd = sub_batch_sizes(47, 3, true);
  EXPECT_EQ(odd.s + odd.u + odd.t, 47);
  EXPECT_EQ(odd.u, 15);
  const auto no_u = sub_batch_sizes(48, 3, false);
  EXPECT_EQ(no_u.u, 0);
  EXPECT_EQ(no_u.s, 24);
}

TEST(Training, UnlabeledDataOnlyAfterSwitch) {
  const auto ds = featio::generate_synthetic(small_synth(), 2);
  const auto cfg = small_train();
  const auto split = featio::partition_loso(ds, 1, 1);
  const auto res = train_fold(split, ds.manifest, cfg);
  ASSERT_EQ(res.provenance.size(), 4u);
  for (const auto& p : res.provenance) {
    if (p.epoch <= cfg.e_t) {
      EXPECT_EQ(p.stage, 2);
      EXPECT_EQ(p.u_rows, 0);
    } else {
      EXPECT_EQ(p.stage, 3);
      EXPECT_GT(p.u_rows, 0);
      EXPECT_EQ(p.u_subjects, split.unlabeled_subjects);
    }
    EXPECT_GT(p.steps, 0);
  }
  EXPECT_EQ(res.trace.size(), 4u);
  for (const auto& tr : res.trace) {
    EXPECT_TRUE(std::isfinite(tr.total));
    EXPECT_NEAR(tr.total, tr.ce + tr.disc + tr.gcn + tr.gcl, 1e-9);
  }
  EXPECT_EQ(res.confusion.sum(), static_cast<double>(split.T.size()));
}

TEST(Training, DeterministicPerSeed) {
  const auto ds = featio::generate_synthetic(small_synth(), 3);
  auto cfg = small_train();
  const auto a = run_protocol(ds, 1, cfg);
  const auto b = run_protocol(ds, 1, cfg, {.jobs = 2});
  EXPECT_EQ(metrics_csv(a, 3), metrics_csv(b, 3));
  for (std::size_t i = 0; i < a.folds.size(); ++i) {
    ASSERT_TRUE(a.folds[i].ok) << a.folds[i].error;
    for (int s = 0; s < kSlotCount; ++s)
      EXPECT_EQ(a.folds[i].result.params.tensors[s].value, b.folds[i].result.params.tensors[s].value);
  }
  cfg.seed = 1;
  const auto c = run_protocol(ds, 1, cfg);
  EXPECT_NE(a.folds[0].result.params[kClsW], c.folds[0].result.params[kClsW]);
}

TEST(Training, ProtocolRejectsBadArguments) {
  const auto ds = featio::generate_synthetic(small_synth(), 3);
  auto cfg = small_train();
  EXPECT_THROW(run_protocol(ds, 3, cfg), ConfigError);
  cfg.drop_count = 8;
  EXPECT_THROW(run_protocol(ds, 1, cfg), ConfigError);
  cfg = small_train();
  cfg.e_t = 9;
  EXPECT_THROW(run_protocol(ds, 1, cfg), ConfigError);
}

TEST(Training, MetricsCsvLayout) {
  const auto ds = featio::generate_synthetic(small_synth(), 3);
  auto cfg = small_train();
  cfg.max_epochs = 1;
  cfg.e_t = 1;
  const auto pr = run_protocol(ds, 2, cfg, {.targets = {0, 2}});
  const std::string csv = metrics_csv(pr, 3);
  std::istringstream is(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "row,target_subject,n_unlabeled,e_t,method,ce_mode,seed,accuracy,std,recall_0,recall_1,recall_2,dataset,status");
  EXPECT_EQ(lines[1].rfind("fold,0,2,1,full,inside_log,0,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("summary,all,2,1,full,inside_log,0,", 0), 0u);
  EXPECT_NE(lines[3].find(hex64(featio::fingerprint(ds))), std::string::npos);
}

TEST(GradCheck, MicroBatchAllTerms) {
  const auto ds = featio::generate_synthetic(small_synth(), 4);
  auto cfg = small_train();
  cfg.dropout = 0.0;
  const auto dims = dims_for(ds.manifest, cfg);
  std::mt19937_64 rng(5);
  const auto params = init_params(dims, rng);
  for (int stage : {2, 3}) {
    const auto batch = micro_batch(ds, stage);
    for (LossTerm term : {LossTerm::ce, LossTerm::disc, LossTerm::gcn, LossTerm::gcl, LossTerm::total}) {
      GradCheckOptions opts;
      opts.coordinates = 120;
      const auto rep = grad_check(model_objective(params, batch, cfg, term), values(params), opts, names(params),
                                  model_combine(cfg, term));
      EXPECT_TRUE(rep.passed(1e-4)) << loss_term_name(term) << " stage " << stage << ": " << rep.max_rel_error
                                    << " at " << rep.worst;
    }
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  const auto f = [](const std::vector<Matrix>& p, bool need) {
    Evaluation e;
    e.parts = {p[0].squaredNorm()};
    if (need) e.grads = {3.0 * p[0]};
    return e;
  };
  std::mt19937_64 rng(6);
  const auto rep = grad_check(f, {dsagc::testing::random_matrix(3, 3, rng)}, {});
  EXPECT_EQ(rep.checked, 9u);
  EXPECT_FALSE(rep.passed(1e-4));
  EXPECT_NEAR(rep.max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(7);
  Checkpoint ck;
  ck.params = init_params(ModelDims{8, 5, 3, 2, 3}, rng);
  ck.config.train = small_train();
  ck.config.dataset = "data/x.dsf";
  ck.target_subject = 3;
  ck.n_unlabeled = 2;
  ck.epoch = 17;
  ck.dataset_fingerprint = 0xfeedfacecafebeefULL;
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.target_subject, 3);
  EXPECT_EQ(back.n_unlabeled, 2);
  EXPECT_EQ(back.epoch, 17);
  EXPECT_EQ(back.dataset_fingerprint, ck.dataset_fingerprint);
  EXPECT_EQ(back.params.dims, ck.params.dims);
  for (int s = 0; s < kSlotCount; ++s) EXPECT_EQ(back.params.tensors[s].value, ck.params.tensors[s].value);
}

TEST(Checkpoint, CorruptAndIncompatible) {
  std::mt19937_64 rng(8);
  Checkpoint ck;
  ck.params = init_params(ModelDims{8, 5, 3, 2, 3}, rng);
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), TruncatedPayloadError);
  EXPECT_THROW(decode_checkpoint("NOTACKPT" + bytes.substr(8)), MalformedHeaderError);
  EXPECT_THROW(decode_checkpoint(bytes + "z"), LoadError);
  featio::DatasetManifest m;
  m.channels = featio::numbered_channels(62);
  m.bands = featio::default_bands();
  EXPECT_THROW(check_compatible(ck, m), DimensionMismatchError);
  m.channels.resize(8);
  EXPECT_NO_THROW(check_compatible(ck, m));
}
