#include "dsagc/commands.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>

using namespace dsagc;
using dsagc::testing::random_matrix;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dsagc_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct Run {
  int code = -1;
  std::string output;
};

Run run_cli(const std::string& args) {
  Run r;
  const std::string cmd = std::string(DSAGC_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) { return featio::read_file(p); }

// Writes a metrics CSV holding a single summary row.
void write_summary(const std::filesystem::path& file, const std::string& method, int n, int e_t, double mean,
                   double std, const std::string& dataset = "00000000000000aa", const std::string& ce = "inside_log") {
  std::filesystem::create_directories(file.parent_path());
  std::ofstream f(file);
  f << "row,target_subject,n_unlabeled,e_t,method,ce_mode,seed,accuracy,std,recall_0,dataset,status\n";
  f << "fold,0," << n << "," << e_t << "," << method << "," << ce << ",0," << mean << ",,0.5," << dataset << ",ok\n";
  f << "summary,all," << n << "," << e_t << "," << method << "," << ce << ",0," << mean << "," << std << ",0.5,"
    << dataset << ",ok\n";
}

}  // namespace

TEST(Config, RandomRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1e-6, 3.0);
  std::uniform_int_distribution<int> k(0, 200);
  for (int trial = 0; trial < 200; ++trial) {
    cli::RunConfig c;
    c.dataset = "data/set_" + std::to_string(trial) + ".dsf";
    c.out = "runs/" + std::to_string(k(rng));
    c.n_unlabeled = k(rng) % 13;
    c.jobs = 1 + k(rng) % 8;
    c.train.lr = u(rng);
    c.train.tau = u(rng);
    c.train.lambda_reg = u(rng);
    c.train.alpha_disc = u(rng);
    c.train.grl_mu = u(rng);
    c.train.batch_size = 2 + k(rng);
    c.train.max_epochs = k(rng);
    c.train.e_t = k(rng) % (c.train.max_epochs + 1);
    c.train.seed = rng();
    c.train.ce_mode = trial % 2 ? fusion::CeMode::outside_log : fusion::CeMode::inside_log;
    c.train.ablate = {trial % 3 == 0, trial % 5 == 0, trial % 7 == 0, trial % 2 == 0};
    c.train.capture_embeddings = trial % 4 == 0;
    if (trial % 6 == 0) c.et_sweep = {0, k(rng), k(rng)};
    EXPECT_EQ(cli::parse(cli::render(c)), c) << cli::render(c);
  }
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(cli::parse("learning_rate = 0.1\n"), ConfigError);
  EXPECT_THROW(cli::parse("lr = fast\n"), ConfigError);
  EXPECT_THROW(cli::parse("batch_size = 4.5\n"), ConfigError);
  EXPECT_THROW(cli::parse("capture_embeddings = maybe\n"), ConfigError);
  EXPECT_THROW(cli::parse("ablate = no_graph\n"), ConfigError);
  EXPECT_THROW(cli::parse("ce_mode = between\n"), ConfigError);
  EXPECT_THROW(cli::parse("just some words\n"), ConfigError);
  const auto c = cli::parse("# comment\nlr = 0.5  # trailing\n\nlr = 0.25\n");
  EXPECT_EQ(c.train.lr, 0.25);
}

TEST(Config, ValidationAndSweep) {
  cli::RunConfig c;
  c.train.max_epochs = 3;
  EXPECT_THROW(cli::validate(c), ConfigError);  // default e_t exceeds max_epochs
  c.et_sweep = {0, 3};
  EXPECT_NO_THROW(cli::validate(c));
  c.et_sweep = {0, 4};
  EXPECT_THROW(cli::validate(c), ConfigError);
  c = {};
  c.jobs = 0;
  EXPECT_THROW(cli::validate(c), ConfigError);
}

TEST(Config, RunTag) {
  engine::TrainConfig t;
  t.seed = 4;
  EXPECT_EQ(cli::run_tag(t, 2), "full_N2_seed4");
  t.ablate.no_disc = t.ablate.no_sample_weights = true;
  t.ce_mode = fusion::CeMode::outside_log;
  EXPECT_EQ(cli::run_tag(t, 0), "no_disc-no_sample_weights_N0_outside_log_seed4");
}

TEST(Report, CellFormatting) {
  EXPECT_EQ(report::format_cell(0.8598, 0.0621), "85.98±06.21");
  EXPECT_EQ(report::format_cell(1.0, 0.0), "100.00±00.00");
  EXPECT_EQ(report::format_cell(0.0512, 0.1), "05.12±10.00");
}

TEST(Report, SingleRun) {
  const auto dir = scratch_dir("report_one");
  write_summary(dir / "metrics_full.csv", "full", 2, 30, 0.8598, 0.0621);
  const auto t = report::build_table(dir);
  EXPECT_EQ(t.columns, std::vector<int>{2});
  EXPECT_EQ(t.rows, std::vector<std::string>{"full E_t=30"});
  EXPECT_EQ(t.csv(), "method,N=2\nfull E_t=30,85.98±06.21\n");
  const std::string text = t.text();
  EXPECT_NE(text.find("full E_t=30  85.98±06.21"), std::string::npos) << text;
}

TEST(Report, ColumnsAscendingAndRowsMerged) {
  const auto dir = scratch_dir("report_many");
  write_summary(dir / "a" / "metrics_n12.csv", "full", 12, 30, 0.9, 0.01);
  write_summary(dir / "b" / "metrics_n1.csv", "full", 1, 30, 0.7, 0.02);
  write_summary(dir / "b" / "metrics_nd.csv", "no_disc", 1, 30, 0.6, 0.03);
  write_summary(dir / "c" / "metrics_out.csv", "full", 1, 30, 0.65, 0.03, "00000000000000aa", "outside_log");
  std::ofstream(dir / "notes.csv") << "unrelated,columns\n1,2\n";
  const auto t = report::build_table(dir);
  EXPECT_EQ(t.columns, (std::vector<int>{1, 12}));
  EXPECT_EQ(t.rows.size(), 3u);
  const std::string csv = t.csv();
  EXPECT_NE(csv.find("full E_t=30,70.00±02.00,90.00±01.00"), std::string::npos) << csv;
  EXPECT_NE(csv.find("no_disc E_t=30,60.00±03.00,\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("full [outside_log] E_t=30,65.00±03.00,"), std::string::npos) << csv;
}

TEST(Report, ConflictsListEveryFile) {
  const auto dir = scratch_dir("report_conflict");
  write_summary(dir / "x.csv", "full", 2, 30, 0.9, 0.01, "00000000000000aa");
  write_summary(dir / "y.csv", "full", 3, 30, 0.9, 0.01, "00000000000000bb");
  try {
    report::build_table(dir);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("conflicting metrics manifests"), std::string::npos);
    EXPECT_NE(msg.find("x.csv"), std::string::npos);
    EXPECT_NE(msg.find("y.csv"), std::string::npos);
  }
  const auto dup = scratch_dir("report_dup");
  write_summary(dup / "p.csv", "full", 2, 30, 0.9, 0.01);
  write_summary(dup / "q.csv", "full", 2, 30, 0.8, 0.01);
  EXPECT_THROW(report::build_table(dup), InputError);
  EXPECT_THROW(report::build_table(scratch_dir("report_empty")), IoError);
  const auto bad = scratch_dir("report_bad");
  std::ofstream(bad / "m.csv") << "row,n_unlabeled,e_t,method,ce_mode,seed,accuracy,std,dataset\nfold,1,1,full,inside_log,0,,,x\n";
  EXPECT_THROW(report::build_table(bad), InputError);
}

TEST(Tsne, DuplicatesCoincideAndClustersSeparate) {
  std::mt19937_64 rng(2);
  Matrix x(60, 10);
  for (int i = 0; i < 60; ++i) x.row(i) = random_matrix(1, 10, rng, 0.1) + RowVector::Constant(10, i < 30 ? 0.0 : 5.0);
  x.row(7) = x.row(3);
  viz::TsneOptions o;
  o.iterations = 500;
  o.perplexity = 10;
  const auto e = viz::tsne(x, o);
  EXPECT_FALSE(e.used_pca);
  EXPECT_LT((e.y.row(7) - e.y.row(3)).norm(), 1e-3);
  const RowVector c0 = e.y.topRows(30).colwise().mean(), c1 = e.y.bottomRows(30).colwise().mean();
  double spread = 0.0;
  for (int i = 0; i < 30; ++i) spread = std::max(spread, (e.y.row(i) - c0).norm());
  EXPECT_GT((c0 - c1).norm(), spread);
  EXPECT_EQ(viz::tsne(x, o).y, e.y);
}

TEST(Tsne, TinyInputsFallBackToPca) {
  Matrix x(3, 4);
  x << 1, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0;
  const auto e = viz::tsne(x);
  EXPECT_TRUE(e.used_pca);
  EXPECT_FALSE(e.warning.empty());
  EXPECT_EQ(e.y.rows(), 3);
  EXPECT_EQ(e.y.cols(), 2);
  EXPECT_NEAR(std::abs(e.y(2, 0) - e.y(0, 0)), 3.0, 1e-12);
  EXPECT_NEAR(e.y.col(1).cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(Plot, PngIsDeterministicAndCarriesMetadata) {
  const auto dir = scratch_dir("png");
  std::vector<viz::ScatterPoint> pts;
  for (int i = 0; i < 30; ++i)
    pts.push_back({std::cos(i * 0.3), std::sin(i * 0.7), static_cast<viz::Marker>(i % 3), i % 4 - 1});
  const std::map<std::string, std::string> meta = {{"Title", "fused features"}, {"dsagc.stage", "epoch 30"}};
  viz::write_png(viz::scatter(pts), dir / "a.png", meta);
  viz::write_png(viz::scatter(pts), dir / "b.png", meta);
  EXPECT_EQ(slurp(dir / "a.png"), slurp(dir / "b.png"));
  EXPECT_EQ(slurp(dir / "a.png").substr(1, 3), "PNG");
  const auto back = viz::read_png_text(dir / "a.png");
  EXPECT_EQ(back.at("Title"), "fused features");
  EXPECT_EQ(back.at("dsagc.stage"), "epoch 30");
  EXPECT_THROW(viz::write_png(viz::scatter(pts), dir / "missing" / "c.png"), IoError);
}

TEST(Binary, SynthReportsSeedShape) {
  const auto dir = scratch_dir("bin_synth");
  const auto r = run_cli("synth --out " + (dir / "seed.dsf").string() + " --subjects 15 --trials 15 --segments 20");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("records: 4500"), std::string::npos) << r.output;
  EXPECT_EQ(featio::load_features(dir / "seed.dsf").records.size(), 4500u);
}

TEST(Binary, ExitCodes) {
  const auto dir = scratch_dir("bin_codes");
  EXPECT_EQ(run_cli("--help").code, 0);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("train --epochs notanumber").code, 2);
  EXPECT_EQ(run_cli("train --dataset " + (dir / "missing.dsf").string()).code, 2);
  std::ofstream(dir / "bad.cfg") << "learning_rate = 1\n";
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.cfg").string()).code, 2);
  std::ofstream(dir / "junk.dsf") << "not a container";
  EXPECT_EQ(run_cli("train --dataset " + (dir / "junk.dsf").string()).code, 1);
  EXPECT_EQ(run_cli("report --metrics-dir " + dir.string()).code, 1);
}

TEST(Binary, TrainThenReport) {
  const auto dir = scratch_dir("bin_train");
  const std::string data = (dir / "d.dsf").string();
  ASSERT_EQ(run_cli("synth --out " + data + " --subjects 3 --trials 3 --segments 6 --channels 6").code, 0);
  const std::string common = "--dataset " + data + " -N 1 --epochs 2 --et 1 --set drop_count=2 --set heads=4 --set batch_size=6 ";
  auto r = run_cli("train " + common + "--out " + (dir / "runs").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(std::filesystem::exists(dir / "runs" / "metrics_full_N1_seed0.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "runs" / "full_N1_seed0_et1" / "splits" / "fold_0.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "runs" / "full_N1_seed0_et1" / "checkpoints" / "fold_2.ckpt"));
  r = run_cli("report --metrics-dir " + (dir / "runs").string() + " --out " + (dir / "table").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("full E_t=1"), std::string::npos) << r.output;
  EXPECT_TRUE(std::filesystem::exists(dir / "table" / "report.csv"));

  r = run_cli("embed-plot --checkpoint " + (dir / "runs" / "full_N1_seed0_et1" / "checkpoints" / "fold_0.ckpt").string() +
              " --dataset " + data + " --iterations 200 --out " + (dir / "e.png").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto meta = viz::read_png_text(dir / "e.png");
  EXPECT_EQ(meta.at("dsagc.target_subject"), "0");
  EXPECT_EQ(meta.at("dsagc.n_unlabeled"), "1");
  EXPECT_EQ(meta.at("dsagc.points"), "54");
}
