#include "dsagc/commands.hpp"

#include <CLI11.hpp>

namespace {

using dsagc::cli::RunConfig;

// Flags shared by train and ablate. Values given on the command line override
// the config file, which overrides the defaults.
struct TrainFlags {
  std::string config_file;
  std::string dataset, out, ce_mode, ablate, et_sweep;
  std::optional<int> n_unlabeled, et, jobs, epochs;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;

  void add(CLI::App* app, bool with_ablate) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--dataset", dataset, "feature container or directory of per-subject containers");
    app->add_option("--n-unlabeled,-N", n_unlabeled, "number of unlabeled source subjects");
    app->add_option("--et", et, "epoch at which U joins training");
    app->add_option("--et-sweep", et_sweep, "comma-separated E_t values, one run each");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--seed", seed, "base seed");
    app->add_option("--jobs", jobs, "parallel folds");
    app->add_option("--out", out, "output directory");
    app->add_option("--ce-mode", ce_mode, "inside_log or outside_log");
    app->add_option("--set", sets, "extra config entry key=value (repeatable)");
    if (with_ablate)
      app->add_option("--ablate", ablate, "comma list of no_disc,no_contrastive,no_attn_fusion,no_sample_weights");
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_file.empty()) rc = dsagc::cli::parse(dsagc::featio::read_file(config_file));
    std::string overrides;
    auto set = [&](const std::string& key, const std::string& v) { overrides += key + " = " + v + "\n"; };
    if (!dataset.empty()) set("dataset", dataset);
    if (!out.empty()) set("out", out);
    if (n_unlabeled) set("n_unlabeled", std::to_string(*n_unlabeled));
    if (et) set("e_t", std::to_string(*et));
    if (!et_sweep.empty()) set("et_sweep", et_sweep);
    if (epochs) set("max_epochs", std::to_string(*epochs));
    if (seed) set("seed", std::to_string(*seed));
    if (jobs) set("jobs", std::to_string(*jobs));
    if (!ce_mode.empty()) set("ce_mode", ce_mode);
    if (!ablate.empty()) set("ablate", ablate);
    for (const auto& kv : sets) overrides += kv + "\n";
    return dsagc::cli::parse(overrides, rc);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsagc: dual-stream semi-supervised cross-subject EEG emotion recognition"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  dsagc::cli::SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic cross-subject dataset");
  c_synth->add_option("--out", synth.out, "output container (or directory with --per-subject)")->required();
  c_synth->add_option("--seed", synth.seed, "generator seed");
  c_synth->add_option("--subjects", synth.synth.n_subjects);
  c_synth->add_option("--trials", synth.synth.n_trials);
  c_synth->add_option("--segments", synth.synth.segments_per_trial);
  c_synth->add_option("--channels", synth.synth.n_channels);
  c_synth->add_option("--bands", synth.synth.n_bands);
  c_synth->add_option("--classes", synth.synth.n_classes);
  c_synth->add_option("--shift", synth.synth.shift_strength);
  c_synth->add_option("--noise", synth.synth.noise_sigma);
  c_synth->add_flag("--per-subject", synth.per_subject, "one container file per subject");

  dsagc::cli::ExtractOptions extract;
  auto* c_extract = app.add_subcommand("extract", "DE features from a raw-signal directory");
  c_extract->add_option("--input", extract.input, "directory with manifest.json and s<subject>_t<trial>.csv")->required();
  c_extract->add_option("--out", extract.out, "output container")->required();
  c_extract->add_option("--smooth", extract.smooth, "kalman, moving_average or none");

  TrainFlags train;
  auto* c_train = app.add_subcommand("train", "run the leave-one-subject-out protocol");
  train.add(c_train, true);

  TrainFlags abl;
  std::string variants = "no_disc,no_contrastive,no_attn_fusion,no_sample_weights";
  auto* c_ablate = app.add_subcommand("ablate", "train the full model and each ablation variant");
  abl.add(c_ablate, false);
  c_ablate->add_option("--variants", variants, "comma list of ablation switches");

  dsagc::cli::EmbedOptions embed;
  auto* c_embed = app.add_subcommand("embed-plot", "t-SNE scatter of fused features");
  c_embed->add_option("--checkpoint", embed.checkpoint)->required()->check(CLI::ExistingFile);
  c_embed->add_option("--dataset", embed.dataset)->required();
  c_embed->add_option("--stage", embed.stage, "label written into the image metadata");
  c_embed->add_option("--out", embed.out, "PNG path")->required();
  c_embed->add_option("--seed", embed.seed);
  c_embed->add_option("--perplexity", embed.perplexity);
  c_embed->add_option("--iterations", embed.iterations);
  c_embed->add_option("--max-per-domain", embed.max_per_domain);

  std::string report_dir, report_out;
  auto* c_report = app.add_subcommand("report", "merge metrics CSVs into a methods x N table");
  c_report->add_option("--metrics-dir", report_dir)->required()->check(CLI::ExistingDirectory);
  c_report->add_option("--out", report_out, "directory for report.csv and report.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dsagc::cli::kExitConfig;
  }

  try {
    if (*c_synth) return dsagc::cli::cmd_synth(synth);
    if (*c_extract) return dsagc::cli::cmd_extract(extract);
    if (*c_train) return dsagc::cli::cmd_train(train.resolve());
    if (*c_ablate) {
      std::vector<std::string> list;
      for (const auto& v : dsagc::cli::detail::split(variants, ','))
        if (!v.empty()) list.push_back(v);
      return dsagc::cli::cmd_ablate(abl.resolve(), list);
    }
    if (*c_embed) return dsagc::cli::cmd_embed_plot(embed);
    if (*c_report) return dsagc::cli::cmd_report(report_dir, report_out);
  } catch (const dsagc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return dsagc::cli::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dsagc::cli::kExitRuntime;
  }
  return dsagc::cli::kExitOk;
}
