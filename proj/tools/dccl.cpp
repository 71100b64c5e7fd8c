// Command line front end for the collaborative recommendation library.
//
// Subcommands mirror the run lifecycle: datasets are produced by `ingest`
// or `synth`, trained and evaluated by `pretrain` / `run` / `experiment`,
// and inspected afterwards with `eval` and `export-patches`. All training
// commands read the flat `key = value` config format; `--set key=value`
// overrides individual keys from the command line.

#include <CLI11.hpp>

#include <dccl/datahub.hpp>
#include <dccl/evalmetrics.hpp>
#include <dccl/metapatch.hpp>
#include <dccl/momodistill.hpp>
#include <dccl/orchestrator.hpp>
#include <dccl/recmodel.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

// Options shared by every config-driven subcommand.
struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_config_args(CLI::App* sub, ConfigArgs& args) {
  sub->add_option("--config", args.config, "run config file (key = value lines)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--set", args.sets,
                  "override a config key, e.g. --set device.lr=0.005")
      ->type_name("KEY=VALUE");
  sub->add_option("--out", args.out, "override the output directory");
}

dccl::RunConfig make_config(const ConfigArgs& args) {
  dccl::RunConfig cfg = dccl::parse_run_config(args.config);
  for (const std::string& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got '" + kv + "'");
    dccl::set_config_key(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (!args.out.empty()) cfg.out_dir = args.out;
  return cfg;
}

// A training stage that hits a non-finite loss halts the lifecycle after
// persisting state; the exit status says which stage kind went bad.
int abort_exit_code(const std::string& stage) {
  if (stage == "pretrain_backbone") return 10;
  if (stage == "pretrain_basis") return 11;
  if (stage.ends_with("_incremental")) return 12;
  if (stage.ends_with("_device")) return 13;
  if (stage.ends_with("_distill_backbone")) return 14;
  if (stage.ends_with("_distill_basis")) return 15;
  return 9;
}

int report_run(const dccl::RunConfig& cfg, const dccl::RunResult& res) {
  switch (res.status) {
    case dccl::RunStatus::kFinished:
      std::printf("finished %zu stages, outputs in %s\n", res.stages_done,
                  cfg.out_dir.string().c_str());
      std::printf("metrics: %s\n",
                  (cfg.out_dir / "metrics.csv").string().c_str());
      return 0;
    case dccl::RunStatus::kPaused:
      std::printf("paused after stage %zu of %zu; rerun to resume\n",
                  res.stages_done, res.stages_total);
      return 0;
    case dccl::RunStatus::kAbortedNan:
      std::fprintf(stderr,
                   "aborted: non-finite loss in stage '%s' (%zu of %zu done)\n",
                   res.failed_stage.c_str(), res.stages_done, res.stages_total);
      return abort_exit_code(res.failed_stage);
  }
  return 1;
}

int cmd_ingest(const std::string& in_dir, const std::string& out_file,
               std::size_t filter_min) {
  dccl::IngestStats stats;
  dccl::Dataset data = dccl::parse_movielens(in_dir, &stats);
  std::printf("parsed %zu events: %zu users, %zu items, %zu categories\n",
              stats.events, stats.users, stats.items, stats.cats);
  if (filter_min > 0) {
    const dccl::FilterReport fr =
        dccl::filter_min_interactions(data, filter_min);
    std::printf(
        "filter >=%zu: removed %zu users, %zu items, %zu events in %zu passes\n",
        filter_min, fr.users_removed, fr.items_removed, fr.events_removed,
        fr.passes);
  }
  dccl::write_dataset(data, out_file, "movielens");
  std::printf("wrote %s (%zu users, %zu events)\n", out_file.c_str(),
              data.n_users, data.total_events());
  return 0;
}

int cmd_synth(const dccl::SynthSpec& spec, const std::string& out_file) {
  const dccl::Dataset data = dccl::synth_generate(spec);
  dccl::write_dataset(data, out_file, "synth");
  std::printf("wrote %s (%zu users, %zu items, %zu categories, %zu events)\n",
              out_file.c_str(), data.n_users, data.n_items, data.n_cats,
              data.total_events());
  return 0;
}

int cmd_run(const ConfigArgs& args, std::size_t max_stages, bool pretrain_only) {
  dccl::RunConfig cfg = make_config(args);
  if (pretrain_only) dccl::set_config_key(cfg, "rounds", "0");
  const dccl::RunResult res = dccl::run_lifecycle(
      cfg, max_stages == 0 ? std::size_t(-1) : max_stages);
  return report_run(cfg, res);
}

int cmd_experiment(const std::string& recipe, const ConfigArgs& args,
                   const std::string& out_root) {
  ConfigArgs base = args;
  base.out.clear();  // recipes lay out their own run directories
  const dccl::RunConfig cfg = make_config(base);
  const fs::path summary = dccl::run_experiment(recipe, cfg, out_root);
  std::printf("summary: %s\n", summary.string().c_str());
  return 0;
}

int cmd_eval(const ConfigArgs& args, const std::string& backbone_file,
             const std::string& basis_file, const std::string& patches_file,
             const std::string& name, const std::string& out_file) {
  dccl::RunConfig cfg = make_config(args);
  dccl::finalize_run_config(cfg);
  const dccl::Dataset data = dccl::load_run_dataset(cfg);
  dccl::apply_data_dims(cfg.model, data);
  const dccl::Splits splits = dccl::build_splits(data, cfg.split);

  dccl::BackboneParams backbone = dccl::BackboneParams::zeros(cfg.model);
  dccl::load_backbone_checkpoint(backbone_file, backbone);

  std::optional<dccl::ParamBasis> basis;
  if (!basis_file.empty()) {
    basis = dccl::ParamBasis::zeros(cfg.model, cfg.k_hat);
    dccl::AuxEncoderParams enc =
        dccl::AuxEncoderParams::zeros(cfg.k_hat, data.profile_dim);
    dccl::load_basis_checkpoint(basis_file, *basis, enc);
  }
  std::vector<dccl::MetaPatchVector> patches;
  if (!patches_file.empty()) {
    if (!basis)
      throw std::runtime_error("--patches needs --basis to expand the codes");
    patches = dccl::read_patch_table(patches_file);
    for (const dccl::MetaPatchVector& p : patches)
      if (p.theta.values().size() != cfg.k_hat)
        throw std::runtime_error("patch table width " +
                                 std::to_string(p.theta.values().size()) +
                                 " does not match patch.k_hat " +
                                 std::to_string(cfg.k_hat));
  }

  const dccl::EvalReport rep =
      dccl::evaluate_model(cfg, data, splits, backbone,
                           basis ? &*basis : nullptr, patches);
  const std::vector<dccl::MetricRow> rows = dccl::report_rows(rep, name);
  dccl::write_metrics_csv(out_file, rows);
  std::printf("%s: hit@1 %.4f, hit@5 %.4f, hit@10 %.4f, ndcg@10 %.4f, "
              "auc %.4f over %zu cases\n",
              name.c_str(), rep.hit1, rep.hit5, rep.hit10, rep.ndcg10, rep.auc,
              rep.n_cases);
  std::printf("wrote %s\n", out_file.c_str());
  return 0;
}

int cmd_export_patches(const std::string& run_dir, const std::string& out_file) {
  const std::size_t n = dccl::export_metapatch_table(run_dir, out_file);
  std::printf("wrote %zu device rows to %s\n", n, out_file.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"device-cloud collaborative recommendation toolkit"};
  app.require_subcommand(1);
  app.footer(
      "exit codes: 0 ok, 1 error, 10+ lifecycle aborted on a non-finite loss\n"
      "  (10 pretrain_backbone, 11 pretrain_basis, 12 incremental,\n"
      "   13 device, 14 distill_backbone, 15 distill_basis)");

  int exit_code = 0;

  // ingest
  std::string in_dir, ingest_out;
  std::size_t filter_min = 0;
  CLI::App* ingest = app.add_subcommand(
      "ingest", "convert a ratings directory into the binary dataset form");
  ingest->add_option("--in", in_dir, "directory with ratings.dat/movies.dat")
      ->required()
      ->check(CLI::ExistingDirectory);
  ingest->add_option("--out", ingest_out, "dataset file to write")->required();
  ingest->add_option("--filter-min", filter_min,
                     "drop users and items with fewer interactions");
  ingest->callback(
      [&] { exit_code = cmd_ingest(in_dir, ingest_out, filter_min); });

  // synth
  dccl::SynthSpec spec;
  std::string synth_out;
  CLI::App* synth = app.add_subcommand(
      "synth", "generate a synthetic interaction corpus");
  synth->add_option("--users", spec.n_users, "number of users");
  synth->add_option("--items", spec.n_items, "number of items");
  synth->add_option("--cats", spec.n_cats, "number of categories / clusters");
  synth->add_option("--alpha", spec.alpha, "activity skew exponent");
  synth->add_option("--max-events", spec.max_events,
                    "events for the most active user");
  synth->add_option("--min-events", spec.min_events, "activity floor");
  synth->add_option("--noise", spec.noise, "uniform event fraction");
  synth->add_option("--hidden-mix", spec.hidden_mix,
                    "event fraction from the hidden cluster");
  synth->add_option("--profile-dim", spec.profile_dim, "profile width");
  synth->add_option("--seed", spec.seed, "generator seed");
  synth->add_option("--out", synth_out, "dataset file to write")->required();
  synth->callback([&] { exit_code = cmd_synth(spec, synth_out); });

  // pretrain / run
  ConfigArgs pre_args;
  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "run only the pretraining stages (rounds forced to 0)");
  add_config_args(pretrain, pre_args);
  pretrain->callback([&] { exit_code = cmd_run(pre_args, 0, true); });

  ConfigArgs run_args;
  std::size_t max_stages = 0;
  CLI::App* run = app.add_subcommand(
      "run", "execute the collaborative lifecycle described by a config");
  add_config_args(run, run_args);
  run->add_option("--max-stages", max_stages,
                  "pause after this many stages (0 = run to the end); "
                  "rerunning the same command resumes");
  run->callback([&] { exit_code = cmd_run(run_args, max_stages, false); });

  // experiment
  std::string recipe, exp_root;
  ConfigArgs exp_args;
  CLI::App* experiment = app.add_subcommand(
      "experiment",
      "run a named recipe: rq1, rq2, rq3, junction-ablation, one-round-ablation");
  experiment->add_option("recipe", recipe, "recipe name")->required();
  experiment->add_option("--config", exp_args.config, "base run config")
      ->required()
      ->check(CLI::ExistingFile);
  experiment->add_option("--set", exp_args.sets, "override a base config key")
      ->type_name("KEY=VALUE");
  experiment->add_option("--out", exp_root, "experiment output root")
      ->required();
  experiment->callback(
      [&] { exit_code = cmd_experiment(recipe, exp_args, exp_root); });

  // eval
  ConfigArgs eval_args;
  std::string backbone_file, basis_file, patches_file, eval_name = "eval",
              eval_out;
  CLI::App* eval = app.add_subcommand(
      "eval", "score a checkpoint on the config's test split");
  eval->add_option("--config", eval_args.config,
                   "config describing the data and model")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--set", eval_args.sets, "override a config key")
      ->type_name("KEY=VALUE");
  eval->add_option("--backbone", backbone_file, "backbone checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--basis", basis_file,
                   "basis checkpoint for patched scoring")
      ->check(CLI::ExistingFile);
  eval->add_option("--patches", patches_file,
                   "per-device code table (needs --basis)")
      ->check(CLI::ExistingFile);
  eval->add_option("--name", eval_name, "metric row label");
  eval->add_option("--out", eval_out, "metrics csv to write")->required();
  eval->callback([&] {
    exit_code = cmd_eval(eval_args, backbone_file, basis_file, patches_file,
                         eval_name, eval_out);
  });

  // export-patches
  std::string export_run, export_out;
  CLI::App* exp_patches = app.add_subcommand(
      "export-patches",
      "write the per-device code table of a finished run");
  exp_patches->add_option("--run", export_run, "run output directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  exp_patches->add_option("--out", export_out, "csv file to write")->required();
  exp_patches->callback(
      [&] { exit_code = cmd_export_patches(export_run, export_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dccl: %s\n", e.what());
    return 1;
  }
  return exit_code;
}
