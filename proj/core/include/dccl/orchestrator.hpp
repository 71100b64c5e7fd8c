#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dccl/datahub.hpp"
#include "dccl/evalmetrics.hpp"
#include "dccl/metapatch.hpp"
#include "dccl/momodistill.hpp"
#include "dccl/recmodel.hpp"

namespace dccl {

// Round-based collaborative training driver. A run pretrains the cloud
// backbone (and patch basis), then alternates device-side personalization
// rounds with cloud-side distillation rounds over chronological data slices,
// persisting every stage so a killed run resumes bit-identically.

// What a round executes:
//   baseline-incremental  cloud incremental training only, one eval
//   dccl-e-only           device phase + patched eval, cloud model frozen
//   dccl-full             device phase, patched eval, backbone distillation,
//                         basis distillation, cloud eval
// `junction-ablation` runs as dccl-e-only (the patch gate does the ablating)
// and `interval-study` as dccl-full (slice grouping is the studied knob);
// both names are accepted in configs so recipe outputs are self-describing.
enum class RunMode : std::uint8_t {
  kBaselineIncremental = 0,
  kDcclEOnly = 1,
  kDcclFull = 2,
};

RunMode parse_run_mode(const std::string& text);
std::string run_mode_name(RunMode mode);

enum class DataKind : std::uint8_t { kSynth = 0, kFile = 1, kMovielens = 2 };

struct RunConfig {
  DataKind data_kind = DataKind::kSynth;
  std::filesystem::path data_path;   // kFile | kMovielens
  std::size_t filter_min = 0;        // drop users/items below, 0 = off
  SynthSpec synth;                   // kSynth; seed tracks `seed` unless set
  bool synth_seed_explicit = false;

  SplitConfig split;                 // split.seed always tracks `seed`

  BackboneConfig model;              // counts and profile_dim set from data
  std::size_t k_hat = 32;
  PatchGate gate = PatchGate::all_on();
  NdcgForm ndcg = NdcgForm::kStandard;

  std::size_t rounds = 1;
  std::size_t slices_per_round = 1;
  std::size_t pretrain_epochs = 1;
  DistillConfig cloud;               // cloud stages; pretrain reuses lr/batch
  LocalTrainConfig device;

  RunMode mode = RunMode::kDcclFull;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;

  void validate() const;
};

// Flat `key = value` text config. `#` starts a comment line; unknown keys,
// duplicate keys and malformed values are errors. `set_config_key` applies a
// single override (the CLI's --set key=value).
RunConfig parse_run_config(const std::filesystem::path& path);
void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value);
std::string render_run_config(const RunConfig& cfg);  // parseable echo

// ---- Lifecycle --------------------------------------------------------------

// Stages in execution order. A run is a fixed list of (kind, round) pairs
// derived from the config; the persisted cursor counts completed stages.
enum class StageKind : std::uint8_t {
  kPretrainBackbone = 0,
  kEvalPretrain = 1,
  kPretrainBasis = 2,
  kDevicePhase = 3,
  kEvalDevices = 4,
  kDistillBackbone = 5,
  kDistillBasis = 6,
  kEvalCloud = 7,
  kIncremental = 8,
  kEvalIncremental = 9,
  kFinalize = 10,
};

struct Stage {
  StageKind kind;
  std::size_t round = 0;  // 1-based; 0 for pretraining stages
};

std::vector<Stage> plan_stages(const RunConfig& cfg);
std::string stage_name(const Stage& s);

struct CloudStageTrace {
  std::string stage;   // "incremental" | "distill_backbone" | "distill_basis"
  double ce = 0.0;     // final-epoch means
  double kl = 0.0;
  double total = 0.0;
  std::size_t epochs = 0;
  std::size_t steps = 0;
};

struct RoundReport {
  std::size_t round = 0;
  std::size_t devices_trained = 0;
  std::size_t devices_skipped = 0;   // empty round buffer
  std::size_t devices_reverted = 0;  // non-finite local update
  double mean_local_loss_before = 0.0;
  double mean_local_loss_after = 0.0;
  std::vector<CloudStageTrace> cloud;
  std::optional<EvalReport> eval_e;
  std::optional<EvalReport> eval_m;
  double wall_seconds = 0.0;
};

enum class RunStatus : std::uint8_t {
  kFinished = 0,
  kPaused = 1,     // stage budget reached; resume by calling again
  kAbortedNan = 2, // training diverged; state up to the failed stage persists
};

struct RunResult {
  RunStatus status = RunStatus::kFinished;
  std::size_t stages_done = 0;        // cursor after this call
  std::size_t stages_total = 0;
  std::string failed_stage;           // kAbortedNan only
  std::vector<RoundReport> rounds;    // completed rounds, all of them
};

// Executes (at most `max_stages`) pending stages, persisting artifacts and
// advancing the cursor under `cfg.out_dir`. Calling again on a finished or
// killed run resumes from the cursor; the config must match the stored echo.
RunResult run_lifecycle(const RunConfig& cfg,
                        std::size_t max_stages = std::size_t(-1));

// ---- Experiments ------------------------------------------------------------

// Named recipes, each a small set of lifecycle runs plus a summary table:
//   rq1                baseline-incremental vs dccl-full, final metrics
//   rq2                per-group macro-AUC, pretrained baseline vs one-round
//                      patched models (20 rows per method)
//   rq3                equal data budget at short/medium/long round intervals,
//                      per-round metric traces
//   junction-ablation  one-round patched runs with exactly one gate on
//   one-round-ablation incremental vs dccl-e vs dccl-m after one round
// The base config supplies data, model and training settings; recipes own
// mode, rounds, gates and slicing. Returns the summary file it wrote.
std::filesystem::path run_experiment(const std::string& recipe,
                                     const RunConfig& base,
                                     const std::filesystem::path& out_root);

// ---- Post-run artifacts ------------------------------------------------------

// Writes the per-device code table with each device's dominant training
// category (most frequent category among the events it trained on; ties to
// the smaller id; devices that never trained fall back to their full
// pre-test history). Readable by read_patch_table. Returns rows written.
std::size_t export_metapatch_table(const std::filesystem::path& run_dir,
                                   const std::filesystem::path& out_csv);

// Scores one checkpointed model on the config's eval split. When `patches`
// rows are given, each user is scored with their own generated patch over
// the backbone (absent users score bare). Used by the `eval` subcommand.
EvalReport evaluate_model(const RunConfig& cfg, const Dataset& data,
                          const Splits& splits, const BackboneParams& backbone,
                          const ParamBasis* basis,
                          std::span<const MetaPatchVector> patches);

// ---- Pieces shared with the command line tool ---------------------------------

// Synchronizes the derived seeds after overrides: the split seed always
// tracks the run seed, the synthesizer seed only when never set explicitly.
// run_lifecycle applies this itself; call it before using a config directly.
void finalize_run_config(RunConfig& cfg);

// Loads whatever dataset the config points at (generating the synthetic
// corpus when data.kind = synth) and applies the minimum-interaction filter.
Dataset load_run_dataset(const RunConfig& cfg);

// Copies the dataset's entity counts and profile width into the model config.
void apply_data_dims(BackboneConfig& model, const Dataset& data);

// Round trips for the parameter checkpoints the lifecycle writes. The basis
// file carries the three generator matrices and the history encoder weights.
void save_backbone_checkpoint(const std::filesystem::path& path,
                              const BackboneParams& params);
void load_backbone_checkpoint(const std::filesystem::path& path,
                              BackboneParams& params);
void save_basis_checkpoint(const std::filesystem::path& path,
                           const ParamBasis& basis,
                           const AuxEncoderParams& encoder);
void load_basis_checkpoint(const std::filesystem::path& path, ParamBasis& basis,
                           AuxEncoderParams& encoder);

}  // namespace dccl
