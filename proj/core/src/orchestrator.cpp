#include "dccl/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "dccl/hashing.hpp"
#include "dccl/parallel.hpp"
#include "dccl/rng.hpp"

namespace dccl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::runtime_error("config: bad value '" + value + "' for key '" +
                           key + "'");
}

double to_f64(const std::string& key, const std::string& value) {
  if (value.empty()) bad_value(key, value);
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end != value.c_str() + value.size()) bad_value(key, value);
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value[0] == '-') bad_value(key, value);
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end != value.c_str() + value.size()) bad_value(key, value);
  return static_cast<std::uint64_t>(v);
}

std::size_t to_sz(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(to_u64(key, value));
}

PatchGate parse_gate(const std::string& key, const std::string& value) {
  PatchGate g;
  std::stringstream ss(value);
  std::string tok;
  std::size_t i = 0;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (i >= 3 || (tok != "0" && tok != "1")) bad_value(key, value);
    g.on[i++] = (tok == "1");
  }
  if (i != 3) bad_value(key, value);
  return g;
}

std::string gate_str(const PatchGate& g) {
  std::string s;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i) s += ',';
    s += g.on[i] ? '1' : '0';
  }
  return s;
}

}  // namespace

void finalize_run_config(RunConfig& cfg) {
  cfg.split.seed = cfg.seed;
  if (!cfg.synth_seed_explicit) cfg.synth.seed = cfg.seed;
}

RunMode parse_run_mode(const std::string& text) {
  if (text == "baseline-incremental") return RunMode::kBaselineIncremental;
  if (text == "dccl-e-only" || text == "junction-ablation")
    return RunMode::kDcclEOnly;
  if (text == "dccl-full" || text == "interval-study") return RunMode::kDcclFull;
  throw std::runtime_error("config: unknown mode '" + text + "'");
}

std::string run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kBaselineIncremental: return "baseline-incremental";
    case RunMode::kDcclEOnly: return "dccl-e-only";
    case RunMode::kDcclFull: return "dccl-full";
  }
  throw std::logic_error("run_mode_name: bad mode");
}

void RunConfig::validate() const {
  if (data_kind != DataKind::kSynth && data_path.empty())
    throw std::runtime_error("config: data.path required for this data.kind");
  if (split.pretrain_fraction < 0.0 || split.pretrain_fraction > 1.0)
    throw std::runtime_error("config: split.pretrain_fraction outside [0,1]");
  if (split.n_slices == 0) throw std::runtime_error("config: split.slices = 0");
  if (split.n_negatives == 0)
    throw std::runtime_error("config: split.negatives = 0");
  if (slices_per_round == 0)
    throw std::runtime_error("config: slices_per_round = 0");
  if (rounds * slices_per_round > split.n_slices)
    throw std::runtime_error(
        "config: rounds * slices_per_round exceeds split.slices");
  if (k_hat == 0) throw std::runtime_error("config: patch.k_hat = 0");
  if (pretrain_epochs == 0 || cloud.epochs == 0 || device.epochs == 0)
    throw std::runtime_error("config: epochs = 0");
  if (cloud.batch == 0 || device.batch == 0)
    throw std::runtime_error("config: batch = 0");
  if (cloud.negatives == 0 || device.negatives == 0)
    throw std::runtime_error("config: negatives = 0");
  if (!(cloud.lr >= 0.0) || !(device.lr >= 0.0) || !(cloud.beta >= 0.0))
    throw std::runtime_error("config: negative or non-finite rate");
}

void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
  if (key == "data.kind") {
    if (value == "synth") cfg.data_kind = DataKind::kSynth;
    else if (value == "file") cfg.data_kind = DataKind::kFile;
    else if (value == "movielens") cfg.data_kind = DataKind::kMovielens;
    else bad_value(key, value);
  } else if (key == "data.path") {
    cfg.data_path = value;
  } else if (key == "data.filter_min") {
    cfg.filter_min = to_sz(key, value);
  } else if (key == "synth.users") {
    cfg.synth.n_users = to_sz(key, value);
  } else if (key == "synth.items") {
    cfg.synth.n_items = to_sz(key, value);
  } else if (key == "synth.cats") {
    cfg.synth.n_cats = to_sz(key, value);
  } else if (key == "synth.alpha") {
    cfg.synth.alpha = to_f64(key, value);
  } else if (key == "synth.max_events") {
    cfg.synth.max_events = to_sz(key, value);
  } else if (key == "synth.min_events") {
    cfg.synth.min_events = to_sz(key, value);
  } else if (key == "synth.noise") {
    cfg.synth.noise = to_f64(key, value);
  } else if (key == "synth.hidden_mix") {
    cfg.synth.hidden_mix = to_f64(key, value);
  } else if (key == "synth.profile_dim") {
    cfg.synth.profile_dim = to_sz(key, value);
  } else if (key == "synth.seed") {
    cfg.synth.seed = to_u64(key, value);
    cfg.synth_seed_explicit = true;
  } else if (key == "split.pretrain_fraction") {
    cfg.split.pretrain_fraction = to_f64(key, value);
  } else if (key == "split.slices") {
    cfg.split.n_slices = to_sz(key, value);
  } else if (key == "split.negatives") {
    cfg.split.n_negatives = to_sz(key, value);
  } else if (key == "split.min_user_events") {
    cfg.split.min_user_events = to_sz(key, value);
  } else if (key == "model.user_dim") {
    cfg.model.user_dim = to_sz(key, value);
  } else if (key == "model.item_dim") {
    cfg.model.item_dim = to_sz(key, value);
  } else if (key == "model.cat_dim") {
    cfg.model.cat_dim = to_sz(key, value);
  } else if (key == "model.attn_dim") {
    cfg.model.attn_dim = to_sz(key, value);
  } else if (key == "model.tower1") {
    cfg.model.tower1 = to_sz(key, value);
  } else if (key == "model.tower2") {
    cfg.model.tower2 = to_sz(key, value);
  } else if (key == "model.tower3") {
    cfg.model.tower3 = to_sz(key, value);
  } else if (key == "model.bottleneck1") {
    cfg.model.patch_bottleneck[0] = to_sz(key, value);
  } else if (key == "model.bottleneck2") {
    cfg.model.patch_bottleneck[1] = to_sz(key, value);
  } else if (key == "model.bottleneck3") {
    cfg.model.patch_bottleneck[2] = to_sz(key, value);
  } else if (key == "model.max_history") {
    cfg.model.max_history = to_sz(key, value);
  } else if (key == "patch.k_hat") {
    cfg.k_hat = to_sz(key, value);
  } else if (key == "patch.gate") {
    cfg.gate = parse_gate(key, value);
  } else if (key == "ndcg") {
    if (value == "standard") cfg.ndcg = NdcgForm::kStandard;
    else if (value == "paper-literal") cfg.ndcg = NdcgForm::kPaperLiteral;
    else bad_value(key, value);
  } else if (key == "rounds") {
    cfg.rounds = to_sz(key, value);
  } else if (key == "slices_per_round") {
    cfg.slices_per_round = to_sz(key, value);
  } else if (key == "pretrain.epochs") {
    cfg.pretrain_epochs = to_sz(key, value);
  } else if (key == "cloud.lr") {
    cfg.cloud.lr = to_f64(key, value);
  } else if (key == "cloud.beta") {
    cfg.cloud.beta = to_f64(key, value);
  } else if (key == "cloud.batch") {
    cfg.cloud.batch = to_sz(key, value);
  } else if (key == "cloud.epochs") {
    cfg.cloud.epochs = to_sz(key, value);
  } else if (key == "cloud.negatives") {
    cfg.cloud.negatives = to_sz(key, value);
  } else if (key == "device.lr") {
    cfg.device.lr = to_f64(key, value);
  } else if (key == "device.batch") {
    cfg.device.batch = to_sz(key, value);
  } else if (key == "device.epochs") {
    cfg.device.epochs = to_sz(key, value);
  } else if (key == "device.negatives") {
    cfg.device.negatives = to_sz(key, value);
  } else if (key == "mode") {
    cfg.mode = parse_run_mode(value);
  } else if (key == "seed") {
    cfg.seed = to_u64(key, value);
  } else if (key == "out") {
    cfg.out_dir = value;
  } else {
    throw std::runtime_error("config: unknown key '" + key + "'");
  }
}

RunConfig parse_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(is, line)) {
    ++ln;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: " + path.filename().string() + ":" +
                               std::to_string(ln) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config: " + path.filename().string() + ":" +
                               std::to_string(ln) + ": empty key");
    if (!seen.insert(key).second)
      throw std::runtime_error("config: " + path.filename().string() + ":" +
                               std::to_string(ln) + ": duplicate key '" + key +
                               "'");
    try {
      set_config_key(cfg, key, value);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.filename().string() + ":" +
                               std::to_string(ln) + ": " + e.what());
    }
  }
  finalize_run_config(cfg);
  return cfg;
}

std::string render_run_config(const RunConfig& in) {
  RunConfig cfg = in;
  finalize_run_config(cfg);
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) {
    os << k << " = " << v << '\n';
  };
  const char* kind = cfg.data_kind == DataKind::kSynth      ? "synth"
                     : cfg.data_kind == DataKind::kFile     ? "file"
                                                            : "movielens";
  kv("data.kind", kind);
  kv("data.path", cfg.data_path.string());
  kv("data.filter_min", std::to_string(cfg.filter_min));
  kv("synth.users", std::to_string(cfg.synth.n_users));
  kv("synth.items", std::to_string(cfg.synth.n_items));
  kv("synth.cats", std::to_string(cfg.synth.n_cats));
  kv("synth.alpha", g17(cfg.synth.alpha));
  kv("synth.max_events", std::to_string(cfg.synth.max_events));
  kv("synth.min_events", std::to_string(cfg.synth.min_events));
  kv("synth.noise", g17(cfg.synth.noise));
  kv("synth.hidden_mix", g17(cfg.synth.hidden_mix));
  kv("synth.profile_dim", std::to_string(cfg.synth.profile_dim));
  kv("synth.seed", std::to_string(cfg.synth.seed));
  kv("split.pretrain_fraction", g17(cfg.split.pretrain_fraction));
  kv("split.slices", std::to_string(cfg.split.n_slices));
  kv("split.negatives", std::to_string(cfg.split.n_negatives));
  kv("split.min_user_events", std::to_string(cfg.split.min_user_events));
  kv("model.user_dim", std::to_string(cfg.model.user_dim));
  kv("model.item_dim", std::to_string(cfg.model.item_dim));
  kv("model.cat_dim", std::to_string(cfg.model.cat_dim));
  kv("model.attn_dim", std::to_string(cfg.model.attn_dim));
  kv("model.tower1", std::to_string(cfg.model.tower1));
  kv("model.tower2", std::to_string(cfg.model.tower2));
  kv("model.tower3", std::to_string(cfg.model.tower3));
  kv("model.bottleneck1", std::to_string(cfg.model.patch_bottleneck[0]));
  kv("model.bottleneck2", std::to_string(cfg.model.patch_bottleneck[1]));
  kv("model.bottleneck3", std::to_string(cfg.model.patch_bottleneck[2]));
  kv("model.max_history", std::to_string(cfg.model.max_history));
  kv("patch.k_hat", std::to_string(cfg.k_hat));
  kv("patch.gate", gate_str(cfg.gate));
  kv("ndcg", cfg.ndcg == NdcgForm::kStandard ? "standard" : "paper-literal");
  kv("rounds", std::to_string(cfg.rounds));
  kv("slices_per_round", std::to_string(cfg.slices_per_round));
  kv("pretrain.epochs", std::to_string(cfg.pretrain_epochs));
  kv("cloud.lr", g17(cfg.cloud.lr));
  kv("cloud.beta", g17(cfg.cloud.beta));
  kv("cloud.batch", std::to_string(cfg.cloud.batch));
  kv("cloud.epochs", std::to_string(cfg.cloud.epochs));
  kv("cloud.negatives", std::to_string(cfg.cloud.negatives));
  kv("device.lr", g17(cfg.device.lr));
  kv("device.batch", std::to_string(cfg.device.batch));
  kv("device.epochs", std::to_string(cfg.device.epochs));
  kv("device.negatives", std::to_string(cfg.device.negatives));
  kv("mode", run_mode_name(cfg.mode));
  kv("seed", std::to_string(cfg.seed));
  kv("out", cfg.out_dir.string());
  return os.str();
}

// ---- Stage plan --------------------------------------------------------------

std::vector<Stage> plan_stages(const RunConfig& cfg) {
  std::vector<Stage> stages;
  stages.push_back({StageKind::kPretrainBackbone, 0});
  stages.push_back({StageKind::kEvalPretrain, 0});
  if (cfg.mode != RunMode::kBaselineIncremental)
    stages.push_back({StageKind::kPretrainBasis, 0});
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    switch (cfg.mode) {
      case RunMode::kBaselineIncremental:
        stages.push_back({StageKind::kIncremental, t});
        stages.push_back({StageKind::kEvalIncremental, t});
        break;
      case RunMode::kDcclEOnly:
        stages.push_back({StageKind::kDevicePhase, t});
        stages.push_back({StageKind::kEvalDevices, t});
        break;
      case RunMode::kDcclFull:
        stages.push_back({StageKind::kDevicePhase, t});
        stages.push_back({StageKind::kEvalDevices, t});
        stages.push_back({StageKind::kDistillBackbone, t});
        stages.push_back({StageKind::kDistillBasis, t});
        stages.push_back({StageKind::kEvalCloud, t});
        break;
    }
  }
  stages.push_back({StageKind::kFinalize, 0});
  return stages;
}

std::string stage_name(const Stage& s) {
  const std::string r = "round" + std::to_string(s.round);
  switch (s.kind) {
    case StageKind::kPretrainBackbone: return "pretrain_backbone";
    case StageKind::kEvalPretrain: return "eval_pretrain";
    case StageKind::kPretrainBasis: return "pretrain_basis";
    case StageKind::kDevicePhase: return r + "_device";
    case StageKind::kEvalDevices: return r + "_eval_e";
    case StageKind::kDistillBackbone: return r + "_distill_backbone";
    case StageKind::kDistillBasis: return r + "_distill_basis";
    case StageKind::kEvalCloud: return r + "_eval_m";
    case StageKind::kIncremental: return r + "_incremental";
    case StageKind::kEvalIncremental: return r + "_eval";
    case StageKind::kFinalize: return "finalize";
  }
  throw std::logic_error("stage_name: bad kind");
}

namespace {

// Name under which a stage's evaluation report is stored; empty when the
// stage does not evaluate.
std::string eval_name(const Stage& s) {
  switch (s.kind) {
    case StageKind::kEvalPretrain: return "pretrain";
    case StageKind::kEvalDevices: return "round" + std::to_string(s.round) + "_e";
    case StageKind::kEvalCloud: return "round" + std::to_string(s.round) + "_m";
    case StageKind::kEvalIncremental: return "round" + std::to_string(s.round);
    default: return "";
  }
}

bool stage_has_trace(StageKind k) {
  return k == StageKind::kPretrainBackbone || k == StageKind::kPretrainBasis ||
         k == StageKind::kIncremental || k == StageKind::kDistillBackbone ||
         k == StageKind::kDistillBasis;
}

struct Paths {
  fs::path out, ckpt, eval, reports, trace;

  explicit Paths(const fs::path& o)
      : out(o), ckpt(o / "ckpt"), eval(o / "eval"), reports(o / "reports"),
        trace(o / "trace") {}

  void create() const {
    fs::create_directories(ckpt);
    fs::create_directories(eval);
    fs::create_directories(reports);
    fs::create_directories(trace);
  }

  fs::path state() const { return out / "state.json"; }
  fs::path echo() const { return out / "config_echo.txt"; }
  fs::path runlog() const { return out / "run.log"; }
  fs::path metrics() const { return out / "metrics.csv"; }
  fs::path round_report() const { return out / "round_report.json"; }
  fs::path loss_trace() const { return out / "loss_trace.csv"; }

  fs::path backbone_ck(std::size_t t) const {
    return t == 0 ? ckpt / "backbone_pre.ckpt"
                  : ckpt / ("backbone_round_" + std::to_string(t) + ".ckpt");
  }
  fs::path basis_ck(std::size_t t) const {
    return t == 0 ? ckpt / "basis_pre.ckpt"
                  : ckpt / ("basis_round_" + std::to_string(t) + ".ckpt");
  }
  fs::path devices_ck(std::size_t t) const {
    return ckpt / ("devices_round_" + std::to_string(t) + ".ckpt");
  }
  fs::path recycle(std::size_t t) const {
    return out / ("recycle_round_" + std::to_string(t) + ".csv");
  }
  fs::path eval_json(const std::string& name) const {
    return eval / (name + ".json");
  }
  fs::path report_json(std::size_t t) const {
    return reports / ("round_" + std::to_string(t) + ".json");
  }
  fs::path trace_csv(const std::string& tag) const {
    return trace / (tag + ".csv");
  }
};

// ---- JSON (de)serialization ---------------------------------------------------

json eval_to_json(const EvalReport& r) {
  json j;
  j["format"] = "dccl-eval-v1";
  j["hit1"] = r.hit1;
  j["hit5"] = r.hit5;
  j["hit10"] = r.hit10;
  j["ndcg5"] = r.ndcg5;
  j["ndcg10"] = r.ndcg10;
  j["auc"] = r.auc;
  json g = json::array();
  for (double v : r.group_auc) {
    if (std::isnan(v)) g.push_back(nullptr);
    else g.push_back(v);
  }
  j["group_auc"] = std::move(g);
  j["n_cases"] = r.n_cases;
  return j;
}

EvalReport eval_from_json(const json& j) {
  EvalReport r;
  r.hit1 = j.at("hit1").get<double>();
  r.hit5 = j.at("hit5").get<double>();
  r.hit10 = j.at("hit10").get<double>();
  r.ndcg5 = j.at("ndcg5").get<double>();
  r.ndcg10 = j.at("ndcg10").get<double>();
  r.auc = j.at("auc").get<double>();
  for (const json& v : j.at("group_auc"))
    r.group_auc.push_back(v.is_null() ? std::nan("") : v.get<double>());
  r.n_cases = j.at("n_cases").get<std::size_t>();
  return r;
}

EvalReport load_eval(const fs::path& path) {
  return eval_from_json(json::parse(read_text(path)));
}

json round_to_json(const RoundReport& r) {
  json j;
  j["format"] = "dccl-round-v1";
  j["round"] = r.round;
  j["devices_trained"] = r.devices_trained;
  j["devices_skipped"] = r.devices_skipped;
  j["devices_reverted"] = r.devices_reverted;
  j["mean_local_loss_before"] = r.mean_local_loss_before;
  j["mean_local_loss_after"] = r.mean_local_loss_after;
  json cloud = json::array();
  for (const CloudStageTrace& c : r.cloud) {
    cloud.push_back({{"stage", c.stage},
                     {"ce", c.ce},
                     {"kl", c.kl},
                     {"total", c.total},
                     {"epochs", c.epochs},
                     {"steps", c.steps}});
  }
  j["cloud"] = std::move(cloud);
  j["eval_e"] = r.eval_e ? eval_to_json(*r.eval_e) : json(nullptr);
  j["eval_m"] = r.eval_m ? eval_to_json(*r.eval_m) : json(nullptr);
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

RoundReport round_from_json(const json& j) {
  RoundReport r;
  r.round = j.at("round").get<std::size_t>();
  r.devices_trained = j.at("devices_trained").get<std::size_t>();
  r.devices_skipped = j.at("devices_skipped").get<std::size_t>();
  r.devices_reverted = j.at("devices_reverted").get<std::size_t>();
  r.mean_local_loss_before = j.at("mean_local_loss_before").get<double>();
  r.mean_local_loss_after = j.at("mean_local_loss_after").get<double>();
  for (const json& c : j.at("cloud")) {
    CloudStageTrace t;
    t.stage = c.at("stage").get<std::string>();
    t.ce = c.at("ce").get<double>();
    t.kl = c.at("kl").get<double>();
    t.total = c.at("total").get<double>();
    t.epochs = c.at("epochs").get<std::size_t>();
    t.steps = c.at("steps").get<std::size_t>();
    r.cloud.push_back(std::move(t));
  }
  if (!j.at("eval_e").is_null()) r.eval_e = eval_from_json(j.at("eval_e"));
  if (!j.at("eval_m").is_null()) r.eval_m = eval_from_json(j.at("eval_m"));
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

}  // namespace

// ---- Data and parameter IO ----------------------------------------------------

Dataset load_run_dataset(const RunConfig& cfg) {
  Dataset data;
  switch (cfg.data_kind) {
    case DataKind::kSynth: data = synth_generate(cfg.synth); break;
    case DataKind::kFile: data = read_dataset(cfg.data_path); break;
    case DataKind::kMovielens: data = parse_movielens(cfg.data_path); break;
  }
  if (cfg.filter_min > 0) filter_min_interactions(data, cfg.filter_min);
  return data;
}

void apply_data_dims(BackboneConfig& model, const Dataset& data) {
  model.n_users = data.n_users;
  model.n_items = data.n_items;
  model.n_cats = data.n_cats;
  model.profile_dim = data.profile_dim;
}

void save_backbone_checkpoint(const fs::path& path, const BackboneParams& p) {
  NamedTensors nts;
  for (const auto& [name, t] : p.named()) nts.emplace_back(name, *t);
  write_checkpoint(path, nts);
}

void load_backbone_checkpoint(const fs::path& path, BackboneParams& p) {
  const NamedTensors nts = read_checkpoint(path);
  for (auto& [name, t] : p.named()) load_into(nts, name, *t);
}

void save_basis_checkpoint(const fs::path& path, const ParamBasis& basis,
                           const AuxEncoderParams& enc) {
  NamedTensors nts = basis.named();
  for (auto& [name, t] : enc.named()) nts.emplace_back(name, t);
  write_checkpoint(path, nts);
}

void load_basis_checkpoint(const fs::path& path, ParamBasis& basis,
                           AuxEncoderParams& enc) {
  const NamedTensors nts = read_checkpoint(path);
  for (std::size_t l = 0; l < basis.theta.size(); ++l)
    load_into(nts, "basis_theta" + std::to_string(l + 1), basis.theta[l]);
  load_into(nts, "enc_w1", enc.w1);
  load_into(nts, "enc_w2", enc.w2);
  load_into(nts, "enc_w3", enc.w3);
}

namespace {

void save_devices(const fs::path& path, const std::vector<DeviceState>& devs,
                  std::size_t k_hat) {
  const std::size_t n = devs.size();
  Tensor theta({n, k_hat}), m({n, k_hat}), v({n, k_hat});
  Tensor t({n}), rounds({n}), steps({n});
  for (std::size_t u = 0; u < n; ++u) {
    const DeviceState& d = devs[u];
    std::copy(d.theta_hat.data(), d.theta_hat.data() + k_hat,
              theta.data() + u * k_hat);
    if (d.adam) {
      std::copy(d.adam->m()[0].data(), d.adam->m()[0].data() + k_hat,
                m.data() + u * k_hat);
      std::copy(d.adam->v()[0].data(), d.adam->v()[0].data() + k_hat,
                v.data() + u * k_hat);
      t[u] = static_cast<double>(d.adam->steps());
    }
    rounds[u] = static_cast<double>(d.rounds_trained);
    steps[u] = static_cast<double>(d.steps);
  }
  write_checkpoint(path, {{"theta", theta},
                          {"adam_m", m},
                          {"adam_v", v},
                          {"adam_t", t},
                          {"rounds_trained", rounds},
                          {"steps", steps}});
}

void load_devices(const fs::path& path, std::vector<DeviceState>& devs,
                  std::size_t k_hat, double device_lr) {
  const NamedTensors nts = read_checkpoint(path);
  const Tensor& theta = find_tensor(nts, "theta");
  const Tensor& m = find_tensor(nts, "adam_m");
  const Tensor& v = find_tensor(nts, "adam_v");
  const Tensor& t = find_tensor(nts, "adam_t");
  const Tensor& rounds = find_tensor(nts, "rounds_trained");
  const Tensor& steps = find_tensor(nts, "steps");
  if (theta.rank() != 2 || theta.rows() != devs.size() || theta.cols() != k_hat)
    throw std::runtime_error("device checkpoint shape mismatch: " +
                             path.string());
  for (std::size_t u = 0; u < devs.size(); ++u) {
    DeviceState& d = devs[u];
    std::copy(theta.data() + u * k_hat, theta.data() + (u + 1) * k_hat,
              d.theta_hat.data());
    d.rounds_trained = static_cast<std::uint64_t>(rounds[u]);
    d.steps = static_cast<std::uint64_t>(steps[u]);
    if (t[u] > 0.0) {
      AdamConfig acfg;
      acfg.lr = device_lr;
      const Tensor* params[1] = {&d.theta_hat};
      d.adam = std::make_unique<AdamState>(acfg, params);
      std::copy(m.data() + u * k_hat, m.data() + (u + 1) * k_hat,
                d.adam->m()[0].data());
      std::copy(v.data() + u * k_hat, v.data() + (u + 1) * k_hat,
                d.adam->v()[0].data());
      d.adam->set_steps(static_cast<std::uint64_t>(t[u]));
    } else {
      d.adam.reset();
    }
  }
}

// ---- Lifecycle driver ----------------------------------------------------------

struct Driver {
  RunConfig cfg;  // finalized, model dims applied
  Paths paths;
  Dataset data;
  Splits splits;
  std::vector<Stage> stages;

  BackboneParams backbone;
  ParamBasis basis;
  AuxEncoderParams enc;
  std::vector<DeviceState> devices;
  std::map<std::size_t, RoundReport> reports;
  std::size_t cursor = 0;

  explicit Driver(RunConfig c) : cfg(std::move(c)), paths(cfg.out_dir) {
    paths.create();
    const std::string echo = render_run_config(cfg);
    if (fs::exists(paths.echo())) {
      if (read_text(paths.echo()) != echo)
        throw std::runtime_error(
            "output directory " + cfg.out_dir.string() +
            " was produced by a different configuration; refusing to mix");
    } else {
      write_text_atomic(paths.echo(), echo);
    }

    data = load_run_dataset(cfg);
    apply_data_dims(cfg.model, data);
    cfg.model.validate();
    splits = build_splits(data, cfg.split);
    stages = plan_stages(cfg);

    backbone = BackboneParams::init(cfg.model, cfg.seed);
    basis = ParamBasis::init(cfg.model, cfg.k_hat, cfg.seed);
    enc = AuxEncoderParams::init(cfg.k_hat, cfg.model.profile_dim, cfg.seed);
    devices.reserve(data.n_users);
    for (std::uint32_t u = 0; u < data.n_users; ++u)
      devices.push_back(make_device(u, cfg.k_hat));

    if (fs::exists(paths.state())) {
      const json st = json::parse(read_text(paths.state()));
      if (st.at("format").get<std::string>() != "dccl-run-v1")
        throw std::runtime_error("unrecognized state file " +
                                 paths.state().string());
      cursor = st.at("stages_done").get<std::size_t>();
      if (st.at("stages_total").get<std::size_t>() != stages.size() ||
          cursor > stages.size())
        throw std::runtime_error("state file does not match the plan: " +
                                 paths.state().string());
    }
    replay_completed();
  }

  // Restores in-memory state from the artifacts of completed stages.
  void replay_completed() {
    long last_backbone = -1, last_basis = -1, last_devices = -1;
    for (std::size_t i = 0; i < cursor; ++i) {
      const Stage& s = stages[i];
      switch (s.kind) {
        case StageKind::kPretrainBackbone: last_backbone = 0; break;
        case StageKind::kPretrainBasis: last_basis = 0; break;
        case StageKind::kDevicePhase:
          last_devices = static_cast<long>(s.round);
          break;
        case StageKind::kDistillBackbone:
        case StageKind::kIncremental:
          last_backbone = static_cast<long>(s.round);
          break;
        case StageKind::kDistillBasis:
          last_basis = static_cast<long>(s.round);
          break;
        default: break;
      }
      if (s.round > 0 && reports.find(s.round) == reports.end() &&
          fs::exists(paths.report_json(s.round)))
        reports[s.round] =
            round_from_json(json::parse(read_text(paths.report_json(s.round))));
    }
    if (last_backbone >= 0)
      load_backbone_checkpoint(paths.backbone_ck(static_cast<std::size_t>(last_backbone)),
                    backbone);
    if (last_basis >= 0)
      load_basis_checkpoint(paths.basis_ck(static_cast<std::size_t>(last_basis)), basis,
                 enc);
    if (last_devices >= 1)
      load_devices(paths.devices_ck(static_cast<std::size_t>(last_devices)),
                   devices, cfg.k_hat, cfg.device.lr);
  }

  void log(const std::string& line) {
    std::ofstream os(paths.runlog(), std::ios::app);
    os << line << '\n';
  }

  std::vector<TrainPos> round_positions(std::size_t t) const {
    std::vector<TrainPos> positions;
    const std::size_t begin = (t - 1) * cfg.slices_per_round;
    const std::size_t end = t * cfg.slices_per_round;
    for (std::size_t i = begin; i < end; ++i)
      positions.insert(positions.end(), splits.slices[i].begin(),
                       splits.slices[i].end());
    return positions;
  }

  DistillConfig pretrain_cfg() const {
    DistillConfig d = cfg.cloud;
    d.epochs = cfg.pretrain_epochs;
    return d;
  }

  RoundReport& report(std::size_t t) {
    auto it = reports.find(t);
    if (it == reports.end()) {
      it = reports.emplace(t, RoundReport{}).first;
      it->second.round = t;
    }
    return it->second;
  }

  void persist_report(std::size_t t) {
    write_text_atomic(paths.report_json(t), round_to_json(report(t)).dump(2));
  }

  CloudStageTrace cloud_trace(const std::string& stage, const TrainReport& r) {
    CloudStageTrace c;
    c.stage = stage;
    if (!r.epochs.empty()) {
      c.ce = r.epochs.back().ce;
      c.kl = r.epochs.back().kl;
      c.total = r.epochs.back().total;
    }
    c.epochs = r.epochs.size();
    c.steps = r.steps;
    return c;
  }

  // Replaces any stale trace entry for `stage` (a rerun after a crash).
  void add_cloud_trace(std::size_t t, CloudStageTrace c) {
    auto& cloud = report(t).cloud;
    for (auto& existing : cloud) {
      if (existing.stage == c.stage) {
        existing = std::move(c);
        return;
      }
    }
    cloud.push_back(std::move(c));
  }

  std::vector<MetaPatchVector> trained_device_rows() const {
    std::vector<MetaPatchVector> rows;
    for (const DeviceState& d : devices)
      if (d.rounds_trained > 0) rows.push_back(export_patch_row(d));
    return rows;
  }

  // The distilled stack serves each device through its proxy model: the code
  // the encoder assigns it, expanded by the refreshed basis. That is exactly
  // the model the basis stage trained to imitate the device teachers.
  std::vector<MetaPatchVector> encoded_device_rows() const {
    const std::size_t pd = data.profile_dim;
    std::vector<MetaPatchVector> rows;
    for (const DeviceState& d : devices) {
      if (d.rounds_trained == 0) continue;
      Tensor profile({pd});
      std::copy(data.profiles.data() + d.device * pd,
                data.profiles.data() + (d.device + 1) * pd, profile.data());
      rows.push_back({d.device, encode(enc, d.theta_hat, profile)});
    }
    return rows;
  }

  std::uint64_t backbone_hash() const {
    auto ptrs = backbone.tensors();
    return hash_tensors(ptrs);
  }
  std::uint64_t basis_hash() const {
    std::vector<const Tensor*> ptrs;
    for (const Tensor& t : basis.theta) ptrs.push_back(&t);
    return hash_tensors(ptrs);
  }

  // Returns the failure name, empty on success.
  std::string execute(const Stage& s) {
    switch (s.kind) {
      case StageKind::kPretrainBackbone: {
        TrainReport r = incremental_train(backbone, data, splits.pretrain,
                                          cfg.model, pretrain_cfg(), cfg.seed,
                                          /*round=*/0);
        if (r.aborted_nan) return stage_name(s);
        save_backbone_checkpoint(paths.backbone_ck(0), backbone);
        write_loss_trace(paths.trace_csv(stage_name(s)), r.epochs);
        break;
      }
      case StageKind::kEvalPretrain: {
        EvalReport rep = evaluate_model(cfg, data, splits, backbone, nullptr, {});
        write_text_atomic(paths.eval_json("pretrain"),
                          eval_to_json(rep).dump(2));
        break;
      }
      case StageKind::kPretrainBasis: {
        TrainReport r = pretrain_basis(basis, enc, backbone, data,
                                       splits.pretrain, cfg.model,
                                       pretrain_cfg(), cfg.seed);
        if (r.aborted_nan) return stage_name(s);
        save_basis_checkpoint(paths.basis_ck(0), basis, enc);
        write_loss_trace(paths.trace_csv(stage_name(s)), r.epochs);
        break;
      }
      case StageKind::kDevicePhase: {
        run_device_phase(s.round);
        persist_report(s.round);
        break;
      }
      case StageKind::kEvalDevices: {
        auto rows = trained_device_rows();
        EvalReport rep = evaluate_model(cfg, data, splits, backbone, &basis,
                                        rows);
        write_text_atomic(paths.eval_json(eval_name(s)),
                          eval_to_json(rep).dump(2));
        report(s.round).eval_e = rep;
        persist_report(s.round);
        break;
      }
      case StageKind::kDistillBackbone: {
        auto rows = read_patch_table(paths.recycle(s.round));
        TeacherBundle teachers = make_teacher_bundle(backbone, basis, rows);
        auto positions = round_positions(s.round);
        TrainReport r = distill_backbone(backbone, teachers, data, positions,
                                         cfg.model, cfg.cloud, cfg.seed,
                                         s.round);
        if (r.aborted_nan) return stage_name(s);
        save_backbone_checkpoint(paths.backbone_ck(s.round), backbone);
        write_loss_trace(paths.trace_csv(stage_name(s)), r.epochs);
        add_cloud_trace(s.round, cloud_trace("distill_backbone", r));
        persist_report(s.round);
        break;
      }
      case StageKind::kDistillBasis: {
        // The teacher is the broadcast snapshot, i.e. the backbone as the
        // devices saw it this round, not the one just distilled.
        BackboneParams broadcast = BackboneParams::zeros(cfg.model);
        load_backbone_checkpoint(paths.backbone_ck(s.round - 1), broadcast);
        auto rows = read_patch_table(paths.recycle(s.round));
        TeacherBundle teachers = make_teacher_bundle(broadcast, basis, rows);
        auto positions = round_positions(s.round);
        TrainReport r = distill_basis(basis, enc, backbone, teachers, data,
                                      positions, cfg.model, cfg.cloud,
                                      cfg.seed, s.round);
        if (r.aborted_nan) return stage_name(s);
        save_basis_checkpoint(paths.basis_ck(s.round), basis, enc);
        write_loss_trace(paths.trace_csv(stage_name(s)), r.epochs);
        add_cloud_trace(s.round, cloud_trace("distill_basis", r));
        persist_report(s.round);
        break;
      }
      case StageKind::kEvalCloud: {
        auto rows = encoded_device_rows();
        EvalReport rep = evaluate_model(cfg, data, splits, backbone, &basis,
                                        rows);
        write_text_atomic(paths.eval_json(eval_name(s)),
                          eval_to_json(rep).dump(2));
        report(s.round).eval_m = rep;
        persist_report(s.round);
        break;
      }
      case StageKind::kIncremental: {
        auto positions = round_positions(s.round);
        TrainReport r = incremental_train(backbone, data, positions, cfg.model,
                                          cfg.cloud, cfg.seed, s.round);
        if (r.aborted_nan) return stage_name(s);
        save_backbone_checkpoint(paths.backbone_ck(s.round), backbone);
        write_loss_trace(paths.trace_csv(stage_name(s)), r.epochs);
        add_cloud_trace(s.round, cloud_trace("incremental", r));
        persist_report(s.round);
        break;
      }
      case StageKind::kEvalIncremental: {
        EvalReport rep = evaluate_model(cfg, data, splits, backbone, nullptr, {});
        write_text_atomic(paths.eval_json(eval_name(s)),
                          eval_to_json(rep).dump(2));
        report(s.round).eval_m = rep;
        persist_report(s.round);
        break;
      }
      case StageKind::kFinalize: {
        finalize_outputs();
        break;
      }
    }
    return "";
  }

  void run_device_phase(std::size_t t) {
    log("stage round" + std::to_string(t) + "_device broadcast backbone=" +
        std::to_string(backbone_hash()) + " basis=" +
        std::to_string(basis_hash()));

    std::vector<std::vector<TrainPos>> buffers(data.n_users);
    const std::size_t begin = (t - 1) * cfg.slices_per_round;
    const std::size_t end = t * cfg.slices_per_round;
    for (std::size_t i = begin; i < end; ++i)
      for (const TrainPos& p : splits.slices[i]) buffers[p.user].push_back(p);

    std::vector<PersonalizeStats> stats(data.n_users);
    for_chunks(data.n_users, 64, default_threads(),
               [&](std::size_t, std::size_t lo, std::size_t hi) {
                 for (std::size_t u = lo; u < hi; ++u) {
                   if (buffers[u].empty()) {
                     stats[u].skipped_empty = true;
                     continue;
                   }
                   stats[u] = personalize(devices[u], data, buffers[u],
                                          backbone, cfg.model, basis,
                                          cfg.device, cfg.seed, t);
                 }
               });

    RoundReport& rep = report(t);
    rep.devices_trained = 0;
    rep.devices_skipped = 0;
    rep.devices_reverted = 0;
    double before = 0.0, after = 0.0;
    std::size_t measured = 0;
    std::vector<MetaPatchVector> rows;
    for (std::size_t u = 0; u < data.n_users; ++u) {
      if (stats[u].skipped_empty) {
        ++rep.devices_skipped;
        continue;
      }
      ++rep.devices_trained;
      rows.push_back(export_patch_row(devices[u]));
      if (stats[u].reverted_nan) {
        ++rep.devices_reverted;
        continue;
      }
      before += stats[u].initial_loss;
      after += stats[u].final_loss;
      ++measured;
    }
    rep.mean_local_loss_before = measured ? before / measured : 0.0;
    rep.mean_local_loss_after = measured ? after / measured : 0.0;

    write_patch_table(paths.recycle(t), rows);
    save_devices(paths.devices_ck(t), devices, cfg.k_hat);
  }

  void finalize_outputs() {
    std::vector<MetricRow> rows;
    for (const Stage& s : stages) {
      const std::string name = eval_name(s);
      if (name.empty()) continue;
      const auto rep_rows = report_rows(load_eval(paths.eval_json(name)), name);
      rows.insert(rows.end(), rep_rows.begin(), rep_rows.end());
    }
    write_metrics_csv(paths.metrics(), rows);

    json arr = json::array();
    for (std::size_t t = 1; t <= cfg.rounds; ++t)
      arr.push_back(json::parse(read_text(paths.report_json(t))));
    write_text_atomic(paths.round_report(), arr.dump(2));

    std::vector<EpochTrace> all;
    for (const Stage& s : stages) {
      if (!stage_has_trace(s.kind)) continue;
      for (EpochTrace e : read_loss_trace(paths.trace_csv(stage_name(s)))) {
        e.epoch = all.size();
        all.push_back(e);
      }
    }
    write_loss_trace(paths.loss_trace(), all);
  }

  RunResult run(std::size_t max_stages) {
    RunResult result;
    result.stages_total = stages.size();
    std::size_t done_now = 0;
    while (cursor < stages.size()) {
      if (done_now == max_stages) {
        result.status = RunStatus::kPaused;
        break;
      }
      const Stage& s = stages[cursor];
      const auto t0 = std::chrono::steady_clock::now();
      const std::string failed = execute(s);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      if (!failed.empty()) {
        result.status = RunStatus::kAbortedNan;
        result.failed_stage = failed;
        log("stage " + failed + " aborted: non-finite training loss");
        break;
      }
      if (s.round > 0) {
        report(s.round).wall_seconds += wall;
        persist_report(s.round);
      }
      ++cursor;
      write_text_atomic(paths.state(),
                        json{{"format", "dccl-run-v1"},
                             {"stages_done", cursor},
                             {"stages_total", stages.size()}}
                            .dump(2));
      ++done_now;
      log("stage " + stage_name(s) + " ok wall=" + g17(wall) + "s");
    }
    result.stages_done = cursor;
    for (auto& [t, rep] : reports) result.rounds.push_back(rep);
    return result;
  }
};

}  // namespace

EvalReport evaluate_model(const RunConfig& cfg, const Dataset& data,
                          const Splits& splits, const BackboneParams& backbone,
                          const ParamBasis* basis,
                          std::span<const MetaPatchVector> patches) {
  std::unordered_map<std::uint32_t, const MetaPatchVector*> by_device;
  for (const MetaPatchVector& row : patches) by_device[row.device] = &row;

  std::vector<RankedCase> cases;
  std::vector<UserScores> scores;
  std::vector<std::uint32_t> users;
  std::vector<std::size_t> counts;
  cases.reserve(splits.eval_cases.size());

  Scorer bare(backbone, data.profiles);
  std::vector<std::uint32_t> items, cats;
  std::vector<double> probs;
  for (const EvalCase& ec : splits.eval_cases) {
    const HistoryView h =
        history_for(data, ec.user, ec.hist_end, cfg.model.max_history);
    items.clear();
    items.push_back(ec.item);
    items.insert(items.end(), ec.negatives.begin(), ec.negatives.end());
    cats.clear();
    for (std::uint32_t item : items) cats.push_back(data.item_cat[item]);
    probs.assign(items.size(), 0.0);

    const auto it = by_device.find(ec.user);
    if (it != by_device.end() && basis != nullptr) {
      const auto generated =
          generate_patches(cfg.model, *basis, it->second->theta);
      Scorer patched(backbone, data.profiles, generated, cfg.gate);
      patched.score_candidates(ec.user, h.items, h.cats, items, cats, probs);
    } else {
      bare.score_candidates(ec.user, h.items, h.cats, items, cats, probs);
    }

    cases.push_back(rank_case(ec.user, probs[0],
                              std::span<const double>(probs).subspan(1)));
    UserScores us;
    us.user = ec.user;
    us.pos.assign(1, probs[0]);
    us.neg.assign(probs.begin() + 1, probs.end());
    scores.push_back(std::move(us));
    users.push_back(ec.user);
    counts.push_back(splits.train_events[ec.user]);
  }
  if (cases.empty())
    throw std::runtime_error("evaluate_model: no evaluation cases");

  EvalReport rep;
  rep.hit1 = hit_rate_at_k(cases, 1);
  rep.hit5 = hit_rate_at_k(cases, 5);
  rep.hit10 = hit_rate_at_k(cases, 10);
  rep.ndcg5 = ndcg_at_k(cases, 5, cfg.ndcg);
  rep.ndcg10 = ndcg_at_k(cases, 10, cfg.ndcg);
  const MacroAucResult auc = macro_auc(scores);
  rep.auc = auc.value;
  const GroupPartition part = group_users(users, counts, 20);
  rep.group_auc = group_means(auc.per_user, part);
  rep.n_cases = cases.size();
  return rep;
}

RunResult run_lifecycle(const RunConfig& user_cfg, std::size_t max_stages) {
  RunConfig cfg = user_cfg;
  finalize_run_config(cfg);
  cfg.validate();
  if (cfg.out_dir.empty())
    throw std::runtime_error("config: out (output directory) is required");
  Driver driver(std::move(cfg));
  return driver.run(max_stages);
}

// ---- Experiments ---------------------------------------------------------------

namespace {

void require_finished(const RunResult& r, const std::string& name) {
  if (r.status == RunStatus::kAbortedNan)
    throw std::runtime_error("experiment run '" + name + "' aborted at " +
                             r.failed_stage);
  if (r.status != RunStatus::kFinished)
    throw std::runtime_error("experiment run '" + name + "' did not finish");
}

fs::path run_variant(RunConfig cfg, const fs::path& out_root,
                     const std::string& sub) {
  cfg.out_dir = out_root / sub;
  require_finished(run_lifecycle(cfg), sub);
  return cfg.out_dir;
}

void metric_table(const fs::path& out,
                  const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << "method,hit1,hit5,hit10,ndcg5,ndcg10,auc\n";
  for (const auto& [name, r] : rows) {
    os << name;
    for (double v : {r.hit1, r.hit5, r.hit10, r.ndcg5, r.ndcg10, r.auc})
      os << ',' << g17(v);
    os << '\n';
  }
  write_text_atomic(out, os.str());
}

EvalReport variant_eval(const fs::path& dir, const std::string& name) {
  return load_eval(Paths(dir).eval_json(name));
}

}  // namespace

fs::path run_experiment(const std::string& recipe, const RunConfig& base,
                        const fs::path& out_root) {
  fs::create_directories(out_root);
  const std::string round_tag = "round" + std::to_string(std::max<std::size_t>(
                                              1, base.rounds));

  if (recipe == "rq1") {
    RunConfig c = base;
    c.rounds = std::max<std::size_t>(1, base.rounds);
    c.mode = RunMode::kBaselineIncremental;
    const fs::path inc = run_variant(c, out_root, "baseline");
    c.mode = RunMode::kDcclFull;
    const fs::path dccl = run_variant(c, out_root, "dccl");
    const fs::path out = out_root / "rq1_summary.csv";
    metric_table(out, {{"pretrain", variant_eval(dccl, "pretrain")},
                       {"incremental", variant_eval(inc, round_tag)},
                       {"dccl_e", variant_eval(dccl, round_tag + "_e")},
                       {"dccl_m", variant_eval(dccl, round_tag + "_m")}});
    return out;
  }

  if (recipe == "rq2") {
    RunConfig c = base;
    c.rounds = 1;
    c.mode = RunMode::kDcclEOnly;
    const fs::path dir = run_variant(c, out_root, "dccl_e");
    const EvalReport pre = variant_eval(dir, "pretrain");
    const EvalReport e = variant_eval(dir, "round1_e");
    std::ostringstream os;
    os << "method,group,macro_auc\n";
    for (std::size_t g = 0; g < pre.group_auc.size(); ++g)
      os << "pretrain," << (g + 1) << ',' << g17(pre.group_auc[g]) << '\n';
    for (std::size_t g = 0; g < e.group_auc.size(); ++g)
      os << "dccl_e," << (g + 1) << ',' << g17(e.group_auc[g]) << '\n';
    const fs::path out = out_root / "rq2_groups.csv";
    write_text_atomic(out, os.str());
    return out;
  }

  if (recipe == "rq3") {
    if (base.split.n_slices % 10 != 0)
      throw std::runtime_error(
          "rq3 needs split.slices divisible by 10 for an equal data budget");
    struct Interval {
      const char* name;
      std::size_t spr;
    };
    const Interval intervals[] = {{"short", 1}, {"medium", 2}, {"long", 5}};
    std::ostringstream os;
    os << "interval,round,slices_consumed,hit10_e,auc_e,hit10_m,auc_m\n";
    for (const Interval& iv : intervals) {
      RunConfig c = base;
      c.mode = RunMode::kDcclFull;
      c.slices_per_round = iv.spr;
      c.rounds = base.split.n_slices / iv.spr;
      const fs::path dir = run_variant(c, out_root, iv.name);
      for (std::size_t t = 1; t <= c.rounds; ++t) {
        const EvalReport e =
            variant_eval(dir, "round" + std::to_string(t) + "_e");
        const EvalReport m =
            variant_eval(dir, "round" + std::to_string(t) + "_m");
        os << iv.name << ',' << t << ',' << t * iv.spr << ',' << g17(e.hit10)
           << ',' << g17(e.auc) << ',' << g17(m.hit10) << ',' << g17(m.auc)
           << '\n';
      }
    }
    const fs::path out = out_root / "rq3_trace.csv";
    write_text_atomic(out, os.str());
    return out;
  }

  if (recipe == "junction-ablation") {
    std::ostringstream os;
    os << "junction,gate,hit10,ndcg10,auc\n";
    for (std::size_t j = 0; j < 3; ++j) {
      RunConfig c = base;
      c.rounds = 1;
      c.mode = RunMode::kDcclEOnly;
      c.gate = PatchGate::all_off();
      c.gate.on[j] = true;
      const fs::path dir =
          run_variant(c, out_root, "junction" + std::to_string(j + 1));
      const EvalReport e = variant_eval(dir, "round1_e");
      os << (j + 1) << ',' << gate_str(c.gate) << ',' << g17(e.hit10) << ','
         << g17(e.ndcg10) << ',' << g17(e.auc) << '\n';
    }
    const fs::path out = out_root / "junction_summary.csv";
    write_text_atomic(out, os.str());
    return out;
  }

  if (recipe == "one-round-ablation") {
    RunConfig c = base;
    c.rounds = 1;
    c.mode = RunMode::kBaselineIncremental;
    const fs::path inc = run_variant(c, out_root, "baseline");
    c.mode = RunMode::kDcclFull;
    const fs::path dccl = run_variant(c, out_root, "dccl");
    const fs::path out = out_root / "one_round_summary.csv";
    metric_table(out, {{"pretrain", variant_eval(dccl, "pretrain")},
                       {"incremental", variant_eval(inc, "round1")},
                       {"dccl_e", variant_eval(dccl, "round1_e")},
                       {"dccl_m", variant_eval(dccl, "round1_m")}});
    return out;
  }

  throw std::runtime_error("unknown experiment recipe '" + recipe + "'");
}

// ---- Patch-table export ----------------------------------------------------------

std::size_t export_metapatch_table(const fs::path& run_dir,
                                   const fs::path& out_csv) {
  const Paths paths(run_dir);
  RunConfig cfg = parse_run_config(paths.echo());
  finalize_run_config(cfg);
  const Dataset data = load_run_dataset(cfg);
  apply_data_dims(cfg.model, data);
  const Splits splits = build_splits(data, cfg.split);

  long last = -1;
  for (std::size_t t = cfg.rounds; t >= 1; --t) {
    if (fs::exists(paths.devices_ck(t))) {
      last = static_cast<long>(t);
      break;
    }
  }
  if (last < 1)
    throw std::runtime_error("export: no completed device round under " +
                             run_dir.string());
  const std::size_t t_last = static_cast<std::size_t>(last);

  const NamedTensors nts = read_checkpoint(paths.devices_ck(t_last));
  const Tensor& theta = find_tensor(nts, "theta");
  if (theta.rank() != 2 || theta.rows() != data.n_users ||
      theta.cols() != cfg.k_hat)
    throw std::runtime_error("export: device checkpoint shape mismatch");

  // Category counts over the events each device trained on; devices that
  // never saw collaborative-phase data fall back to their pre-test history.
  std::vector<std::vector<std::size_t>> cat_counts(
      data.n_users, std::vector<std::size_t>(data.n_cats, 0));
  std::vector<bool> any(data.n_users, false);
  const std::size_t consumed = t_last * cfg.slices_per_round;
  for (std::size_t i = 0; i < consumed; ++i) {
    for (const TrainPos& p : splits.slices[i]) {
      ++cat_counts[p.user][data.events[p.user].cats[p.index]];
      any[p.user] = true;
    }
  }
  std::ostringstream os;
  os << "device_id,category";
  for (std::size_t j = 0; j < cfg.k_hat; ++j) os << ",theta_" << j;
  os << '\n';
  for (std::size_t u = 0; u < data.n_users; ++u) {
    if (!any[u]) {
      const auto& cats = data.events[u].cats;
      const std::size_t n =
          cats.size() > 1 ? cats.size() - 1 : cats.size();  // skip the test event
      for (std::size_t i = 0; i < n; ++i) ++cat_counts[u][cats[i]];
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < data.n_cats; ++c)
      if (cat_counts[u][c] > cat_counts[u][best]) best = c;
    os << u << ',' << best;
    for (std::size_t j = 0; j < cfg.k_hat; ++j)
      os << ',' << g17(theta.at(u, j));
    os << '\n';
  }
  write_text_atomic(out_csv, os.str());
  return data.n_users;
}

}  // namespace dccl
