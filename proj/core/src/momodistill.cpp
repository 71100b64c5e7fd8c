#include "dccl/momodistill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "dccl/mathutil.hpp"
#include "dccl/rng.hpp"
#include "dccl/tape.hpp"

namespace dccl {

double kl_bernoulli(double p_teacher, double q_student) {
  constexpr double eps = 1e-7;
  const double p = std::clamp(p_teacher, eps, 1.0 - eps);
  const double q = std::clamp(q_student, eps, 1.0 - eps);
  return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

void AuxEncoderParams::validate(std::size_t k_hat, std::size_t profile_dim) const {
  auto want = [&](const Tensor& t, std::size_t r, std::size_t c, const char* name) {
    if (t.rank() != 2 || t.rows() != r || t.cols() != c)
      throw std::runtime_error(std::string("AuxEncoderParams: ") + name +
                               " has shape " + shape_str(t.shape()) +
                               ", expected (" + std::to_string(r) + "," +
                               std::to_string(c) + ")");
    if (!t.all_finite())
      throw std::runtime_error(std::string("AuxEncoderParams: ") + name +
                               " has non-finite entries");
  };
  want(w1, k_hat, k_hat, "w1");
  want(w2, k_hat, k_hat, "w2");
  want(w3, k_hat, profile_dim, "w3");
}

NamedTensors AuxEncoderParams::named() const {
  return {{"enc_w1", w1}, {"enc_w2", w2}, {"enc_w3", w3}};
}

std::vector<Tensor*> AuxEncoderParams::tensors() { return {&w1, &w2, &w3}; }

std::vector<const Tensor*> AuxEncoderParams::tensors() const {
  return {&w1, &w2, &w3};
}

AuxEncoderParams AuxEncoderParams::init(std::size_t k_hat,
                                        std::size_t profile_dim,
                                        std::uint64_t seed) {
  AuxEncoderParams enc = zeros(k_hat, profile_dim);
  auto glorot = [&](Tensor& t, std::uint64_t slot) {
    auto rng = make_rng(seed, "encoder_init", {slot});
    std::normal_distribution<double> dist(
        0.0, std::sqrt(2.0 / static_cast<double>(t.rows() + t.cols())));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  };
  // w1 stays zero: the encoder starts as the identity-silent map
  glorot(enc.w2, 1);
  glorot(enc.w3, 2);
  return enc;
}

AuxEncoderParams AuxEncoderParams::zeros(std::size_t k_hat,
                                         std::size_t profile_dim) {
  if (k_hat == 0 || profile_dim == 0)
    throw std::invalid_argument("AuxEncoderParams: zero dimension");
  AuxEncoderParams enc;
  enc.w1 = Tensor({k_hat, k_hat});
  enc.w2 = Tensor({k_hat, k_hat});
  enc.w3 = Tensor({k_hat, profile_dim});
  return enc;
}

Tensor encode(const AuxEncoderParams& enc, const Tensor& theta_hat,
              const Tensor& profile_row) {
  const std::size_t k = enc.w1.rows();
  const std::size_t d = enc.w3.cols();
  enc.validate(k, d);
  if (theta_hat.rank() != 1 || theta_hat.size() != k)
    throw std::invalid_argument("encode: code has shape " +
                                shape_str(theta_hat.shape()));
  if (profile_row.rank() != 1 || profile_row.size() != d)
    throw std::invalid_argument("encode: profile has shape " +
                                shape_str(profile_row.shape()));
  Tensor hidden({k});
  for (std::size_t i = 0; i < k; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += enc.w2[i * k + j] * theta_hat[j];
    for (std::size_t j = 0; j < d; ++j) acc += enc.w3[i * d + j] * profile_row[j];
    hidden[i] = std::tanh(acc);
  }
  Tensor out({k});
  for (std::size_t i = 0; i < k; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += enc.w1[i * k + j] * hidden[j];
    out[i] = acc;
  }
  return out;
}

const Tensor& TeacherBundle::code_for(std::uint32_t device, bool& fallback) const {
  auto it = theta.find(device);
  fallback = it == theta.end();
  return fallback ? zero_code : it->second;
}

TeacherBundle make_teacher_bundle(const BackboneParams& backbone,
                                  const ParamBasis& basis,
                                  std::span<const MetaPatchVector> rows) {
  TeacherBundle tb;
  tb.backbone = backbone;
  tb.basis = basis;
  tb.zero_code = Tensor({basis.k_hat()});
  for (const MetaPatchVector& row : rows) {
    if (row.theta.rank() != 1 || row.theta.size() != basis.k_hat())
      throw std::invalid_argument(
          "make_teacher_bundle: code width mismatch for device " +
          std::to_string(row.device));
    tb.theta[row.device] = row.theta;
  }
  return tb;
}

void write_loss_trace(const std::filesystem::path& path,
                      std::span<const EpochTrace> epochs) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os)
      throw std::runtime_error("write_loss_trace: cannot open " + tmp.string());
    os << "epoch,ce,kl,total\n";
    char buf[40];
    for (const EpochTrace& e : epochs) {
      os << e.epoch;
      for (double v : {e.ce, e.kl, e.total}) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ',' << buf;
      }
      os << '\n';
    }
    if (!os) throw std::runtime_error("write_loss_trace: write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<EpochTrace> read_loss_trace(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("read_loss_trace: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "epoch,ce,kl,total")
    throw std::runtime_error("read_loss_trace: bad header in " + path.string());
  std::vector<EpochTrace> epochs;
  std::size_t ln = 1;
  while (std::getline(is, line)) {
    ++ln;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string field;
    EpochTrace e;
    try {
      if (!std::getline(ls, field, ',')) throw std::invalid_argument(line);
      e.epoch = std::stoul(field);
      double* slots[3] = {&e.ce, &e.kl, &e.total};
      for (double* slot : slots) {
        if (!std::getline(ls, field, ',')) throw std::invalid_argument(line);
        char* end = nullptr;
        *slot = std::strtod(field.c_str(), &end);
        if (end != field.c_str() + field.size()) throw std::invalid_argument(line);
      }
      if (std::getline(ls, field, ',')) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw std::runtime_error("read_loss_trace: malformed row at " +
                               path.filename().string() + ":" + std::to_string(ln));
    }
    epochs.push_back(e);
  }
  return epochs;
}

namespace {

// Teacher probabilities for a materialized sample list, one patched scorer
// per device (samples arrive grouped by user, so each device's snapshot
// model is assembled exactly once).
std::vector<double> teacher_probs(const TeacherBundle& tb, const Dataset& data,
                                  const BackboneConfig& cfg,
                                  std::span<const TrainSample> samples,
                                  std::size_t& fallbacks) {
  std::vector<double> probs(samples.size());
  std::uint32_t current = UINT32_MAX;
  bool bare = true;
  std::array<GeneratedPatch, 3> patches;
  std::optional<Scorer> scorer;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const TrainSample& s = samples[i];
    if (s.user != current || !scorer) {
      current = s.user;
      bool fallback = false;
      const Tensor& code = tb.code_for(s.user, fallback);
      bare = fallback;
      scorer.reset();
      if (bare) {
        scorer.emplace(tb.backbone, data.profiles);
      } else {
        patches = generate_patches(cfg, tb.basis, code);
        scorer.emplace(tb.backbone, data.profiles, patches, PatchGate::all_on());
      }
    }
    if (bare) ++fallbacks;
    HistoryView h = history_for(data, s.user, s.hist_end, cfg.max_history);
    probs[i] = sigmoid_scalar(
        scorer->logit(SampleRef{s.user, s.item, s.cat, h.items, h.cats}));
  }
  return probs;
}

struct BatchGraph {
  NodeId ce = 0;                     // per-sample cross entropy, shape {B}
  NodeId kl = 0;                     // per-sample KL, shape {B}; 0 if absent
  bool has_kl = false;
  NodeId loss = 0;                   // scalar objective
};

BatchGraph batch_objective(Tape& tape, std::span<const NodeId> logits,
                           std::vector<double> labels,
                           const std::vector<double>* probs, double beta) {
  BatchGraph g;
  const NodeId z = tape.concat(logits);
  g.ce = tape.sigmoid_ce(z, std::move(labels));
  if (probs && beta > 0.0) {
    g.kl = tape.bernoulli_kl(z, *probs);
    g.has_kl = true;
    g.loss = tape.reduce_mean(tape.add(g.ce, tape.scale(g.kl, beta)));
  } else {
    g.loss = tape.reduce_mean(g.ce);
  }
  return g;
}

// Shared cloud loop over the backbone. When `teachers` is null the loss is
// plain cross-entropy (the incremental arm); the graphs are otherwise
// identical, so beta = 0 distillation walks the exact same trajectory.
TrainReport train_backbone_loop(BackboneParams& backbone,
                                const TeacherBundle* teachers,
                                const Dataset& data,
                                std::span<const TrainPos> positions,
                                const BackboneConfig& cfg,
                                const DistillConfig& dcfg, std::uint64_t seed,
                                std::uint64_t round) {
  if (positions.empty())
    throw std::invalid_argument("cloud training: no positions");
  if (dcfg.batch == 0 || dcfg.epochs == 0)
    throw std::invalid_argument("cloud training: batch and epochs must be positive");
  if (dcfg.beta < 0.0)
    throw std::invalid_argument("cloud training: beta must be nonnegative");

  TrainReport report;
  auto samples = materialize(data, positions, dcfg.negatives,
                             derive_seed(seed, "cloud_negs", {round}));
  std::vector<double> probs;
  if (teachers && dcfg.beta > 0.0)
    probs = teacher_probs(*teachers, data, cfg, samples,
                          report.teacher_fallbacks);

  const BackboneParams entry = backbone;
  AdamConfig acfg;
  acfg.lr = dcfg.lr;
  auto param_ptrs = backbone.tensors();
  AdamState adam(acfg, std::span<const Tensor* const>(
                           const_cast<const Tensor**>(param_ptrs.data()),
                           param_ptrs.size()));

  Tape tape;
  GradMap grads;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < dcfg.epochs; ++epoch) {
    auto rng = make_rng(seed, "cloud_order", {round, epoch});
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0.0, kl_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += dcfg.batch) {
      const std::size_t end = std::min(order.size(), at + dcfg.batch);
      tape.reset();
      const BackboneLeaves leaves = bind_backbone(tape, backbone, true);
      const NodeId profile_leaf = tape.leaf(data.profiles);
      std::vector<NodeId> logits;
      std::vector<double> labels;
      std::vector<double> batch_probs;
      logits.reserve(end - at);
      labels.reserve(end - at);
      for (std::size_t i = at; i < end; ++i) {
        const TrainSample& s = samples[order[i]];
        HistoryView h = history_for(data, s.user, s.hist_end, cfg.max_history);
        logits.push_back(sample_logit_node(
            tape, leaves, cfg, nullptr,
            SampleRef{s.user, s.item, s.cat, h.items, h.cats}, profile_leaf));
        labels.push_back(static_cast<double>(s.label));
        if (!probs.empty()) batch_probs.push_back(probs[order[i]]);
      }
      BatchGraph g = batch_objective(tape, logits, std::move(labels),
                                     probs.empty() ? nullptr : &batch_probs,
                                     dcfg.beta);
      const double batch_loss = tape.value(g.loss)[0];
      if (!std::isfinite(batch_loss)) {
        backbone = entry;
        report.aborted_nan = true;
        return report;
      }
      for (double v : tape.value(g.ce).values()) ce_sum += v;
      if (g.has_kl)
        for (double v : tape.value(g.kl).values()) kl_sum += v;
      grads.clear();
      tape.backward(g.loss, grads);
      adam.step(param_ptrs, grads);
      ++report.steps;
    }
    const double n = static_cast<double>(samples.size());
    report.epochs.push_back(EpochTrace{epoch, ce_sum / n, kl_sum / n,
                                       ce_sum / n + dcfg.beta * kl_sum / n});
  }
  return report;
}

}  // namespace

TrainReport incremental_train(BackboneParams& backbone, const Dataset& data,
                              std::span<const TrainPos> positions,
                              const BackboneConfig& cfg,
                              const DistillConfig& dcfg, std::uint64_t seed,
                              std::uint64_t round) {
  return train_backbone_loop(backbone, nullptr, data, positions, cfg, dcfg,
                             seed, round);
}

TrainReport distill_backbone(BackboneParams& backbone,
                             const TeacherBundle& teachers, const Dataset& data,
                             std::span<const TrainPos> positions,
                             const BackboneConfig& cfg,
                             const DistillConfig& dcfg, std::uint64_t seed,
                             std::uint64_t round) {
  return train_backbone_loop(backbone, &teachers, data, positions, cfg, dcfg,
                             seed, round);
}

TrainReport distill_basis(ParamBasis& basis, AuxEncoderParams& enc,
                          const BackboneParams& backbone,
                          const TeacherBundle& teachers, const Dataset& data,
                          std::span<const TrainPos> positions,
                          const BackboneConfig& cfg, const DistillConfig& dcfg,
                          std::uint64_t seed, std::uint64_t round) {
  basis.validate(cfg);
  enc.validate(basis.k_hat(), cfg.profile_dim);
  if (positions.empty())
    throw std::invalid_argument("distill_basis: no positions");
  if (dcfg.batch == 0 || dcfg.epochs == 0)
    throw std::invalid_argument("distill_basis: batch and epochs must be positive");
  if (dcfg.beta < 0.0)
    throw std::invalid_argument("distill_basis: beta must be nonnegative");
  if (data.profile_dim != cfg.profile_dim)
    throw std::invalid_argument("distill_basis: profile width mismatch");

  TrainReport report;
  auto samples = materialize(data, positions, dcfg.negatives,
                             derive_seed(seed, "cloud_negs", {round}));
  std::vector<double> probs;
  if (dcfg.beta > 0.0)
    probs = teacher_probs(teachers, data, cfg, samples,
                          report.teacher_fallbacks);

  const ParamBasis basis_entry = basis;
  const AuxEncoderParams enc_entry = enc;
  std::vector<Tensor*> param_ptrs = {&basis.theta[0], &basis.theta[1],
                                     &basis.theta[2], &enc.w1, &enc.w2,
                                     &enc.w3};
  AdamConfig acfg;
  acfg.lr = dcfg.lr;
  AdamState adam(acfg, std::span<const Tensor* const>(
                           const_cast<const Tensor**>(param_ptrs.data()),
                           param_ptrs.size()));

  Tape tape;
  GradMap grads;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < dcfg.epochs; ++epoch) {
    auto rng = make_rng(seed, "basis_order", {round, epoch});
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0.0, kl_sum = 0.0;
    for (std::size_t at = 0; at < order.size(); at += dcfg.batch) {
      const std::size_t end = std::min(order.size(), at + dcfg.batch);
      // group the batch by device so each proxy model is built once
      std::vector<std::size_t> batch(order.begin() + at, order.begin() + end);
      std::stable_sort(batch.begin(), batch.end(),
                       [&](std::size_t a, std::size_t b) {
                         return samples[a].user < samples[b].user;
                       });

      tape.reset();
      const BackboneLeaves leaves = bind_backbone(tape, backbone, false);
      const NodeId profile_leaf = tape.leaf(data.profiles);
      const NodeId w1 = tape.param(enc.w1, 3);
      const NodeId w2 = tape.param(enc.w2, 4);
      const NodeId w3 = tape.param(enc.w3, 5);
      std::array<NodeId, 3> basis_nodes = {tape.param(basis.theta[0], 0),
                                           tape.param(basis.theta[1], 1),
                                           tape.param(basis.theta[2], 2)};

      std::vector<NodeId> logits;
      std::vector<double> labels, batch_probs;
      std::uint32_t current = UINT32_MAX;
      PatchNodes patches;
      for (std::size_t idx : batch) {
        const TrainSample& s = samples[idx];
        if (s.user != current) {
          current = s.user;
          bool fallback = false;
          const Tensor& code = teachers.code_for(s.user, fallback);
          const NodeId theta_m = tape.leaf(code);
          const NodeId u_m = tape.reshape(
              tape.gather(profile_leaf, {static_cast<std::int64_t>(s.user)}),
              {cfg.profile_dim});
          const NodeId hidden = tape.tanh(
              tape.add(tape.matmul(w2, theta_m), tape.matmul(w3, u_m)));
          const NodeId proxy_code = tape.matmul(w1, hidden);
          std::array<NodeId, 3> flat;
          for (std::size_t l = 0; l < 3; ++l)
            flat[l] = tape.matmul(basis_nodes[l], proxy_code);
          patches = make_patch_nodes(tape, cfg, flat, PatchGate::all_on());
        }
        HistoryView h = history_for(data, s.user, s.hist_end, cfg.max_history);
        logits.push_back(sample_logit_node(
            tape, leaves, cfg, &patches,
            SampleRef{s.user, s.item, s.cat, h.items, h.cats}, profile_leaf));
        labels.push_back(static_cast<double>(s.label));
        if (!probs.empty()) batch_probs.push_back(probs[idx]);
      }
      BatchGraph g = batch_objective(tape, logits, std::move(labels),
                                     probs.empty() ? nullptr : &batch_probs,
                                     dcfg.beta);
      const double batch_loss = tape.value(g.loss)[0];
      if (!std::isfinite(batch_loss)) {
        basis = basis_entry;
        enc = enc_entry;
        report.aborted_nan = true;
        return report;
      }
      for (double v : tape.value(g.ce).values()) ce_sum += v;
      if (g.has_kl)
        for (double v : tape.value(g.kl).values()) kl_sum += v;
      grads.clear();
      tape.backward(g.loss, grads);
      adam.step(param_ptrs, grads);
      ++report.steps;
    }
    const double n = static_cast<double>(samples.size());
    report.epochs.push_back(EpochTrace{epoch, ce_sum / n, kl_sum / n,
                                       ce_sum / n + dcfg.beta * kl_sum / n});
  }
  return report;
}

TrainReport pretrain_basis(ParamBasis& basis, AuxEncoderParams& enc,
                           const BackboneParams& backbone, const Dataset& data,
                           std::span<const TrainPos> positions,
                           const BackboneConfig& cfg, const DistillConfig& dcfg,
                           std::uint64_t seed) {
  TeacherBundle tb;
  tb.backbone = backbone;
  tb.basis = basis;
  tb.zero_code = Tensor({basis.k_hat()});
  TrainReport report = distill_basis(basis, enc, backbone, tb, data, positions,
                                     cfg, dcfg, seed, 0);
  report.teacher_fallbacks = 0;  // the zero code is the intended teacher here
  return report;
}

}  // namespace dccl
