#include "dccl/metapatch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dccl/mathutil.hpp"
#include "dccl/rng.hpp"
#include "dccl/tape.hpp"

namespace dccl {

void ParamBasis::validate(const BackboneConfig& cfg) const {
  const auto sites = patch_sites(cfg);
  if (theta.size() != sites.size())
    throw std::runtime_error("ParamBasis: expected " + std::to_string(sites.size()) +
                             " site matrices, have " + std::to_string(theta.size()));
  std::size_t total = 0;
  for (std::size_t l = 0; l < sites.size(); ++l) {
    if (theta[l].rank() != 2 || theta[l].rows() != sites[l].param_count())
      throw std::runtime_error("ParamBasis: site " + std::to_string(l) +
                               " has shape " + shape_str(theta[l].shape()) +
                               ", expected rows " +
                               std::to_string(sites[l].param_count()));
    if (theta[l].cols() != theta[0].cols())
      throw std::runtime_error("ParamBasis: inconsistent code width");
    if (!theta[l].all_finite())
      throw std::runtime_error("ParamBasis: non-finite entries at site " +
                               std::to_string(l));
    total += sites[l].param_count();
  }
  if (theta[0].cols() >= total)
    throw std::runtime_error(
        "ParamBasis: code width must stay far below the total patch size");
}

NamedTensors ParamBasis::named() const {
  NamedTensors out;
  for (std::size_t l = 0; l < theta.size(); ++l)
    out.emplace_back("basis_theta" + std::to_string(l + 1), theta[l]);
  return out;
}

ParamBasis ParamBasis::init(const BackboneConfig& cfg, std::size_t k_hat,
                            std::uint64_t seed) {
  if (k_hat == 0) throw std::invalid_argument("ParamBasis: k_hat must be positive");
  ParamBasis b;
  for (const PatchSite& site : patch_sites(cfg)) {
    Tensor t({site.param_count(), k_hat});
    auto rng = make_rng(seed, "basis_init", {b.theta.size()});
    std::normal_distribution<double> dist(0.0, 1e-3);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    b.theta.push_back(std::move(t));
  }
  b.validate(cfg);
  return b;
}

ParamBasis ParamBasis::zeros(const BackboneConfig& cfg, std::size_t k_hat) {
  if (k_hat == 0) throw std::invalid_argument("ParamBasis: k_hat must be positive");
  ParamBasis b;
  for (const PatchSite& site : patch_sites(cfg))
    b.theta.push_back(Tensor({site.param_count(), k_hat}));
  b.validate(cfg);
  return b;
}

std::array<GeneratedPatch, 3> generate_patches(const BackboneConfig& cfg,
                                               const ParamBasis& basis,
                                               const Tensor& theta_hat) {
  basis.validate(cfg);
  if (theta_hat.rank() != 1 || theta_hat.size() != basis.k_hat())
    throw std::invalid_argument("generate_patches: code has shape " +
                                shape_str(theta_hat.shape()) + ", expected (" +
                                std::to_string(basis.k_hat()) + ")");
  const auto sites = patch_sites(cfg);
  std::array<GeneratedPatch, 3> out;
  for (std::size_t l = 0; l < sites.size(); ++l) {
    Tensor flat({sites[l].param_count()});
    const Tensor& th = basis.theta[l];
    const std::size_t k = th.cols();
    // same accumulation order as the tape's matrix-vector product
    for (std::size_t i = 0; i < flat.size(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += th[i * k + j] * theta_hat[j];
      flat[i] = acc;
    }
    out[l] = GeneratedPatch{sites[l], std::move(flat)};
  }
  return out;
}

void write_patch_table(const std::filesystem::path& path,
                       std::span<const MetaPatchVector> rows) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os)
      throw std::runtime_error("write_patch_table: cannot open " + tmp.string());
    const std::size_t k = rows.empty() ? 0 : rows.front().theta.size();
    os << "device_id";
    for (std::size_t j = 0; j < k; ++j) os << ",theta_" << j;
    os << '\n';
    char buf[40];
    for (const MetaPatchVector& row : rows) {
      if (row.theta.size() != k)
        throw std::runtime_error("write_patch_table: ragged code widths");
      os << row.device;
      for (std::size_t j = 0; j < k; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", row.theta[j]);
        os << ',' << buf;
      }
      os << '\n';
    }
    if (!os) throw std::runtime_error("write_patch_table: write failed");
  }
  std::filesystem::rename(tmp, path);
}

namespace {

// std::stod refuses subnormals (ERANGE); parse without the range check so
// every double the writer can emit reads back.
double parse_double(const std::string& s) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || end != begin + s.size())
    throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

}  // namespace

std::vector<MetaPatchVector> read_patch_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_patch_table: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("read_patch_table: empty file " + path.string());
  std::size_t k = 0;
  bool has_category = false;
  {
    std::stringstream hs(line);
    std::string col;
    if (!std::getline(hs, col, ',') || col != "device_id")
      throw std::runtime_error("read_patch_table: bad header in " + path.string());
    bool first = true;
    while (std::getline(hs, col, ',')) {
      if (first && col == "category") {
        has_category = true;  // annotated export variant; the column is skipped
        first = false;
        continue;
      }
      first = false;
      if (col != "theta_" + std::to_string(k))
        throw std::runtime_error("read_patch_table: bad header column '" + col + "'");
      ++k;
    }
  }
  std::vector<MetaPatchVector> rows;
  std::size_t ln = 1;
  while (std::getline(is, line)) {
    ++ln;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string field;
    MetaPatchVector row;
    row.theta = Tensor({k});
    try {
      if (!std::getline(ls, field, ',')) throw std::invalid_argument(line);
      row.device = static_cast<std::uint32_t>(std::stoul(field));
      if (has_category) {
        if (!std::getline(ls, field, ',')) throw std::invalid_argument(line);
        (void)std::stoul(field);
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (!std::getline(ls, field, ',')) throw std::invalid_argument(line);
        row.theta[j] = parse_double(field);
      }
      if (std::getline(ls, field, ',')) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw std::runtime_error("read_patch_table: malformed row at " +
                               path.filename().string() + ":" + std::to_string(ln));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

DeviceState make_device(std::uint32_t device, std::size_t k_hat) {
  DeviceState dev;
  dev.device = device;
  dev.theta_hat = Tensor({k_hat});
  return dev;
}

MetaPatchVector export_patch_row(const DeviceState& dev) {
  return MetaPatchVector{dev.device, dev.theta_hat};
}

namespace {

// Mean pointwise cross-entropy of the patched model over a sample set,
// through the tape-free scorer.
double patched_logloss(const Dataset& data, std::span<const TrainSample> samples,
                       const BackboneParams& backbone, const BackboneConfig& cfg,
                       const std::array<GeneratedPatch, 3>& patches) {
  Scorer scorer(backbone, data.profiles, patches, PatchGate::all_on());
  double sum = 0.0;
  for (const TrainSample& s : samples) {
    HistoryView h = history_for(data, s.user, s.hist_end, cfg.max_history);
    const double z =
        scorer.logit(SampleRef{s.user, s.item, s.cat, h.items, h.cats});
    sum += softplus_scalar(z) - z * static_cast<double>(s.label);
  }
  return samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
}

}  // namespace

PersonalizeStats personalize(DeviceState& dev, const Dataset& data,
                             std::span<const TrainPos> buffer,
                             const BackboneParams& backbone,
                             const BackboneConfig& cfg, const ParamBasis& basis,
                             const LocalTrainConfig& tcfg, std::uint64_t seed,
                             std::uint64_t round) {
  basis.validate(cfg);
  if (dev.theta_hat.rank() != 1 || dev.theta_hat.size() != basis.k_hat())
    throw std::invalid_argument("personalize: device code width " +
                                std::to_string(dev.theta_hat.size()) +
                                " does not match basis " +
                                std::to_string(basis.k_hat()));
  if (tcfg.batch == 0 || tcfg.epochs == 0)
    throw std::invalid_argument("personalize: batch and epochs must be positive");
  for (const TrainPos& p : buffer)
    if (p.user != dev.device)
      throw std::invalid_argument("personalize: buffer position for user " +
                                  std::to_string(p.user) + " on device " +
                                  std::to_string(dev.device));

  PersonalizeStats stats;
  if (buffer.empty()) {
    stats.skipped_empty = true;
    return stats;
  }

  auto samples = materialize(data, buffer, tcfg.negatives,
                             derive_seed(seed, "device_negs", {dev.device, round}));
  stats.initial_loss =
      patched_logloss(data, samples, backbone, cfg,
                      generate_patches(cfg, basis, dev.theta_hat));

  // snapshot for the non-finite-loss escape hatch
  const Tensor theta_backup = dev.theta_hat;
  if (!dev.adam) {
    AdamConfig acfg;
    acfg.lr = tcfg.lr;
    const Tensor* ptr = &dev.theta_hat;
    dev.adam = std::make_unique<AdamState>(acfg, std::span(&ptr, 1));
  }
  const std::vector<Tensor> adam_m = dev.adam->m();
  const std::vector<Tensor> adam_v = dev.adam->v();
  const std::uint64_t adam_t = dev.adam->steps();
  auto revert = [&] {
    dev.theta_hat = theta_backup;
    dev.adam->m() = adam_m;
    dev.adam->v() = adam_v;
    dev.adam->set_steps(adam_t);
    stats.reverted_nan = true;
    stats.final_loss = stats.initial_loss;
  };

  Tape tape;
  GradMap grads;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    auto rng = make_rng(seed, "device_order", {dev.device, round, epoch});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < order.size(); at += tcfg.batch) {
      const std::size_t end = std::min(order.size(), at + tcfg.batch);
      tape.reset();
      const BackboneLeaves leaves = bind_backbone(tape, backbone, false);
      const NodeId profile_leaf = tape.leaf(data.profiles);
      const NodeId theta_node = tape.param(dev.theta_hat, 0);
      std::array<NodeId, 3> flat_nodes;
      for (std::size_t l = 0; l < basis.theta.size(); ++l)
        flat_nodes[l] = tape.matmul(tape.leaf(basis.theta[l]), theta_node);
      const PatchNodes patches =
          make_patch_nodes(tape, cfg, flat_nodes, PatchGate::all_on());

      std::vector<NodeId> logits;
      std::vector<double> labels;
      logits.reserve(end - at);
      labels.reserve(end - at);
      for (std::size_t i = at; i < end; ++i) {
        const TrainSample& s = samples[order[i]];
        HistoryView h = history_for(data, s.user, s.hist_end, cfg.max_history);
        logits.push_back(sample_logit_node(
            tape, leaves, cfg, &patches,
            SampleRef{s.user, s.item, s.cat, h.items, h.cats}, profile_leaf));
        labels.push_back(static_cast<double>(s.label));
      }
      const NodeId ce = tape.sigmoid_ce(tape.concat(logits), std::move(labels));
      const NodeId loss = tape.reduce_mean(ce);
      const double batch_loss = tape.value(loss)[0];
      if (!std::isfinite(batch_loss)) {
        revert();
        return stats;
      }
      grads.clear();
      tape.backward(loss, grads);
      Tensor* theta_ptr = &dev.theta_hat;
      dev.adam->step(std::span(&theta_ptr, 1), grads);
      if (!dev.theta_hat.all_finite()) {
        revert();
        return stats;
      }
      ++dev.steps;
      ++stats.steps;
      stats.step_losses.push_back(batch_loss);
    }
  }

  stats.final_loss =
      patched_logloss(data, samples, backbone, cfg,
                      generate_patches(cfg, basis, dev.theta_hat));
  ++dev.rounds_trained;
  return stats;
}

}  // namespace dccl
