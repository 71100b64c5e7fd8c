#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "dccl/datahub.hpp"
#include "dccl/metapatch.hpp"
#include "dccl/recmodel.hpp"

namespace dccl {

// KL divergence between Bernoulli(p) and Bernoulli(q). Both probabilities
// are clamped to [1e-7, 1 - 1e-7] first, so the value is always finite.
double kl_bernoulli(double p_teacher, double q_student);

// The heterogeneity-absorbing encoder: U(theta_hat, u) =
// W1 * tanh(W2 * theta_hat + W3 * u). W1 starts at zero so the encoded code
// (and with it every generated proxy patch) starts exactly at zero.
struct AuxEncoderParams {
  Tensor w1;  // {k_hat, k_hat}
  Tensor w2;  // {k_hat, k_hat}
  Tensor w3;  // {k_hat, profile_dim}

  void validate(std::size_t k_hat, std::size_t profile_dim) const;
  NamedTensors named() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;

  static AuxEncoderParams init(std::size_t k_hat, std::size_t profile_dim,
                               std::uint64_t seed);
  static AuxEncoderParams zeros(std::size_t k_hat, std::size_t profile_dim);
};

Tensor encode(const AuxEncoderParams& enc, const Tensor& theta_hat,
              const Tensor& profile_row);

struct DistillConfig {
  double lr = 1e-3;
  double beta = 0.01;
  std::size_t batch = 256;
  std::size_t epochs = 1;
  std::size_t negatives = 4;  // per positive, as on device
};

// Frozen snapshot of the previous round's cloud state plus the recycled
// per-device codes. Devices missing from the table fall back to the zero
// code, i.e. the snapshot cloud model itself.
struct TeacherBundle {
  BackboneParams backbone;
  ParamBasis basis;
  std::unordered_map<std::uint32_t, Tensor> theta;
  Tensor zero_code;

  const Tensor& code_for(std::uint32_t device, bool& fallback) const;
};

TeacherBundle make_teacher_bundle(const BackboneParams& backbone,
                                  const ParamBasis& basis,
                                  std::span<const MetaPatchVector> rows);

struct EpochTrace {
  std::size_t epoch = 0;
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct TrainReport {
  std::vector<EpochTrace> epochs;
  std::size_t steps = 0;
  bool aborted_nan = false;           // parameters reverted to entry state
  std::size_t teacher_fallbacks = 0;  // samples served by the zero code
};

// loss_trace.csv: epoch,ce,kl,total. The round trip is bit exact.
void write_loss_trace(const std::filesystem::path& path,
                      std::span<const EpochTrace> epochs);
std::vector<EpochTrace> read_loss_trace(const std::filesystem::path& path);

// Conventional incremental training on new data alone: Adam on the
// pointwise cross-entropy, the model-over-data comparison arm.
TrainReport incremental_train(BackboneParams& backbone, const Dataset& data,
                              std::span<const TrainPos> positions,
                              const BackboneConfig& cfg,
                              const DistillConfig& dcfg, std::uint64_t seed,
                              std::uint64_t round);

// Model-over-models step 1: the backbone learns from data and from the
// recycled device models, minimizing CE + beta * KL(teacher || student).
// With beta = 0 the KL term is omitted and the trajectory is bit-identical
// to incremental_train under the same seed.
TrainReport distill_backbone(BackboneParams& backbone,
                             const TeacherBundle& teachers, const Dataset& data,
                             std::span<const TrainPos> positions,
                             const BackboneConfig& cfg,
                             const DistillConfig& dcfg, std::uint64_t seed,
                             std::uint64_t round);

// Step 2: with the fresh backbone fixed, the basis and encoder learn to
// reproduce the device teachers through encoded proxy codes.
TrainReport distill_basis(ParamBasis& basis, AuxEncoderParams& enc,
                          const BackboneParams& backbone,
                          const TeacherBundle& teachers, const Dataset& data,
                          std::span<const TrainPos> positions,
                          const BackboneConfig& cfg, const DistillConfig& dcfg,
                          std::uint64_t seed, std::uint64_t round);

// Lifecycle start: distill_basis with every device code zero, so the
// teacher is exactly the pretrained cloud model.
TrainReport pretrain_basis(ParamBasis& basis, AuxEncoderParams& enc,
                           const BackboneParams& backbone, const Dataset& data,
                           std::span<const TrainPos> positions,
                           const BackboneConfig& cfg, const DistillConfig& dcfg,
                           std::uint64_t seed);

}  // namespace dccl
