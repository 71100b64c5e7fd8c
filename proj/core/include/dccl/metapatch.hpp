#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "dccl/adam.hpp"
#include "dccl/checkpoint.hpp"
#include "dccl/datahub.hpp"
#include "dccl/recmodel.hpp"

namespace dccl {

// The globally shared parameter basis: one K_l x k_hat matrix per junction.
// Patch parameters are never trained directly; they are generated as
// theta_l = Theta_l * theta_hat from a per-device code of length k_hat,
// with k_hat far below the total patch parameter count.
struct ParamBasis {
  std::vector<Tensor> theta;

  std::size_t k_hat() const { return theta.empty() ? 0 : theta[0].cols(); }
  void validate(const BackboneConfig& cfg) const;
  NamedTensors named() const;

  static ParamBasis init(const BackboneConfig& cfg, std::size_t k_hat,
                         std::uint64_t seed);
  static ParamBasis zeros(const BackboneConfig& cfg, std::size_t k_hat);
};

std::array<GeneratedPatch, 3> generate_patches(const BackboneConfig& cfg,
                                               const ParamBasis& basis,
                                               const Tensor& theta_hat);

// One row of the device -> cloud recycle table.
struct MetaPatchVector {
  std::uint32_t device = 0;
  Tensor theta;  // {k_hat}
};

// CSV with header `device_id,theta_0,...,theta_{k-1}`; values are printed
// with enough digits to round-trip doubles exactly. The reader also accepts
// an annotated variant with a `category` column right after `device_id`
// (the export table), which it skips.
void write_patch_table(const std::filesystem::path& path,
                       std::span<const MetaPatchVector> rows);
std::vector<MetaPatchVector> read_patch_table(const std::filesystem::path& path);

// Device-side state. The device id doubles as the user id; the only
// trainable tensor is theta_hat. Optimizer state persists across rounds.
struct DeviceState {
  std::uint32_t device = 0;
  Tensor theta_hat;
  std::unique_ptr<AdamState> adam;
  std::uint64_t rounds_trained = 0;
  std::uint64_t steps = 0;
};

DeviceState make_device(std::uint32_t device, std::size_t k_hat);
MetaPatchVector export_patch_row(const DeviceState& dev);

struct LocalTrainConfig {
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t epochs = 1;
  std::size_t negatives = 4;  // per positive
};

struct PersonalizeStats {
  std::size_t steps = 0;
  double initial_loss = 0.0;  // mean cross-entropy before / after the round
  double final_loss = 0.0;
  std::vector<double> step_losses;
  bool skipped_empty = false;
  bool reverted_nan = false;
};

// Trains theta_hat by Adam on the pointwise cross-entropy of the patched
// model over the device's own positions (negatives sampled per config).
// The backbone and basis are read-only. A non-finite loss reverts theta_hat
// and the optimizer to their pre-round state and reports instead of
// throwing, so one broken device cannot stall a simulation.
PersonalizeStats personalize(DeviceState& dev, const Dataset& data,
                             std::span<const TrainPos> buffer,
                             const BackboneParams& backbone,
                             const BackboneConfig& cfg, const ParamBasis& basis,
                             const LocalTrainConfig& tcfg, std::uint64_t seed,
                             std::uint64_t round);

}  // namespace dccl
