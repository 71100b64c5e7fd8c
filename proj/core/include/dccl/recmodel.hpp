#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dccl/tape.hpp"
#include "dccl/tensor.hpp"

namespace dccl {

// Attention-over-history CTR backbone. A candidate item is scored against a
// user's recent click history: candidate features query the history, the
// attention context joins user embedding, profile and candidate features,
// and a ReLU tower produces a click logit.

struct BackboneConfig {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_cats = 0;
  std::size_t user_dim = 8;
  std::size_t item_dim = 8;
  std::size_t cat_dim = 8;
  std::size_t profile_dim = 8;
  std::size_t attn_dim = 32;
  std::size_t tower1 = 64;
  std::size_t tower2 = 32;
  std::size_t tower3 = 32;
  std::array<std::size_t, 3> patch_bottleneck = {32, 16, 32};
  std::size_t max_history = 50;

  std::size_t cand_dim() const { return item_dim + cat_dim; }
  std::size_t tower_in() const {
    return user_dim + profile_dim + cand_dim() + attn_dim;
  }
  void validate() const;
};

struct BackboneParams {
  BackboneConfig cfg;
  Tensor emb_user;  // {n_users, user_dim}
  Tensor emb_item;  // {n_items, item_dim}
  Tensor emb_cat;   // {n_cats, cat_dim}
  Tensor attn_q;    // {attn_dim, cand_dim}
  Tensor attn_k;    // {attn_dim, cand_dim}
  Tensor attn_v;    // {attn_dim, cand_dim}
  Tensor fc1_w;     // {tower_in, tower1}
  Tensor fc1_b;     // {tower1}
  Tensor fc2_w;     // {tower1, tower2}
  Tensor fc2_b;     // {tower2}
  Tensor fc3_w;     // {tower2, tower3}
  Tensor fc3_b;     // {tower3}
  Tensor out_w;     // {tower3, 1}
  Tensor out_b;     // {1}

  static BackboneParams init(const BackboneConfig& cfg, std::uint64_t seed);
  static BackboneParams zeros(const BackboneConfig& cfg);

  // Canonical order; the index of a tensor here is its trainable slot.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

// Adapter insertion points, one after each tower activation.
enum class Junction : std::uint8_t { kTower1 = 0, kTower2 = 1, kTower3 = 2 };

struct PatchSite {
  Junction junction = Junction::kTower1;
  std::size_t width = 0;       // hidden state size at the junction
  std::size_t bottleneck = 0;  // adapter inner size
  // down (width x bottleneck) + b1 + up (bottleneck x width) + b2
  std::size_t param_count() const {
    return 2 * width * bottleneck + bottleneck + width;
  }
};

std::array<PatchSite, 3> patch_sites(const BackboneConfig& cfg);

struct PatchDims {
  std::array<std::size_t, 3> site{};
  std::size_t total = 0;
};

PatchDims patch_dims(const BackboneConfig& cfg);

// A realized adapter for one site, packed as a flat vector:
// [down row-major, b1, up row-major, b2].
struct GeneratedPatch {
  PatchSite site;
  Tensor flat;  // {site.param_count()}

  Tensor down() const;  // {width, bottleneck}
  Tensor b1() const;    // {bottleneck}
  Tensor up() const;    // {bottleneck, width}
  Tensor b2() const;    // {width}
  static Tensor flatten(const PatchSite& site, const Tensor& down,
                        const Tensor& b1, const Tensor& up, const Tensor& b2);
};

struct PatchGate {
  std::array<bool, 3> on{false, false, false};
  static PatchGate all_on() { return {{true, true, true}}; }
  static PatchGate all_off() { return {{false, false, false}}; }
  bool any() const { return on[0] || on[1] || on[2]; }
};

// One scoring request. History arrays must have equal length; the caller is
// responsible for truncating to the most recent cfg.max_history events.
// An empty history yields a zero attention context.
struct SampleRef {
  std::uint32_t user = 0;
  std::uint32_t item = 0;  // candidate
  std::uint32_t cat = 0;
  std::span<const std::uint32_t> hist_items;
  std::span<const std::uint32_t> hist_cats;
};

// ---- Tape graph construction -------------------------------------------

struct BackboneLeaves {
  NodeId emb_user, emb_item, emb_cat;
  NodeId attn_q, attn_k, attn_v;
  NodeId fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b, out_w, out_b;
};

// Binds the backbone tensors to the tape, as trainable slots 0..13 when
// `trainable`, else as constants.
BackboneLeaves bind_backbone(Tape& tape, const BackboneParams& params,
                             bool trainable);

struct PatchPieces {
  NodeId down, b1, up, b2;
};

// Per-site adapter pieces, shared by every sample on the tape.
struct PatchNodes {
  std::array<PatchPieces, 3> site{};
  PatchGate gate;
};

// Slices flat per-site patch vectors (nodes of shape {K_l}) into adapter
// pieces. Sites whose gate is off are skipped.
PatchNodes make_patch_nodes(Tape& tape, const BackboneConfig& cfg,
                            std::span<const NodeId> theta_nodes, PatchGate gate);

// Click logit for one sample, shape {1}. `patches` may be null for the bare
// backbone. `profile_leaf` is a leaf over the {n_users, profile_dim} table.
NodeId sample_logit_node(Tape& tape, const BackboneLeaves& leaves,
                         const BackboneConfig& cfg, const PatchNodes* patches,
                         const SampleRef& s, NodeId profile_leaf);

// ---- Fast inference path -------------------------------------------------

// Tape-free scoring. Mirrors the graph computation operation for operation,
// so both paths produce identical doubles. One Scorer per thread; methods
// reuse internal workspace buffers. The params, profile table and patches
// must outlive the Scorer.
class Scorer {
public:
  // `patches` is empty (bare backbone) or one GeneratedPatch per site.
  Scorer(const BackboneParams& params, const Tensor& profiles,
         std::span<const GeneratedPatch> patches = {},
         PatchGate gate = PatchGate::all_off());

  double logit(const SampleRef& s);
  double prob(const SampleRef& s);

  // Scores candidates sharing one history; history projections are reused.
  void score_candidates(std::uint32_t user,
                        std::span<const std::uint32_t> hist_items,
                        std::span<const std::uint32_t> hist_cats,
                        std::span<const std::uint32_t> items,
                        std::span<const std::uint32_t> cats,
                        std::span<double> out_probs);

private:
  void project_history(std::span<const std::uint32_t> hist_items,
                       std::span<const std::uint32_t> hist_cats);
  double candidate_logit(std::uint32_t user, std::uint32_t item,
                         std::uint32_t cat, std::size_t hist_len);
  void apply_patch(std::size_t site_idx, std::vector<double>& v);

  const BackboneParams& p_;
  const Tensor& profiles_;
  std::array<const GeneratedPatch*, 3> patch_{nullptr, nullptr, nullptr};
  PatchGate gate_;
  // workspace
  std::vector<double> feat_, k_, v_, cand_, q_, scores_, alpha_, ctx_, x_, h_,
      z_, t_, o_;
};

}  // namespace dccl
