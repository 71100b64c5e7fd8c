#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dccl/tensor.hpp"

namespace dccl {

// Per-user event streams in chronological order, plus static user profiles
// and the item -> category map. Users, items and categories are dense ids.

struct UserEvents {
  std::vector<std::uint32_t> items;
  std::vector<std::uint32_t> cats;
  std::vector<std::int64_t> ts;
  std::size_t size() const { return items.size(); }
};

struct Dataset {
  std::vector<UserEvents> events;            // indexed by user
  Tensor profiles;                           // {n_users, profile_dim}
  std::vector<std::uint32_t> item_cat;       // {n_items}
  // gender / age-bucket / occupation indices per user; used when exporting
  // to the triple-file interchange layout. May be empty.
  std::vector<std::array<std::uint32_t, 3>> user_fields;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_cats = 0;
  std::size_t profile_dim = 8;

  std::size_t total_events() const;
  void validate() const;
};

std::unordered_set<std::uint32_t> user_item_set(const Dataset& data,
                                                std::uint32_t user);

// ---- Interchange ingestion ------------------------------------------------
// Reads the `::`-separated triple-file layout: ratings.dat (user::item::
// rating::timestamp), users.dat (user::gender::age::occupation::zip) and
// movies.dat (item::title::genres). Every rating is one positive event. User
// profiles are a fixed random projection of the categorical user fields.

struct IngestStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t cats = 0;
  std::size_t events = 0;
};

Dataset parse_movielens(const std::filesystem::path& dir, IngestStats* stats = nullptr);

// Writes a dataset back out in the same layout (round trip for tests and
// for generating interchange-format corpora from the synthesizer).
void write_movielens_format(const Dataset& data, const std::filesystem::path& dir);

// ---- Filtering -------------------------------------------------------------
// Repeatedly drops users/items with fewer events than the thresholds until
// both hold everywhere, then renumbers ids densely (ascending old id).

struct FilterReport {
  std::size_t users_removed = 0;
  std::size_t items_removed = 0;
  std::size_t cats_removed = 0;
  std::size_t events_removed = 0;
  std::size_t passes = 0;
};

FilterReport filter_min_interactions(Dataset& data, std::size_t min_user_events,
                                     std::size_t min_item_events);

inline FilterReport filter_min_interactions(Dataset& data, std::size_t threshold) {
  return filter_min_interactions(data, threshold, threshold);
}

// ---- Synthetic corpus ------------------------------------------------------
// Long-tail interaction generator. Per-user activity is a power-law draw
// (larger alpha -> heavier head). Each user has a visible preference cluster
// (encoded in the profile) and a hidden second cluster (not in the profile),
// so on-device state has signal that cloud features alone cannot recover.

struct SynthSpec {
  std::size_t n_users = 2000;
  std::size_t n_items = 5000;
  std::size_t n_cats = 20;      // also the cluster count
  double alpha = 1.2;           // activity skew
  std::size_t max_events = 400; // activity ceiling
  std::size_t min_events = 10;  // activity floor
  double noise = 0.1;           // fraction of events drawn uniformly
  double hidden_mix = 0.35;     // cluster events drawn from the hidden cluster
  std::size_t profile_dim = 8;
  std::uint64_t seed = 1;
};

Dataset synth_generate(const SynthSpec& spec);

// ---- Normalized binary form ------------------------------------------------
// Single binary file plus a JSON manifest sidecar (`<path>.manifest.json`).

void write_dataset(const Dataset& data, const std::filesystem::path& path,
                   const std::string& source_tag);
Dataset read_dataset(const std::filesystem::path& path);

// ---- Splits ----------------------------------------------------------------
// Per user: the last event is the ranking test case, and the remainder is cut
// once into a pretraining prefix and a collaborative-phase suffix, the suffix
// again into `n_slices` chronological slices (one per round).

struct TrainPos {
  std::uint32_t user = 0;
  std::uint32_t index = 0;  // events[user] position of the positive
};

struct EvalCase {
  std::uint32_t user = 0;
  std::uint32_t hist_end = 0;  // history is events[user][0 .. hist_end)
  std::uint32_t item = 0;      // ground truth
  std::uint32_t cat = 0;
  std::vector<std::uint32_t> negatives;  // distinct, never interacted with
};

struct SplitConfig {
  double pretrain_fraction = 0.5;
  std::size_t n_slices = 10;
  std::size_t n_negatives = 100;
  std::size_t min_user_events = 3;
  std::uint64_t seed = 1;
};

struct Splits {
  std::vector<TrainPos> pretrain;
  std::vector<std::vector<TrainPos>> slices;
  std::vector<EvalCase> eval_cases;
  std::vector<std::uint32_t> skipped_users;
  std::vector<std::size_t> train_events;  // per user, 0 for skipped
};

Splits build_splits(const Dataset& data, const SplitConfig& cfg);

// ---- Training sample materialization ----------------------------------------
// Expands positives into (positive + uniformly sampled unseen negatives).
// Output order: positions in input order, each positive followed by its
// negatives, so the set is identical for any worker count.

struct TrainSample {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::uint32_t cat = 0;
  std::uint32_t hist_end = 0;
  std::uint8_t label = 0;
};

std::vector<TrainSample> materialize(const Dataset& data,
                                     std::span<const TrainPos> positions,
                                     std::size_t neg_per_pos,
                                     std::uint64_t seed);

// History window (most recent `max_history` events before `hist_end`).
struct HistoryView {
  std::span<const std::uint32_t> items;
  std::span<const std::uint32_t> cats;
};

HistoryView history_for(const Dataset& data, std::uint32_t user,
                        std::uint32_t hist_end, std::size_t max_history);

}  // namespace dccl
