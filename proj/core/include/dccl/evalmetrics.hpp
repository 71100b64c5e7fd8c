#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dccl {

// Leave-one-out ranking metrics. A case is one user's ground-truth item
// ranked against sampled negatives; rank 1 is best. Tied negatives count as
// ranked above the ground truth (pessimistic).

struct RankedCase {
  std::uint32_t user = 0;
  std::uint32_t rank = 0;      // 1-indexed
  std::uint32_t n_scores = 0;  // ground truth + negatives
};

RankedCase rank_case(std::uint32_t user, double gt_score,
                     std::span<const double> neg_scores);

double hit_rate_at_k(std::span<const RankedCase> cases, std::size_t k);

enum class NdcgForm {
  kStandard,      // 1/log2(rank+1) if rank <= K else 0
  kPaperLiteral,  // degenerates to the hit indicator
};

double ndcg_at_k(std::span<const RankedCase> cases, std::size_t k,
                 NdcgForm form = NdcgForm::kStandard);

// Per-user scored test sets for pairwise AUC. Every user is weighted
// equally regardless of how many pairs they contribute.
struct UserScores {
  std::uint32_t user = 0;
  std::vector<double> pos;
  std::vector<double> neg;
};

struct MacroAucResult {
  double value = 0.0;
  std::size_t users_used = 0;
  std::size_t users_excluded = 0;  // empty positive or negative side
  std::vector<double> per_user;    // aligned with input; NaN when excluded
};

MacroAucResult macro_auc(std::span<const UserScores> users);

// Users sorted by descending training-sample count (ties by ascending user
// id), cut into `n_groups` contiguous near-equal groups. Group 0 is the head.
struct GroupPartition {
  std::size_t n_groups = 0;
  std::vector<std::uint32_t> group;  // aligned with the input users
  std::vector<std::size_t> sizes;
};

GroupPartition group_users(std::span<const std::uint32_t> users,
                           std::span<const std::size_t> counts,
                           std::size_t n_groups = 20);

// Mean per-user AUC within each group; NaN for groups with no scored user.
std::vector<double> group_means(std::span<const double> per_user,
                                const GroupPartition& part);

struct EvalReport {
  double hit1 = 0, hit5 = 0, hit10 = 0;
  double ndcg5 = 0, ndcg10 = 0;
  double auc = 0;
  std::vector<double> group_auc;
  std::size_t n_cases = 0;
};

// metrics.csv rows: metric,name,K,group,value. K and group print as empty
// fields when not applicable (k = -1, group = 0 means overall).
struct MetricRow {
  std::string metric;
  std::string name;
  int k = -1;
  int group = 0;
  double value = 0.0;
};

void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const MetricRow> rows);

std::vector<MetricRow> report_rows(const EvalReport& report,
                                   const std::string& name);

}  // namespace dccl
