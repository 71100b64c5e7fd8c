#include "dccl/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dccl {

RankedCase rank_case(std::uint32_t user, double gt_score,
                     std::span<const double> neg_scores) {
  if (!std::isfinite(gt_score))
    throw std::invalid_argument("rank_case: ground-truth score is not finite");
  std::uint32_t above = 0;
  for (double s : neg_scores) {
    if (!std::isfinite(s))
      throw std::invalid_argument("rank_case: negative score is not finite");
    if (s >= gt_score) ++above;
  }
  return RankedCase{user, above + 1,
                    static_cast<std::uint32_t>(neg_scores.size() + 1)};
}

double hit_rate_at_k(std::span<const RankedCase> cases, std::size_t k) {
  if (cases.empty()) throw std::invalid_argument("hit_rate_at_k: no cases");
  std::size_t hits = 0;
  for (const RankedCase& c : cases)
    if (c.rank <= k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

double ndcg_at_k(std::span<const RankedCase> cases, std::size_t k, NdcgForm form) {
  if (cases.empty()) throw std::invalid_argument("ndcg_at_k: no cases");
  if (form == NdcgForm::kPaperLiteral) return hit_rate_at_k(cases, k);
  double sum = 0.0;
  for (const RankedCase& c : cases)
    if (c.rank <= k) sum += 1.0 / std::log2(static_cast<double>(c.rank) + 1.0);
  return sum / static_cast<double>(cases.size());
}

MacroAucResult macro_auc(std::span<const UserScores> users) {
  MacroAucResult out;
  out.per_user.assign(users.size(), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (std::size_t i = 0; i < users.size(); ++i) {
    const UserScores& u = users[i];
    if (u.pos.empty() || u.neg.empty()) {
      ++out.users_excluded;
      continue;
    }
    double wins = 0.0;
    for (double p : u.pos) {
      if (!std::isfinite(p))
        throw std::invalid_argument("macro_auc: score is not finite");
      for (double n : u.neg) {
        if (!std::isfinite(n))
          throw std::invalid_argument("macro_auc: score is not finite");
        if (p > n) wins += 1.0;
        else if (p == n) wins += 0.5;
      }
    }
    const double auc = wins / (static_cast<double>(u.pos.size()) *
                               static_cast<double>(u.neg.size()));
    out.per_user[i] = auc;
    sum += auc;
    ++out.users_used;
  }
  if (out.users_used == 0)
    throw std::invalid_argument("macro_auc: every user lacks a scored side");
  out.value = sum / static_cast<double>(out.users_used);
  return out;
}

GroupPartition group_users(std::span<const std::uint32_t> users,
                           std::span<const std::size_t> counts,
                           std::size_t n_groups) {
  if (users.size() != counts.size())
    throw std::invalid_argument("group_users: users/counts size mismatch");
  if (users.empty()) throw std::invalid_argument("group_users: no users");
  if (n_groups == 0) throw std::invalid_argument("group_users: zero groups");
  GroupPartition out;
  out.n_groups = std::min(n_groups, users.size());

  std::vector<std::size_t> order(users.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return users[a] < users[b];
  });

  out.group.resize(users.size());
  out.sizes.assign(out.n_groups, 0);
  const std::size_t base = users.size() / out.n_groups;
  const std::size_t extra = users.size() % out.n_groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < out.n_groups; ++g) {
    const std::size_t len = base + (g < extra ? 1 : 0);
    for (std::size_t i = 0; i < len; ++i)
      out.group[order[pos + i]] = static_cast<std::uint32_t>(g);
    out.sizes[g] = len;
    pos += len;
  }
  return out;
}

std::vector<double> group_means(std::span<const double> per_user,
                                const GroupPartition& part) {
  if (per_user.size() != part.group.size())
    throw std::invalid_argument("group_means: per_user/partition size mismatch");
  std::vector<double> sum(part.n_groups, 0.0);
  std::vector<std::size_t> n(part.n_groups, 0);
  for (std::size_t i = 0; i < per_user.size(); ++i) {
    if (std::isnan(per_user[i])) continue;
    sum[part.group[i]] += per_user[i];
    ++n[part.group[i]];
  }
  std::vector<double> out(part.n_groups);
  for (std::size_t g = 0; g < part.n_groups; ++g)
    out[g] = n[g] ? sum[g] / static_cast<double>(n[g])
                  : std::numeric_limits<double>::quiet_NaN();
  return out;
}

void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const MetricRow> rows) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os)
      throw std::runtime_error("write_metrics_csv: cannot open " + tmp.string());
    os << "metric,name,K,group,value\n";
    char buf[40];
    for (const MetricRow& r : rows) {
      os << r.metric << ',' << r.name << ',';
      if (r.k >= 0) os << r.k;
      os << ',';
      if (r.group > 0) os << r.group;
      os << ',';
      std::snprintf(buf, sizeof buf, "%.17g", r.value);
      os << buf << '\n';
    }
    if (!os) throw std::runtime_error("write_metrics_csv: write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<MetricRow> report_rows(const EvalReport& report,
                                   const std::string& name) {
  std::vector<MetricRow> rows;
  rows.push_back({"hit_rate", name, 1, 0, report.hit1});
  rows.push_back({"hit_rate", name, 5, 0, report.hit5});
  rows.push_back({"hit_rate", name, 10, 0, report.hit10});
  rows.push_back({"ndcg", name, 5, 0, report.ndcg5});
  rows.push_back({"ndcg", name, 10, 0, report.ndcg10});
  rows.push_back({"macro_auc", name, -1, 0, report.auc});
  for (std::size_t g = 0; g < report.group_auc.size(); ++g)
    rows.push_back({"macro_auc", name, -1, static_cast<int>(g + 1),
                    report.group_auc[g]});
  return rows;
}

}  // namespace dccl
