#include "dccl/datahub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dccl/rng.hpp"

namespace dccl {
namespace {

constexpr std::uint64_t kProfileProjectionSeed = 0x4D4C5052;  // fixed by design
constexpr std::array<int, 7> kAgeBuckets = {1, 18, 25, 35, 45, 50, 56};
constexpr int kOccupations = 21;

[[noreturn]] void parse_fail(const std::filesystem::path& file, std::size_t line,
                             const std::string& why) {
  throw std::runtime_error(file.filename().string() + ":" + std::to_string(line) +
                           ": " + why);
}

std::vector<std::string> split_sep(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (true) {
    std::size_t next = line.find(sep, at);
    if (next == std::string::npos) {
      out.push_back(line.substr(at));
      return out;
    }
    out.push_back(line.substr(at, next - at));
    at = next + sep.size();
  }
}

long to_long(const std::string& s, const std::filesystem::path& file,
             std::size_t line, const char* what) {
  try {
    std::size_t used = 0;
    long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    parse_fail(file, line, std::string("bad ") + what + " '" + s + "'");
  }
}

// Profiles for ingested corpora: one-hot gender/age/occupation through a
// fixed random projection, so the same fields always produce the same vector.
Tensor project_user_fields(const std::vector<std::array<std::uint32_t, 3>>& fields,
                           std::size_t profile_dim) {
  const std::size_t onehot = 2 + kAgeBuckets.size() + kOccupations;
  Tensor proj({onehot, profile_dim});
  auto rng = make_rng(kProfileProjectionSeed, "field_projection");
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(3.0));
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = dist(rng);

  Tensor out({fields.size(), profile_dim});
  for (std::size_t u = 0; u < fields.size(); ++u) {
    const std::size_t rows[3] = {fields[u][0], 2 + fields[u][1],
                                 2 + kAgeBuckets.size() + fields[u][2]};
    for (std::size_t r : rows)
      for (std::size_t d = 0; d < profile_dim; ++d)
        out[u * profile_dim + d] += proj[r * profile_dim + d];
  }
  return out;
}

}  // namespace

std::size_t Dataset::total_events() const {
  std::size_t n = 0;
  for (const UserEvents& ue : events) n += ue.size();
  return n;
}

void Dataset::validate() const {
  if (events.size() != n_users)
    throw std::runtime_error("Dataset: event streams for " +
                             std::to_string(events.size()) + " users, expected " +
                             std::to_string(n_users));
  if (item_cat.size() != n_items)
    throw std::runtime_error("Dataset: item_cat has " +
                             std::to_string(item_cat.size()) + " entries, expected " +
                             std::to_string(n_items));
  for (std::uint32_t c : item_cat)
    if (c >= n_cats) throw std::runtime_error("Dataset: item category out of range");
  if (profiles.rank() != 2 || profiles.rows() != n_users ||
      profiles.cols() != profile_dim)
    throw std::runtime_error("Dataset: profile table has shape " +
                             shape_str(profiles.shape()));
  if (!user_fields.empty() && user_fields.size() != n_users)
    throw std::runtime_error("Dataset: user_fields size mismatch");
  for (std::size_t u = 0; u < events.size(); ++u) {
    const UserEvents& ue = events[u];
    if (ue.cats.size() != ue.items.size() || ue.ts.size() != ue.items.size())
      throw std::runtime_error("Dataset: ragged event arrays for user " +
                               std::to_string(u));
    for (std::size_t i = 0; i < ue.size(); ++i) {
      if (ue.items[i] >= n_items)
        throw std::runtime_error("Dataset: item id out of range for user " +
                                 std::to_string(u));
      if (ue.cats[i] != item_cat[ue.items[i]])
        throw std::runtime_error("Dataset: event category disagrees with item_cat");
      if (i > 0 && ue.ts[i] < ue.ts[i - 1])
        throw std::runtime_error("Dataset: timestamps not sorted for user " +
                                 std::to_string(u));
    }
  }
}

std::unordered_set<std::uint32_t> user_item_set(const Dataset& data,
                                                std::uint32_t user) {
  if (user >= data.n_users)
    throw std::invalid_argument("user_item_set: user " + std::to_string(user) +
                                " out of range");
  std::unordered_set<std::uint32_t> s;
  s.reserve(data.events[user].size() * 2);
  for (std::uint32_t it : data.events[user].items) s.insert(it);
  return s;
}

Dataset parse_movielens(const std::filesystem::path& dir, IngestStats* stats) {
  const std::filesystem::path users_file = dir / "users.dat";
  const std::filesystem::path movies_file = dir / "movies.dat";
  const std::filesystem::path ratings_file = dir / "ratings.dat";

  auto open = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot open " + p.string());
    return is;
  };

  // users.dat: id::gender::age::occupation::zip
  std::map<long, std::array<std::uint32_t, 3>> raw_users;
  {
    std::ifstream is = open(users_file);
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
      ++ln;
      if (line.empty()) continue;
      auto f = split_sep(line, "::");
      if (f.size() != 5) parse_fail(users_file, ln, "expected 5 fields");
      const long id = to_long(f[0], users_file, ln, "user id");
      if (id < 1) parse_fail(users_file, ln, "user id must be positive");
      std::uint32_t gender;
      if (f[1] == "F") gender = 0;
      else if (f[1] == "M") gender = 1;
      else parse_fail(users_file, ln, "bad gender '" + f[1] + "'");
      const long age = to_long(f[2], users_file, ln, "age");
      auto it = std::find(kAgeBuckets.begin(), kAgeBuckets.end(), age);
      if (it == kAgeBuckets.end()) parse_fail(users_file, ln, "unknown age bucket");
      const long occ = to_long(f[3], users_file, ln, "occupation");
      if (occ < 0 || occ >= kOccupations)
        parse_fail(users_file, ln, "occupation out of range");
      const auto age_idx = static_cast<std::uint32_t>(it - kAgeBuckets.begin());
      if (!raw_users.emplace(id, std::array<std::uint32_t, 3>{
                                     gender, age_idx, static_cast<std::uint32_t>(occ)})
               .second)
        parse_fail(users_file, ln, "duplicate user id");
    }
    if (raw_users.empty()) throw std::runtime_error(users_file.string() + ": no users");
  }

  // movies.dat: id::title::genres (first genre is the category label)
  std::map<long, std::string> raw_movies;
  {
    std::ifstream is = open(movies_file);
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
      ++ln;
      if (line.empty()) continue;
      const std::size_t first = line.find("::");
      const std::size_t last = line.rfind("::");
      if (first == std::string::npos || last == first)
        parse_fail(movies_file, ln, "expected 3 fields");
      const long id = to_long(line.substr(0, first), movies_file, ln, "item id");
      std::string genres = line.substr(last + 2);
      const std::size_t bar = genres.find('|');
      std::string genre = bar == std::string::npos ? genres : genres.substr(0, bar);
      if (genre.empty()) parse_fail(movies_file, ln, "empty genre");
      if (!raw_movies.emplace(id, std::move(genre)).second)
        parse_fail(movies_file, ln, "duplicate item id");
    }
    if (raw_movies.empty())
      throw std::runtime_error(movies_file.string() + ": no items");
  }

  // Dense ids in ascending raw-id order; categories in sorted label order.
  std::map<long, std::uint32_t> user_id;
  for (const auto& [id, f] : raw_users)
    user_id.emplace(id, static_cast<std::uint32_t>(user_id.size()));
  std::map<long, std::uint32_t> item_id;
  std::map<std::string, std::uint32_t> cat_id;
  for (const auto& [id, genre] : raw_movies) {
    item_id.emplace(id, static_cast<std::uint32_t>(item_id.size()));
    cat_id.emplace(genre, 0);
  }
  {
    std::uint32_t next = 0;
    for (auto& [label, id] : cat_id) id = next++;
  }

  Dataset data;
  data.n_users = user_id.size();
  data.n_items = item_id.size();
  data.n_cats = cat_id.size();
  data.events.resize(data.n_users);
  data.item_cat.resize(data.n_items);
  for (const auto& [raw, genre] : raw_movies)
    data.item_cat[item_id.at(raw)] = cat_id.at(genre);
  data.user_fields.resize(data.n_users);
  for (const auto& [raw, fields] : raw_users)
    data.user_fields[user_id.at(raw)] = fields;

  // ratings.dat: user::item::rating::timestamp, every row one positive event
  {
    std::ifstream is = open(ratings_file);
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
      ++ln;
      if (line.empty()) continue;
      auto f = split_sep(line, "::");
      if (f.size() != 4) parse_fail(ratings_file, ln, "expected 4 fields");
      const long u_raw = to_long(f[0], ratings_file, ln, "user id");
      const long i_raw = to_long(f[1], ratings_file, ln, "item id");
      const long ts = to_long(f[3], ratings_file, ln, "timestamp");
      auto uit = user_id.find(u_raw);
      if (uit == user_id.end()) parse_fail(ratings_file, ln, "unknown user");
      auto iit = item_id.find(i_raw);
      if (iit == item_id.end()) parse_fail(ratings_file, ln, "unknown item");
      UserEvents& ue = data.events[uit->second];
      ue.items.push_back(iit->second);
      ue.cats.push_back(data.item_cat[iit->second]);
      ue.ts.push_back(ts);
    }
  }

  // Chronological order per user; equal timestamps keep file order, so the
  // stream is totally ordered and reproducible.
  for (UserEvents& ue : data.events) {
    std::vector<std::size_t> order(ue.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ue.ts[a] < ue.ts[b]; });
    UserEvents sorted;
    sorted.items.reserve(ue.size());
    sorted.cats.reserve(ue.size());
    sorted.ts.reserve(ue.size());
    for (std::size_t i : order) {
      sorted.items.push_back(ue.items[i]);
      sorted.cats.push_back(ue.cats[i]);
      sorted.ts.push_back(ue.ts[i]);
    }
    ue = std::move(sorted);
  }

  data.profiles = project_user_fields(data.user_fields, data.profile_dim);
  data.validate();
  if (stats) {
    stats->users = data.n_users;
    stats->items = data.n_items;
    stats->cats = data.n_cats;
    stats->events = data.total_events();
  }
  return data;
}

void write_movielens_format(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [](const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + p.string());
    return os;
  };
  {
    std::ofstream os = open(dir / "users.dat");
    for (std::size_t u = 0; u < data.n_users; ++u) {
      std::array<std::uint32_t, 3> f = {0, 0, 0};
      if (!data.user_fields.empty()) f = data.user_fields[u];
      os << (u + 1) << "::" << (f[0] == 0 ? 'F' : 'M') << "::"
         << kAgeBuckets[f[1] % kAgeBuckets.size()] << "::" << (f[2] % kOccupations)
         << "::00000\n";
    }
  }
  {
    std::ofstream os = open(dir / "movies.dat");
    char genre[16];
    for (std::size_t i = 0; i < data.n_items; ++i) {
      std::snprintf(genre, sizeof genre, "Genre%03u", data.item_cat[i]);
      os << (i + 1) << "::Item " << (i + 1) << " (2020)::" << genre << "\n";
    }
  }
  {
    std::ofstream os = open(dir / "ratings.dat");
    for (std::size_t u = 0; u < data.n_users; ++u) {
      const UserEvents& ue = data.events[u];
      for (std::size_t i = 0; i < ue.size(); ++i)
        os << (u + 1) << "::" << (ue.items[i] + 1) << "::5::" << ue.ts[i] << "\n";
    }
  }
}

FilterReport filter_min_interactions(Dataset& data, std::size_t min_user_events,
                                     std::size_t min_item_events) {
  FilterReport rep;
  const std::size_t events_before = data.total_events();
  std::vector<bool> user_alive(data.n_users, true);
  std::vector<bool> item_alive(data.n_items, true);

  // Dropping a user shrinks item counts and vice versa, so iterate until
  // both thresholds hold at once.
  while (true) {
    ++rep.passes;
    bool changed = false;
    std::vector<std::size_t> item_count(data.n_items, 0);
    std::vector<std::size_t> user_count(data.n_users, 0);
    for (std::size_t u = 0; u < data.n_users; ++u) {
      if (!user_alive[u]) continue;
      for (std::uint32_t it : data.events[u].items)
        if (item_alive[it]) {
          ++user_count[u];
          ++item_count[it];
        }
    }
    for (std::size_t u = 0; u < data.n_users; ++u)
      if (user_alive[u] && user_count[u] < min_user_events) {
        user_alive[u] = false;
        changed = true;
      }
    if (changed) continue;  // recount items against the new user set
    for (std::size_t i = 0; i < data.n_items; ++i)
      if (item_alive[i] && item_count[i] < min_item_events) {
        item_alive[i] = false;
        changed = true;
      }
    if (!changed) break;
  }

  std::vector<std::uint32_t> user_map(data.n_users, UINT32_MAX);
  std::vector<std::uint32_t> item_map(data.n_items, UINT32_MAX);
  std::uint32_t nu = 0, ni = 0;
  for (std::size_t u = 0; u < data.n_users; ++u)
    if (user_alive[u]) user_map[u] = nu++;
  for (std::size_t i = 0; i < data.n_items; ++i)
    if (item_alive[i]) item_map[i] = ni++;
  if (nu == 0 || ni == 0)
    throw std::runtime_error("filter_min_interactions: nothing survives thresholds");

  std::vector<bool> cat_alive(data.n_cats, false);
  for (std::size_t i = 0; i < data.n_items; ++i)
    if (item_alive[i]) cat_alive[data.item_cat[i]] = true;
  std::vector<std::uint32_t> cat_map(data.n_cats, UINT32_MAX);
  std::uint32_t nc = 0;
  for (std::size_t c = 0; c < data.n_cats; ++c)
    if (cat_alive[c]) cat_map[c] = nc++;

  Dataset out;
  out.n_users = nu;
  out.n_items = ni;
  out.n_cats = nc;
  out.profile_dim = data.profile_dim;
  out.events.resize(nu);
  out.item_cat.resize(ni);
  for (std::size_t i = 0; i < data.n_items; ++i)
    if (item_alive[i]) out.item_cat[item_map[i]] = cat_map[data.item_cat[i]];
  out.profiles = Tensor({nu, data.profile_dim});
  if (!data.user_fields.empty()) out.user_fields.resize(nu);
  for (std::size_t u = 0; u < data.n_users; ++u) {
    if (!user_alive[u]) continue;
    const std::uint32_t du = user_map[u];
    for (std::size_t d = 0; d < data.profile_dim; ++d)
      out.profiles[du * data.profile_dim + d] = data.profiles[u * data.profile_dim + d];
    if (!data.user_fields.empty()) out.user_fields[du] = data.user_fields[u];
    UserEvents& dst = out.events[du];
    const UserEvents& src = data.events[u];
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (!item_alive[src.items[i]]) continue;
      dst.items.push_back(item_map[src.items[i]]);
      dst.cats.push_back(out.item_cat[item_map[src.items[i]]]);
      dst.ts.push_back(src.ts[i]);
    }
  }

  rep.users_removed = data.n_users - nu;
  rep.items_removed = data.n_items - ni;
  rep.cats_removed = data.n_cats - nc;
  data = std::move(out);
  rep.events_removed = events_before - data.total_events();
  data.validate();
  return rep;
}

Dataset synth_generate(const SynthSpec& spec) {
  if (spec.n_users == 0 || spec.n_items == 0 || spec.n_cats == 0)
    throw std::invalid_argument("synth_generate: empty corpus requested");
  if (spec.n_cats > spec.n_items)
    throw std::invalid_argument("synth_generate: more clusters than items");
  if (spec.alpha < 0 || spec.noise < 0 || spec.noise > 1 || spec.hidden_mix < 0 ||
      spec.hidden_mix > 1)
    throw std::invalid_argument("synth_generate: parameter out of range");
  if (spec.min_events < 1 || spec.max_events < spec.min_events)
    throw std::invalid_argument("synth_generate: bad event bounds");

  Dataset data;
  data.n_users = spec.n_users;
  data.n_items = spec.n_items;
  data.n_cats = spec.n_cats;
  data.profile_dim = spec.profile_dim;
  data.events.resize(spec.n_users);
  data.item_cat.resize(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i)
    data.item_cat[i] = static_cast<std::uint32_t>(i % spec.n_cats);

  // Activity: each user's event count is an independent power-law draw,
  // count = min_events * U^(-alpha) capped at max_events, so a larger alpha
  // gives a heavier head while the population keeps a smooth spread of
  // data-rich and data-poor users at any corpus size.
  std::vector<std::size_t> activity(spec.n_users, 0);
  {
    auto rng = make_rng(spec.seed, "activity");
    std::uniform_real_distribution<double> unit(
        std::numeric_limits<double>::min(), 1.0);
    for (std::size_t u = 0; u < spec.n_users; ++u) {
      const double raw = static_cast<double>(spec.min_events) *
                         std::pow(unit(rng), -spec.alpha);
      std::size_t n = raw >= static_cast<double>(spec.max_events)
                          ? spec.max_events
                          : static_cast<std::size_t>(std::llround(raw));
      activity[u] = std::clamp(n, spec.min_events, spec.max_events);
    }
  }

  // Visible cluster (reflected in the profile) and hidden second cluster
  // (only observable through the user's events).
  std::vector<std::uint32_t> visible(spec.n_users), hidden(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    visible[u] = static_cast<std::uint32_t>(u % spec.n_cats);
    auto rng = make_rng(spec.seed, "hidden_cluster", {u});
    std::uniform_int_distribution<std::uint32_t> pick(
        0, static_cast<std::uint32_t>(spec.n_cats - 1));
    do {
      hidden[u] = pick(rng);
    } while (spec.n_cats > 1 && hidden[u] == visible[u]);
  }

  auto pool_size = [&](std::uint32_t c) {
    return (spec.n_items - c + spec.n_cats - 1) / spec.n_cats;
  };
  auto pool_item = [&](std::uint32_t c, std::size_t j) {
    return static_cast<std::uint32_t>(c + j * spec.n_cats);
  };

  for (std::size_t u = 0; u < spec.n_users; ++u) {
    auto rng = make_rng(spec.seed, "events", {u});
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<std::uint32_t> any_item(
        0, static_cast<std::uint32_t>(spec.n_items - 1));
    std::uniform_int_distribution<std::int64_t> any_ts(0, 999'999);
    const std::size_t n = activity[u];
    std::vector<std::pair<std::int64_t, std::uint32_t>> ev(n);
    for (std::size_t e = 0; e < n; ++e) {
      const double r = coin(rng);
      std::uint32_t item;
      if (r < spec.noise) {
        item = any_item(rng);
      } else {
        const std::uint32_t c =
            (r < spec.noise + (1.0 - spec.noise) * spec.hidden_mix) ? hidden[u]
                                                                    : visible[u];
        std::uniform_int_distribution<std::size_t> in_pool(0, pool_size(c) - 1);
        item = pool_item(c, in_pool(rng));
      }
      ev[e] = {any_ts(rng), item};
    }
    std::stable_sort(ev.begin(), ev.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    UserEvents& ue = data.events[u];
    ue.items.reserve(n);
    ue.cats.reserve(n);
    ue.ts.reserve(n);
    for (const auto& [ts, item] : ev) {
      ue.items.push_back(item);
      ue.cats.push_back(data.item_cat[item]);
      ue.ts.push_back(ts);
    }
  }

  // Deciles of activity (0 = most active tenth).
  std::vector<std::uint32_t> order(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u)
    order[u] = static_cast<std::uint32_t>(u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (activity[a] != activity[b]) return activity[a] > activity[b];
    return a < b;
  });
  std::vector<std::uint32_t> decile(spec.n_users, 0);
  for (std::size_t pos = 0; pos < spec.n_users; ++pos)
    decile[order[pos]] = static_cast<std::uint32_t>(pos * 10 / spec.n_users);

  // Profile: visible-cluster vector + activity-decile vector + user noise.
  data.profiles = Tensor({spec.n_users, spec.profile_dim});
  std::vector<Tensor> cvec, dvec;
  for (std::size_t c = 0; c < spec.n_cats; ++c) {
    Tensor t({spec.profile_dim});
    auto rng = make_rng(spec.seed, "profile_cluster", {c});
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(2.0));
    for (std::size_t d = 0; d < t.size(); ++d) t[d] = dist(rng);
    cvec.push_back(std::move(t));
  }
  for (std::size_t k = 0; k < 10; ++k) {
    Tensor t({spec.profile_dim});
    auto rng = make_rng(spec.seed, "profile_decile", {k});
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(2.0));
    for (std::size_t d = 0; d < t.size(); ++d) t[d] = dist(rng);
    dvec.push_back(std::move(t));
  }
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    auto rng = make_rng(spec.seed, "profile_noise", {u});
    std::normal_distribution<double> dist(0.0, 0.05);
    for (std::size_t d = 0; d < spec.profile_dim; ++d)
      data.profiles[u * spec.profile_dim + d] =
          cvec[visible[u]][d] + dvec[decile[u]][d] + dist(rng);
  }

  data.user_fields.resize(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u)
    data.user_fields[u] = {visible[u] % 2,
                           static_cast<std::uint32_t>(decile[u] * kAgeBuckets.size() / 10),
                           visible[u] % kOccupations};

  data.validate();
  return data;
}

namespace {

constexpr std::uint64_t kDatasetMagic = 0x31544144'4C434344ull;  // "DCCLDAT1"

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& path,
                   const std::string& source_tag) {
  data.validate();
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_dataset: cannot open " + tmp.string());
    put_u64(os, kDatasetMagic);
    put_u64(os, data.n_users);
    put_u64(os, data.n_items);
    put_u64(os, data.n_cats);
    put_u64(os, data.profile_dim);
    put_u64(os, data.user_fields.empty() ? 0 : 1);
    for (std::uint32_t c : data.item_cat) put_u64(os, c);
    os.write(reinterpret_cast<const char*>(data.profiles.data()),
             static_cast<std::streamsize>(data.profiles.size() * sizeof(double)));
    for (const auto& f : data.user_fields) {
      put_u64(os, f[0]);
      put_u64(os, f[1]);
      put_u64(os, f[2]);
    }
    for (const UserEvents& ue : data.events) {
      put_u64(os, ue.size());
      for (std::uint32_t v : ue.items) put_u64(os, v);
      for (std::uint32_t v : ue.cats) put_u64(os, v);
      for (std::int64_t v : ue.ts) put_u64(os, static_cast<std::uint64_t>(v));
    }
    if (!os) throw std::runtime_error("write_dataset: write failed");
  }
  std::filesystem::rename(tmp, path);

  nlohmann::json manifest;
  manifest["format"] = "dccl-dataset-v1";
  manifest["source"] = source_tag;
  manifest["n_users"] = data.n_users;
  manifest["n_items"] = data.n_items;
  manifest["n_cats"] = data.n_cats;
  manifest["profile_dim"] = data.profile_dim;
  manifest["events"] = data.total_events();
  std::filesystem::path mpath = path;
  mpath += ".manifest.json";
  std::ofstream ms(mpath, std::ios::trunc);
  if (!ms) throw std::runtime_error("write_dataset: cannot open " + mpath.string());
  ms << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_dataset: cannot open " + path.string());
  if (get_u64(is) != kDatasetMagic || !is)
    throw std::runtime_error("read_dataset: " + path.string() + " is not a dataset");
  Dataset data;
  data.n_users = static_cast<std::size_t>(get_u64(is));
  data.n_items = static_cast<std::size_t>(get_u64(is));
  data.n_cats = static_cast<std::size_t>(get_u64(is));
  data.profile_dim = static_cast<std::size_t>(get_u64(is));
  const bool has_fields = get_u64(is) != 0;
  if (!is || data.n_users > (1ull << 32) || data.n_items > (1ull << 32))
    throw std::runtime_error("read_dataset: implausible header");
  data.item_cat.resize(data.n_items);
  for (auto& c : data.item_cat) c = static_cast<std::uint32_t>(get_u64(is));
  data.profiles = Tensor({data.n_users, data.profile_dim});
  is.read(reinterpret_cast<char*>(data.profiles.data()),
          static_cast<std::streamsize>(data.profiles.size() * sizeof(double)));
  if (has_fields) {
    data.user_fields.resize(data.n_users);
    for (auto& f : data.user_fields) {
      f[0] = static_cast<std::uint32_t>(get_u64(is));
      f[1] = static_cast<std::uint32_t>(get_u64(is));
      f[2] = static_cast<std::uint32_t>(get_u64(is));
    }
  }
  data.events.resize(data.n_users);
  for (UserEvents& ue : data.events) {
    const std::size_t n = static_cast<std::size_t>(get_u64(is));
    if (!is || n > (1ull << 28)) throw std::runtime_error("read_dataset: bad stream length");
    ue.items.resize(n);
    ue.cats.resize(n);
    ue.ts.resize(n);
    for (auto& v : ue.items) v = static_cast<std::uint32_t>(get_u64(is));
    for (auto& v : ue.cats) v = static_cast<std::uint32_t>(get_u64(is));
    for (auto& v : ue.ts) v = static_cast<std::int64_t>(get_u64(is));
  }
  if (!is) throw std::runtime_error("read_dataset: truncated file " + path.string());
  data.validate();
  return data;
}

Splits build_splits(const Dataset& data, const SplitConfig& cfg) {
  if (cfg.pretrain_fraction < 0.0 || cfg.pretrain_fraction > 1.0)
    throw std::invalid_argument("build_splits: pretrain_fraction outside [0,1]");
  if (cfg.n_slices == 0) throw std::invalid_argument("build_splits: n_slices is 0");
  if (cfg.n_negatives == 0) throw std::invalid_argument("build_splits: n_negatives is 0");
  if (cfg.min_user_events < 3)
    throw std::invalid_argument("build_splits: min_user_events must be >= 3");

  Splits out;
  out.slices.resize(cfg.n_slices);
  out.train_events.assign(data.n_users, 0);

  for (std::uint32_t u = 0; u < data.n_users; ++u) {
    const UserEvents& ue = data.events[u];
    const std::size_t k = ue.size();
    if (k < cfg.min_user_events) {
      out.skipped_users.push_back(u);
      continue;
    }
    const std::size_t n_train = k - 1;
    auto n_pre = static_cast<std::size_t>(
        std::llround(static_cast<double>(n_train) * cfg.pretrain_fraction));
    n_pre = std::min(n_pre, n_train);
    for (std::size_t i = 0; i < n_pre; ++i)
      out.pretrain.push_back(TrainPos{u, static_cast<std::uint32_t>(i)});

    const std::size_t m = n_train - n_pre;
    const std::size_t base = m / cfg.n_slices, extra = m % cfg.n_slices;
    std::size_t at = n_pre;
    for (std::size_t s = 0; s < cfg.n_slices; ++s) {
      const std::size_t len = base + (s < extra ? 1 : 0);
      for (std::size_t i = 0; i < len; ++i)
        out.slices[s].push_back(TrainPos{u, static_cast<std::uint32_t>(at + i)});
      at += len;
    }
    out.train_events[u] = n_train;

    EvalCase ec;
    ec.user = u;
    ec.hist_end = static_cast<std::uint32_t>(k - 1);
    ec.item = ue.items[k - 1];
    ec.cat = ue.cats[k - 1];
    auto seen = user_item_set(data, u);
    if (data.n_items - std::min(data.n_items, seen.size()) < cfg.n_negatives)
      throw std::runtime_error("build_splits: user " + std::to_string(u) +
                               " has too few unseen items for " +
                               std::to_string(cfg.n_negatives) + " negatives");
    auto rng = make_rng(cfg.seed, "eval_negs", {u});
    std::uniform_int_distribution<std::uint32_t> pick(
        0, static_cast<std::uint32_t>(data.n_items - 1));
    std::unordered_set<std::uint32_t> chosen;
    ec.negatives.reserve(cfg.n_negatives);
    while (ec.negatives.size() < cfg.n_negatives) {
      const std::uint32_t cand = pick(rng);
      if (seen.count(cand) || chosen.count(cand)) continue;
      chosen.insert(cand);
      ec.negatives.push_back(cand);
    }
    out.eval_cases.push_back(std::move(ec));
  }
  return out;
}

std::vector<TrainSample> materialize(const Dataset& data,
                                     std::span<const TrainPos> positions,
                                     std::size_t neg_per_pos, std::uint64_t seed) {
  std::vector<TrainSample> out;
  out.reserve(positions.size() * (1 + neg_per_pos));
  std::unordered_set<std::uint32_t> seen;
  std::uint32_t seen_user = UINT32_MAX;
  for (const TrainPos& pos : positions) {
    if (pos.user >= data.n_users)
      throw std::invalid_argument("materialize: user out of range");
    const UserEvents& ue = data.events[pos.user];
    if (pos.index >= ue.size())
      throw std::invalid_argument("materialize: event index out of range for user " +
                                  std::to_string(pos.user));
    out.push_back(TrainSample{pos.user, ue.items[pos.index], ue.cats[pos.index],
                              pos.index, 1});
    if (neg_per_pos == 0) continue;
    if (pos.user != seen_user) {
      seen = user_item_set(data, pos.user);
      seen_user = pos.user;
    }
    if (seen.size() >= data.n_items)
      throw std::runtime_error("materialize: user " + std::to_string(pos.user) +
                               " interacted with every item");
    auto rng = make_rng(seed, "train_negs", {pos.user, pos.index});
    std::uniform_int_distribution<std::uint32_t> pick(
        0, static_cast<std::uint32_t>(data.n_items - 1));
    for (std::size_t k = 0; k < neg_per_pos; ++k) {
      std::uint32_t cand;
      do {
        cand = pick(rng);
      } while (seen.count(cand));
      out.push_back(
          TrainSample{pos.user, cand, data.item_cat[cand], pos.index, 0});
    }
  }
  return out;
}

HistoryView history_for(const Dataset& data, std::uint32_t user,
                        std::uint32_t hist_end, std::size_t max_history) {
  if (user >= data.n_users)
    throw std::invalid_argument("history_for: user out of range");
  const UserEvents& ue = data.events[user];
  if (hist_end > ue.size())
    throw std::invalid_argument("history_for: hist_end " + std::to_string(hist_end) +
                                " beyond " + std::to_string(ue.size()) +
                                " events for user " + std::to_string(user));
  const std::size_t begin = hist_end > max_history ? hist_end - max_history : 0;
  const std::size_t len = hist_end - begin;
  return HistoryView{std::span(ue.items).subspan(begin, len),
                     std::span(ue.cats).subspan(begin, len)};
}

}  // namespace dccl
