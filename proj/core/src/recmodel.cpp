#include "dccl/recmodel.hpp"

#include <cmath>
#include <stdexcept>

#include "dccl/mathutil.hpp"
#include "dccl/rng.hpp"

namespace dccl {
namespace {

void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
}

void fill_glorot(Tensor& t, std::mt19937_64& rng, std::size_t fan_in,
                 std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
}

}  // namespace

void BackboneConfig::validate() const {
  auto need = [](std::size_t v, const char* what) {
    if (v == 0)
      throw std::invalid_argument(std::string("BackboneConfig: ") + what +
                                  " must be positive");
  };
  need(n_users, "n_users");
  need(n_items, "n_items");
  need(n_cats, "n_cats");
  need(user_dim, "user_dim");
  need(item_dim, "item_dim");
  need(cat_dim, "cat_dim");
  need(profile_dim, "profile_dim");
  need(attn_dim, "attn_dim");
  need(tower1, "tower1");
  need(tower2, "tower2");
  need(tower3, "tower3");
  for (std::size_t b : patch_bottleneck) need(b, "patch_bottleneck");
}

BackboneParams BackboneParams::zeros(const BackboneConfig& cfg) {
  cfg.validate();
  BackboneParams p;
  p.cfg = cfg;
  p.emb_user = Tensor::zeros({cfg.n_users, cfg.user_dim});
  p.emb_item = Tensor::zeros({cfg.n_items, cfg.item_dim});
  p.emb_cat = Tensor::zeros({cfg.n_cats, cfg.cat_dim});
  p.attn_q = Tensor::zeros({cfg.attn_dim, cfg.cand_dim()});
  p.attn_k = Tensor::zeros({cfg.attn_dim, cfg.cand_dim()});
  p.attn_v = Tensor::zeros({cfg.attn_dim, cfg.cand_dim()});
  p.fc1_w = Tensor::zeros({cfg.tower_in(), cfg.tower1});
  p.fc1_b = Tensor::zeros({cfg.tower1});
  p.fc2_w = Tensor::zeros({cfg.tower1, cfg.tower2});
  p.fc2_b = Tensor::zeros({cfg.tower2});
  p.fc3_w = Tensor::zeros({cfg.tower2, cfg.tower3});
  p.fc3_b = Tensor::zeros({cfg.tower3});
  p.out_w = Tensor::zeros({cfg.tower3, 1});
  p.out_b = Tensor::zeros({1});
  return p;
}

BackboneParams BackboneParams::init(const BackboneConfig& cfg,
                                    std::uint64_t seed) {
  BackboneParams p = zeros(cfg);
  auto list = p.named();
  for (std::size_t i = 0; i < list.size(); ++i) {
    auto rng = make_rng(seed, "backbone_init", {i});
    Tensor& t = *list[i].second;
    const std::string& name = list[i].first;
    if (name.rfind("emb_", 0) == 0) {
      fill_normal(t, rng, 0.05);
    } else if (name.rfind("attn_", 0) == 0) {
      fill_glorot(t, rng, cfg.cand_dim(), cfg.attn_dim);
    } else if (name.back() == 'w') {
      fill_glorot(t, rng, t.rows(), t.cols());
    }
    // biases stay zero
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> BackboneParams::named() {
  return {
      {"emb_user", &emb_user}, {"emb_item", &emb_item}, {"emb_cat", &emb_cat},
      {"attn_q", &attn_q},     {"attn_k", &attn_k},     {"attn_v", &attn_v},
      {"fc1_w", &fc1_w},       {"fc1_b", &fc1_b},       {"fc2_w", &fc2_w},
      {"fc2_b", &fc2_b},       {"fc3_w", &fc3_w},       {"fc3_b", &fc3_b},
      {"out_w", &out_w},       {"out_b", &out_b},
  };
}

std::vector<std::pair<std::string, const Tensor*>> BackboneParams::named() const {
  auto list = const_cast<BackboneParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(list.size());
  for (auto& [n, t] : list) out.emplace_back(n, t);
  return out;
}

std::vector<Tensor*> BackboneParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& [n, t] : named()) out.push_back(t);
  return out;
}

std::vector<const Tensor*> BackboneParams::tensors() const {
  std::vector<const Tensor*> out;
  for (auto& [n, t] : named()) out.push_back(t);
  return out;
}

std::array<PatchSite, 3> patch_sites(const BackboneConfig& cfg) {
  return {
      PatchSite{Junction::kTower1, cfg.tower1, cfg.patch_bottleneck[0]},
      PatchSite{Junction::kTower2, cfg.tower2, cfg.patch_bottleneck[1]},
      PatchSite{Junction::kTower3, cfg.tower3, cfg.patch_bottleneck[2]},
  };
}

PatchDims patch_dims(const BackboneConfig& cfg) {
  PatchDims d;
  auto sites = patch_sites(cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    d.site[i] = sites[i].param_count();
    d.total += d.site[i];
  }
  return d;
}

namespace {

void check_patch_flat(const PatchSite& site, const Tensor& flat) {
  if (flat.rank() != 1 || flat.size() != site.param_count())
    throw std::invalid_argument(
        "GeneratedPatch: flat vector has shape " + shape_str(flat.shape()) +
        ", site needs (" + std::to_string(site.param_count()) + ")");
}

}  // namespace

Tensor GeneratedPatch::down() const {
  check_patch_flat(site, flat);
  const std::size_t w = site.width, b = site.bottleneck;
  std::vector<double> v(flat.values().begin(), flat.values().begin() + w * b);
  return Tensor({w, b}, std::move(v));
}

Tensor GeneratedPatch::b1() const {
  check_patch_flat(site, flat);
  const std::size_t w = site.width, b = site.bottleneck;
  std::vector<double> v(flat.values().begin() + w * b,
                        flat.values().begin() + w * b + b);
  return Tensor({b}, std::move(v));
}

Tensor GeneratedPatch::up() const {
  check_patch_flat(site, flat);
  const std::size_t w = site.width, b = site.bottleneck;
  const std::size_t at = w * b + b;
  std::vector<double> v(flat.values().begin() + at,
                        flat.values().begin() + at + b * w);
  return Tensor({b, w}, std::move(v));
}

Tensor GeneratedPatch::b2() const {
  check_patch_flat(site, flat);
  const std::size_t w = site.width, b = site.bottleneck;
  const std::size_t at = w * b + b + b * w;
  std::vector<double> v(flat.values().begin() + at,
                        flat.values().begin() + at + w);
  return Tensor({w}, std::move(v));
}

Tensor GeneratedPatch::flatten(const PatchSite& site, const Tensor& down,
                               const Tensor& b1, const Tensor& up,
                               const Tensor& b2) {
  const std::size_t w = site.width, b = site.bottleneck;
  auto check = [](const Tensor& t, std::vector<std::size_t> want,
                  const char* name) {
    if (t.shape() != want)
      throw std::invalid_argument(std::string("GeneratedPatch::flatten: ") +
                                  name + " has shape " + shape_str(t.shape()) +
                                  ", expected " + shape_str(want));
  };
  check(down, {w, b}, "down");
  check(b1, {b}, "b1");
  check(up, {b, w}, "up");
  check(b2, {w}, "b2");
  std::vector<double> v;
  v.reserve(site.param_count());
  v.insert(v.end(), down.values().begin(), down.values().end());
  v.insert(v.end(), b1.values().begin(), b1.values().end());
  v.insert(v.end(), up.values().begin(), up.values().end());
  v.insert(v.end(), b2.values().begin(), b2.values().end());
  return Tensor({site.param_count()}, std::move(v));
}

BackboneLeaves bind_backbone(Tape& tape, const BackboneParams& params,
                             bool trainable) {
  BackboneLeaves l{};
  NodeId* slots[] = {&l.emb_user, &l.emb_item, &l.emb_cat, &l.attn_q,
                     &l.attn_k,   &l.attn_v,   &l.fc1_w,   &l.fc1_b,
                     &l.fc2_w,    &l.fc2_b,    &l.fc3_w,   &l.fc3_b,
                     &l.out_w,    &l.out_b};
  auto named = params.named();
  for (std::size_t i = 0; i < named.size(); ++i)
    *slots[i] = trainable ? tape.param(*named[i].second, i)
                          : tape.leaf(*named[i].second);
  return l;
}

PatchNodes make_patch_nodes(Tape& tape, const BackboneConfig& cfg,
                            std::span<const NodeId> theta_nodes,
                            PatchGate gate) {
  if (theta_nodes.size() != 3)
    throw std::invalid_argument("make_patch_nodes: need 3 per-site vectors, got " +
                                std::to_string(theta_nodes.size()));
  PatchNodes out;
  out.gate = gate;
  auto sites = patch_sites(cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    if (!gate.on[i]) continue;
    const std::size_t w = sites[i].width, b = sites[i].bottleneck;
    const Tensor& flat = tape.value(theta_nodes[i]);
    if (flat.rank() != 1 || flat.size() != sites[i].param_count())
      throw std::invalid_argument(
          "make_patch_nodes: site " + std::to_string(i) + " vector has shape " +
          shape_str(flat.shape()) + ", expected (" +
          std::to_string(sites[i].param_count()) + ")");
    PatchPieces& p = out.site[i];
    p.down = tape.reshape(tape.slice(theta_nodes[i], 0, w * b), {w, b});
    p.b1 = tape.slice(theta_nodes[i], w * b, b);
    p.up = tape.reshape(tape.slice(theta_nodes[i], w * b + b, b * w), {b, w});
    p.b2 = tape.slice(theta_nodes[i], w * b + b + b * w, w);
  }
  return out;
}

namespace {

NodeId apply_patch_node(Tape& tape, const PatchNodes* patches, std::size_t i,
                        NodeId v) {
  if (!patches || !patches->gate.on[i]) return v;
  const PatchPieces& p = patches->site[i];
  NodeId z = tape.bias_add(tape.matmul(v, p.down), p.b1);
  NodeId t = tape.tanh(z);
  NodeId o = tape.bias_add(tape.matmul(t, p.up), p.b2);
  return tape.add(v, o);
}

}  // namespace

NodeId sample_logit_node(Tape& tape, const BackboneLeaves& leaves,
                         const BackboneConfig& cfg, const PatchNodes* patches,
                         const SampleRef& s, NodeId profile_leaf) {
  const std::size_t h = s.hist_items.size();
  if (s.hist_cats.size() != h)
    throw std::invalid_argument("sample_logit_node: history arrays differ: " +
                                std::to_string(h) + " items, " +
                                std::to_string(s.hist_cats.size()) + " cats");
  if (h > cfg.max_history)
    throw std::invalid_argument("sample_logit_node: history length " +
                                std::to_string(h) + " exceeds max_history " +
                                std::to_string(cfg.max_history));

  NodeId ci = tape.reshape(
      tape.gather(leaves.emb_item, {static_cast<std::int64_t>(s.item)}),
      {cfg.item_dim});
  NodeId cc = tape.reshape(
      tape.gather(leaves.emb_cat, {static_cast<std::int64_t>(s.cat)}),
      {cfg.cat_dim});
  const NodeId cand_parts[] = {ci, cc};
  NodeId cand = tape.concat(cand_parts);
  NodeId ue = tape.reshape(
      tape.gather(leaves.emb_user, {static_cast<std::int64_t>(s.user)}),
      {cfg.user_dim});
  NodeId prof = tape.reshape(
      tape.gather(profile_leaf, {static_cast<std::int64_t>(s.user)}),
      {cfg.profile_dim});

  NodeId ctx;
  if (h == 0) {
    ctx = tape.constant(Tensor::zeros({cfg.attn_dim}));
  } else {
    std::vector<std::int64_t> hi(h), hc(h);
    for (std::size_t j = 0; j < h; ++j) {
      hi[j] = static_cast<std::int64_t>(s.hist_items[j]);
      hc[j] = static_cast<std::int64_t>(s.hist_cats[j]);
    }
    NodeId hist_i = tape.gather(leaves.emb_item, std::move(hi));
    NodeId hist_c = tape.gather(leaves.emb_cat, std::move(hc));
    const NodeId hist_parts[] = {hist_i, hist_c};
    NodeId feats = tape.concat_cols(hist_parts);
    NodeId keys = tape.matmul_bt(feats, leaves.attn_k);
    NodeId vals = tape.matmul_bt(feats, leaves.attn_v);
    NodeId query = tape.matmul(leaves.attn_q, cand);
    NodeId raw = tape.matmul(keys, query);
    NodeId scaled =
        tape.scale(raw, 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim)));
    NodeId alpha = tape.softmax(scaled);
    ctx = tape.matmul(alpha, vals);
  }

  const NodeId x_parts[] = {ue, prof, cand, ctx};
  NodeId x = tape.concat(x_parts);
  NodeId a1 =
      tape.relu(tape.bias_add(tape.matmul(x, leaves.fc1_w), leaves.fc1_b));
  a1 = apply_patch_node(tape, patches, 0, a1);
  NodeId a2 =
      tape.relu(tape.bias_add(tape.matmul(a1, leaves.fc2_w), leaves.fc2_b));
  a2 = apply_patch_node(tape, patches, 1, a2);
  NodeId a3 =
      tape.relu(tape.bias_add(tape.matmul(a2, leaves.fc3_w), leaves.fc3_b));
  a3 = apply_patch_node(tape, patches, 2, a3);
  return tape.bias_add(tape.matmul(a3, leaves.out_w), leaves.out_b);
}

Scorer::Scorer(const BackboneParams& params, const Tensor& profiles,
               std::span<const GeneratedPatch> patches, PatchGate gate)
    : p_(params), profiles_(profiles), gate_(gate) {
  params.cfg.validate();
  if (profiles.rank() != 2 || profiles.rows() != params.cfg.n_users ||
      profiles.cols() != params.cfg.profile_dim)
    throw std::invalid_argument("Scorer: profile table has shape " +
                                shape_str(profiles.shape()) + ", expected (" +
                                std::to_string(params.cfg.n_users) + "," +
                                std::to_string(params.cfg.profile_dim) + ")");
  if (!patches.empty() && patches.size() != 3)
    throw std::invalid_argument("Scorer: need 0 or 3 patches, got " +
                                std::to_string(patches.size()));
  auto sites = patch_sites(params.cfg);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].site.junction != sites[i].junction ||
        patches[i].site.width != sites[i].width ||
        patches[i].site.bottleneck != sites[i].bottleneck)
      throw std::invalid_argument("Scorer: patch " + std::to_string(i) +
                                  " does not match its site");
    check_patch_flat(patches[i].site, patches[i].flat);
    patch_[i] = &patches[i];
  }
  if (patches.empty() && gate.any())
    throw std::invalid_argument("Scorer: patch gate is on but no patches given");
}

void Scorer::project_history(std::span<const std::uint32_t> hist_items,
                             std::span<const std::uint32_t> hist_cats) {
  const BackboneConfig& cfg = p_.cfg;
  const std::size_t h = hist_items.size();
  if (hist_cats.size() != h)
    throw std::invalid_argument("Scorer: history arrays differ in length");
  if (h > cfg.max_history)
    throw std::invalid_argument("Scorer: history length " + std::to_string(h) +
                                " exceeds max_history " +
                                std::to_string(cfg.max_history));
  const std::size_t cd = cfg.cand_dim(), ad = cfg.attn_dim;
  feat_.assign(h * cd, 0.0);
  for (std::size_t j = 0; j < h; ++j) {
    if (hist_items[j] >= cfg.n_items)
      throw std::invalid_argument("Scorer: history item " +
                                  std::to_string(hist_items[j]) +
                                  " out of range");
    if (hist_cats[j] >= cfg.n_cats)
      throw std::invalid_argument("Scorer: history category " +
                                  std::to_string(hist_cats[j]) +
                                  " out of range");
    const double* ie = p_.emb_item.data() + hist_items[j] * cfg.item_dim;
    const double* ce = p_.emb_cat.data() + hist_cats[j] * cfg.cat_dim;
    for (std::size_t t = 0; t < cfg.item_dim; ++t) feat_[j * cd + t] = ie[t];
    for (std::size_t t = 0; t < cfg.cat_dim; ++t)
      feat_[j * cd + cfg.item_dim + t] = ce[t];
  }
  k_.assign(h * ad, 0.0);
  v_.assign(h * ad, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ad; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < cd; ++t)
        s += feat_[i * cd + t] * p_.attn_k[j * cd + t];
      k_[i * ad + j] = s;
    }
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ad; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < cd; ++t)
        s += feat_[i * cd + t] * p_.attn_v[j * cd + t];
      v_[i * ad + j] = s;
    }
}

void Scorer::apply_patch(std::size_t site_idx, std::vector<double>& v) {
  if (!gate_.on[site_idx] || !patch_[site_idx]) return;
  const GeneratedPatch& gp = *patch_[site_idx];
  const std::size_t w = gp.site.width, b = gp.site.bottleneck;
  const double* flat = gp.flat.data();
  const double* down = flat;
  const double* b1 = flat + w * b;
  const double* up = b1 + b;
  const double* b2 = up + b * w;
  z_.assign(b, 0.0);
  for (std::size_t r = 0; r < w; ++r) {
    const double vr = v[r];
    for (std::size_t c = 0; c < b; ++c) z_[c] += vr * down[r * b + c];
  }
  t_.assign(b, 0.0);
  for (std::size_t c = 0; c < b; ++c) t_[c] = std::tanh(z_[c] + b1[c]);
  o_.assign(w, 0.0);
  for (std::size_t r = 0; r < b; ++r) {
    const double tr = t_[r];
    for (std::size_t c = 0; c < w; ++c) o_[c] += tr * up[r * w + c];
  }
  for (std::size_t c = 0; c < w; ++c) v[c] = v[c] + (o_[c] + b2[c]);
}

double Scorer::candidate_logit(std::uint32_t user, std::uint32_t item,
                               std::uint32_t cat, std::size_t hist_len) {
  const BackboneConfig& cfg = p_.cfg;
  if (user >= cfg.n_users)
    throw std::invalid_argument("Scorer: user " + std::to_string(user) +
                                " out of range");
  if (item >= cfg.n_items)
    throw std::invalid_argument("Scorer: item " + std::to_string(item) +
                                " out of range");
  if (cat >= cfg.n_cats)
    throw std::invalid_argument("Scorer: category " + std::to_string(cat) +
                                " out of range");
  const std::size_t cd = cfg.cand_dim(), ad = cfg.attn_dim;

  cand_.assign(cd, 0.0);
  {
    const double* ie = p_.emb_item.data() + item * cfg.item_dim;
    const double* ce = p_.emb_cat.data() + cat * cfg.cat_dim;
    for (std::size_t t = 0; t < cfg.item_dim; ++t) cand_[t] = ie[t];
    for (std::size_t t = 0; t < cfg.cat_dim; ++t) cand_[cfg.item_dim + t] = ce[t];
  }

  ctx_.assign(ad, 0.0);
  if (hist_len > 0) {
    q_.assign(ad, 0.0);
    for (std::size_t i = 0; i < ad; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < cd; ++t) s += p_.attn_q[i * cd + t] * cand_[t];
      q_[i] = s;
    }
    scores_.assign(hist_len, 0.0);
    const double inv = 1.0 / std::sqrt(static_cast<double>(ad));
    for (std::size_t i = 0; i < hist_len; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < ad; ++t) s += k_[i * ad + t] * q_[t];
      scores_[i] = s * inv;
    }
    alpha_.assign(hist_len, 0.0);
    double mx = scores_[0];
    for (std::size_t i = 1; i < hist_len; ++i) mx = std::max(mx, scores_[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < hist_len; ++i) {
      alpha_[i] = std::exp(scores_[i] - mx);
      sum += alpha_[i];
    }
    for (std::size_t i = 0; i < hist_len; ++i) alpha_[i] /= sum;
    for (std::size_t t = 0; t < hist_len; ++t) {
      const double av = alpha_[t];
      for (std::size_t j = 0; j < ad; ++j) ctx_[j] += av * v_[t * ad + j];
    }
  }

  x_.assign(cfg.tower_in(), 0.0);
  {
    std::size_t at = 0;
    const double* ue = p_.emb_user.data() + user * cfg.user_dim;
    for (std::size_t t = 0; t < cfg.user_dim; ++t) x_[at++] = ue[t];
    const double* pr = profiles_.data() + user * cfg.profile_dim;
    for (std::size_t t = 0; t < cfg.profile_dim; ++t) x_[at++] = pr[t];
    for (std::size_t t = 0; t < cd; ++t) x_[at++] = cand_[t];
    for (std::size_t t = 0; t < ad; ++t) x_[at++] = ctx_[t];
  }

  auto dense = [](const std::vector<double>& in, const Tensor& w,
                  const Tensor& b, bool relu_act, std::vector<double>& out) {
    const std::size_t rows = w.rows(), cols = w.cols();
    out.assign(cols, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
      const double xv = in[t];
      for (std::size_t j = 0; j < cols; ++j) out[j] += xv * w[t * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const double s = out[j] + b[j];
      out[j] = relu_act ? (s > 0.0 ? s : 0.0) : s;
    }
  };

  dense(x_, p_.fc1_w, p_.fc1_b, true, h_);
  apply_patch(0, h_);
  std::vector<double> tmp;
  dense(h_, p_.fc2_w, p_.fc2_b, true, tmp);
  h_.swap(tmp);
  apply_patch(1, h_);
  dense(h_, p_.fc3_w, p_.fc3_b, true, tmp);
  h_.swap(tmp);
  apply_patch(2, h_);
  dense(h_, p_.out_w, p_.out_b, false, tmp);
  return tmp[0];
}

double Scorer::logit(const SampleRef& s) {
  project_history(s.hist_items, s.hist_cats);
  return candidate_logit(s.user, s.item, s.cat, s.hist_items.size());
}

double Scorer::prob(const SampleRef& s) { return sigmoid_scalar(logit(s)); }

void Scorer::score_candidates(std::uint32_t user,
                              std::span<const std::uint32_t> hist_items,
                              std::span<const std::uint32_t> hist_cats,
                              std::span<const std::uint32_t> items,
                              std::span<const std::uint32_t> cats,
                              std::span<double> out_probs) {
  if (items.size() != cats.size() || items.size() != out_probs.size())
    throw std::invalid_argument(
        "Scorer::score_candidates: items, cats and output lengths differ");
  project_history(hist_items, hist_cats);
  for (std::size_t i = 0; i < items.size(); ++i)
    out_probs[i] = sigmoid_scalar(
        candidate_logit(user, items[i], cats[i], hist_items.size()));
}

}  // namespace dccl
