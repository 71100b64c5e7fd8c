#include "dccl/tape.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dccl/mathutil.hpp"

namespace dccl {
namespace {

constexpr double kProbEps = 1e-7;

[[noreturn]] void fail(const char* who, const std::string& what) {
  throw std::invalid_argument(std::string(who) + ": " + what);
}

std::string two_shapes(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kMatmulBt: return "matmul_bt";
    case Op::kAdd: return "add";
    case Op::kBiasAdd: return "bias_add";
    case Op::kConcat: return "concat";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmax: return "softmax";
    case Op::kGather: return "gather";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kScale: return "scale";
    case Op::kMul: return "mul";
    case Op::kSigmoidCe: return "sigmoid_ce";
    case Op::kBernoulliKl: return "bernoulli_kl";
  }
  return "?";
}

Tensor& GradMap::slot(std::size_t param, const std::vector<std::size_t>& shape) {
  auto it = slots_.find(param);
  if (it == slots_.end())
    it = slots_.emplace(param, Tensor::zeros(shape)).first;
  else if (it->second.shape() != shape)
    fail("GradMap::slot", "shape changed for parameter slot " + std::to_string(param));
  return it->second;
}

const Tensor* GradMap::find(std::size_t param) const {
  auto it = slots_.find(param);
  return it == slots_.end() ? nullptr : &it->second;
}

void GradMap::add(const GradMap& other) {
  for (const auto& [param, g] : other) {
    Tensor& dst = slot(param, g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

NodeId Tape::check_node(NodeId id, const char* who) const {
  if (id >= live_)
    fail(who, "node id " + std::to_string(id) + " is not on this tape");
  return id;
}

TapeNode& Tape::push(Op op, NodeId a, NodeId b, std::vector<std::size_t> shape) {
  if (live_ == nodes_.size()) nodes_.emplace_back();
  TapeNode& n = nodes_[live_];
  n.op = op;
  n.a = a;
  n.b = b;
  n.ins.clear();
  n.param = kNoParam;
  n.ext = nullptr;
  n.value.reinit(shape);
  n.needs_grad = false;
  n.c = 0.0;
  n.offset = 0;
  n.indices.clear();
  n.target.clear();
  ++live_;
  return n;
}

NodeId Tape::leaf(const Tensor& v) {
  if (live_ == nodes_.size()) nodes_.emplace_back();
  TapeNode& n = nodes_[live_];
  n.op = Op::kLeaf;
  n.a = n.b = 0;
  n.ins.clear();
  n.param = kNoParam;
  n.ext = &v;
  n.needs_grad = false;
  n.indices.clear();
  n.target.clear();
  return static_cast<NodeId>(live_++);
}

NodeId Tape::param(const Tensor& v, std::size_t param_slot) {
  if (param_slot == kNoParam)
    fail("Tape::param", "invalid parameter slot");
  NodeId id = leaf(v);
  nodes_[id].param = param_slot;
  nodes_[id].needs_grad = true;
  return id;
}

NodeId Tape::constant(Tensor v) {
  if (live_ == nodes_.size()) nodes_.emplace_back();
  TapeNode& n = nodes_[live_];
  n.op = Op::kLeaf;
  n.a = n.b = 0;
  n.ins.clear();
  n.param = kNoParam;
  n.ext = nullptr;
  n.value = std::move(v);
  n.needs_grad = false;
  n.indices.clear();
  n.target.clear();
  return static_cast<NodeId>(live_++);
}

const Tensor& Tape::value(NodeId id) const {
  check_node(id, "Tape::value");
  return val(nodes_[id]);
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  check_node(a, "matmul");
  check_node(b, "matmul");
  const Tensor& A = val(nodes_[a]);
  const Tensor& B = val(nodes_[b]);
  std::vector<std::size_t> out_shape;
  if (A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows())
    out_shape = {A.rows(), B.cols()};
  else if (A.rank() == 2 && B.rank() == 1 && A.cols() == B.size())
    out_shape = {A.rows()};
  else if (A.rank() == 1 && B.rank() == 2 && A.size() == B.rows())
    out_shape = {B.cols()};
  else
    fail("matmul", "incompatible shapes " + two_shapes(A, B));
  NodeId a_id = a, b_id = b;
  TapeNode& n = push(Op::kMatmul, a_id, b_id, out_shape);
  n.needs_grad = nodes_[a_id].needs_grad || nodes_[b_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  const Tensor& Bv = val(nodes_[b_id]);
  Tensor& C = n.value;
  C.fill(0.0);
  if (Av.rank() == 2 && Bv.rank() == 2) {
    const std::size_t m = Av.rows(), k = Av.cols(), p = Bv.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        const double av = Av[i * k + t];
        for (std::size_t j = 0; j < p; ++j)
          C[i * p + j] += av * Bv[t * p + j];
      }
  } else if (Av.rank() == 2) {
    const std::size_t m = Av.rows(), k = Av.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += Av[i * k + t] * Bv[t];
      C[i] = s;
    }
  } else {
    const std::size_t k = Bv.rows(), p = Bv.cols();
    for (std::size_t t = 0; t < k; ++t) {
      const double av = Av[t];
      for (std::size_t j = 0; j < p; ++j) C[j] += av * Bv[t * p + j];
    }
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::matmul_bt(NodeId a, NodeId b) {
  check_node(a, "matmul_bt");
  check_node(b, "matmul_bt");
  const Tensor& A = val(nodes_[a]);
  const Tensor& B = val(nodes_[b]);
  if (B.rank() != 2)
    fail("matmul_bt", "right operand must be rank 2, got " + shape_str(B.shape()));
  std::vector<std::size_t> out_shape;
  if (A.rank() == 2 && A.cols() == B.cols())
    out_shape = {A.rows(), B.rows()};
  else if (A.rank() == 1 && A.size() == B.cols())
    out_shape = {B.rows()};
  else
    fail("matmul_bt", "incompatible shapes " + two_shapes(A, B));
  NodeId a_id = a, b_id = b;
  TapeNode& n = push(Op::kMatmulBt, a_id, b_id, out_shape);
  n.needs_grad = nodes_[a_id].needs_grad || nodes_[b_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  const Tensor& Bv = val(nodes_[b_id]);
  Tensor& C = n.value;
  const std::size_t k = Bv.cols(), nr = Bv.rows();
  if (Av.rank() == 2) {
    const std::size_t m = Av.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < nr; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += Av[i * k + t] * Bv[j * k + t];
        C[i * nr + j] = s;
      }
  } else {
    for (std::size_t j = 0; j < nr; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += Av[t] * Bv[j * k + t];
      C[j] = s;
    }
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_node(a, "add");
  check_node(b, "add");
  const Tensor& A = val(nodes_[a]);
  const Tensor& B = val(nodes_[b]);
  if (!A.same_shape(B))
    fail("add", "shape mismatch " + two_shapes(A, B));
  NodeId a_id = a, b_id = b;
  TapeNode& n = push(Op::kAdd, a_id, b_id, A.shape());
  n.needs_grad = nodes_[a_id].needs_grad || nodes_[b_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  const Tensor& Bv = val(nodes_[b_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = Av[i] + Bv[i];
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::bias_add(NodeId x, NodeId bias) {
  check_node(x, "bias_add");
  check_node(bias, "bias_add");
  const Tensor& X = val(nodes_[x]);
  const Tensor& B = val(nodes_[bias]);
  if (B.rank() != 1)
    fail("bias_add", "bias must be rank 1, got " + shape_str(B.shape()));
  if (X.rank() == 1) {
    if (X.size() != B.size())
      fail("bias_add", "shape mismatch " + two_shapes(X, B));
  } else if (X.rank() == 2) {
    if (X.cols() != B.size())
      fail("bias_add", "shape mismatch " + two_shapes(X, B));
  } else {
    fail("bias_add", "input must be rank 1 or 2, got " + shape_str(X.shape()));
  }
  NodeId x_id = x, b_id = bias;
  TapeNode& n = push(Op::kBiasAdd, x_id, b_id, X.shape());
  n.needs_grad = nodes_[x_id].needs_grad || nodes_[b_id].needs_grad;
  const Tensor& Xv = val(nodes_[x_id]);
  const Tensor& Bv = val(nodes_[b_id]);
  const std::size_t cols = Bv.size();
  for (std::size_t i = 0; i < Xv.size(); ++i)
    n.value[i] = Xv[i] + Bv[i % cols];
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::concat(std::span<const NodeId> parts) {
  if (parts.empty()) fail("concat", "no inputs");
  std::size_t total = 0;
  for (NodeId id : parts) {
    check_node(id, "concat");
    const Tensor& t = val(nodes_[id]);
    if (t.rank() != 1)
      fail("concat", "inputs must be rank 1, got " + shape_str(t.shape()));
    total += t.size();
  }
  std::vector<NodeId> ins(parts.begin(), parts.end());
  TapeNode& n = push(Op::kConcat, 0, 0, {total});
  n.ins = std::move(ins);
  std::size_t at = 0;
  for (NodeId id : n.ins) {
    const Tensor& t = val(nodes_[id]);
    n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
    for (std::size_t i = 0; i < t.size(); ++i) n.value[at++] = t[i];
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) fail("concat_cols", "no inputs");
  std::size_t rows = 0, total_cols = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    check_node(parts[i], "concat_cols");
    const Tensor& t = val(nodes_[parts[i]]);
    if (t.rank() != 2)
      fail("concat_cols", "inputs must be rank 2, got " + shape_str(t.shape()));
    if (i == 0)
      rows = t.rows();
    else if (t.rows() != rows)
      fail("concat_cols", "row count mismatch: " + std::to_string(t.rows()) +
                              " vs " + std::to_string(rows));
    total_cols += t.cols();
  }
  std::vector<NodeId> ins(parts.begin(), parts.end());
  TapeNode& n = push(Op::kConcatCols, 0, 0, {rows, total_cols});
  n.ins = std::move(ins);
  std::size_t col_at = 0;
  for (NodeId id : n.ins) {
    const Tensor& t = val(nodes_[id]);
    n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
    const std::size_t c = t.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j)
        n.value[r * total_cols + col_at + j] = t[r * c + j];
    col_at += c;
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::slice(NodeId a, std::size_t offset, std::size_t count) {
  check_node(a, "slice");
  const Tensor& A = val(nodes_[a]);
  if (A.rank() != 1)
    fail("slice", "input must be rank 1, got " + shape_str(A.shape()));
  if (offset + count > A.size()) {
    std::ostringstream os;
    os << "range [" << offset << ", " << offset + count << ") out of bounds for "
       << shape_str(A.shape());
    fail("slice", os.str());
  }
  NodeId a_id = a;
  TapeNode& n = push(Op::kSlice, a_id, 0, {count});
  n.offset = offset;
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < count; ++i) n.value[i] = Av[offset + i];
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::reshape(NodeId a, std::vector<std::size_t> shape) {
  check_node(a, "reshape");
  const Tensor& A = val(nodes_[a]);
  if (shape_size(shape) != A.size())
    fail("reshape", "cannot reshape " + shape_str(A.shape()) + " to " + shape_str(shape));
  NodeId a_id = a;
  TapeNode& n = push(Op::kReshape, a_id, 0, shape);
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = Av[i];
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::tanh(NodeId a) {
  check_node(a, "tanh");
  NodeId a_id = a;
  TapeNode& n = push(Op::kTanh, a_id, 0, val(nodes_[a_id]).shape());
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = std::tanh(Av[i]);
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::relu(NodeId a) {
  check_node(a, "relu");
  NodeId a_id = a;
  TapeNode& n = push(Op::kRelu, a_id, 0, val(nodes_[a_id]).shape());
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < Av.size(); ++i)
    n.value[i] = Av[i] > 0.0 ? Av[i] : 0.0;
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::sigmoid(NodeId a) {
  check_node(a, "sigmoid");
  NodeId a_id = a;
  TapeNode& n = push(Op::kSigmoid, a_id, 0, val(nodes_[a_id]).shape());
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = sigmoid_scalar(Av[i]);
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::softmax(NodeId a) {
  check_node(a, "softmax");
  const Tensor& A = val(nodes_[a]);
  if (A.rank() != 1 || A.size() == 0)
    fail("softmax", "input must be non-empty rank 1, got " + shape_str(A.shape()));
  NodeId a_id = a;
  TapeNode& n = push(Op::kSoftmax, a_id, 0, A.shape());
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  double mx = Av[0];
  for (std::size_t i = 1; i < Av.size(); ++i) mx = std::max(mx, Av[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < Av.size(); ++i) {
    n.value[i] = std::exp(Av[i] - mx);
    sum += n.value[i];
  }
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] /= sum;
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::gather(NodeId table, std::vector<std::int64_t> rows) {
  check_node(table, "gather");
  const Tensor& T = val(nodes_[table]);
  if (T.rank() != 2)
    fail("gather", "table must be rank 2, got " + shape_str(T.shape()));
  const auto n_rows = static_cast<std::int64_t>(T.rows());
  for (std::int64_t r : rows) {
    if (r < 0 || r >= n_rows) {
      std::ostringstream os;
      os << "row " << r << " out of range for table with " << n_rows << " rows";
      fail("gather", os.str());
    }
  }
  NodeId t_id = table;
  const std::size_t k = rows.size(), d = T.cols();
  TapeNode& n = push(Op::kGather, t_id, 0, {k, d});
  n.indices = std::move(rows);
  n.needs_grad = nodes_[t_id].needs_grad;
  const Tensor& Tv = val(nodes_[t_id]);
  for (std::size_t i = 0; i < k; ++i) {
    const auto r = static_cast<std::size_t>(n.indices[i]);
    for (std::size_t j = 0; j < d; ++j) n.value[i * d + j] = Tv[r * d + j];
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::reduce_mean(NodeId a) {
  check_node(a, "reduce_mean");
  const Tensor& A = val(nodes_[a]);
  if (A.size() == 0) fail("reduce_mean", "input is empty");
  NodeId a_id = a;
  TapeNode& n = push(Op::kReduceMean, a_id, 0, {});
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  double s = 0.0;
  for (std::size_t i = 0; i < Av.size(); ++i) s += Av[i];
  n.value[0] = s / static_cast<double>(Av.size());
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::scale(NodeId a, double c) {
  check_node(a, "scale");
  NodeId a_id = a;
  TapeNode& n = push(Op::kScale, a_id, 0, val(nodes_[a_id]).shape());
  n.c = c;
  n.needs_grad = nodes_[a_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = Av[i] * c;
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_node(a, "mul");
  check_node(b, "mul");
  const Tensor& A = val(nodes_[a]);
  const Tensor& B = val(nodes_[b]);
  if (!A.same_shape(B))
    fail("mul", "shape mismatch " + two_shapes(A, B));
  NodeId a_id = a, b_id = b;
  TapeNode& n = push(Op::kMul, a_id, b_id, A.shape());
  n.needs_grad = nodes_[a_id].needs_grad || nodes_[b_id].needs_grad;
  const Tensor& Av = val(nodes_[a_id]);
  const Tensor& Bv = val(nodes_[b_id]);
  for (std::size_t i = 0; i < Av.size(); ++i) n.value[i] = Av[i] * Bv[i];
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::sigmoid_ce(NodeId logits, std::vector<double> labels) {
  check_node(logits, "sigmoid_ce");
  const Tensor& Z = val(nodes_[logits]);
  if (Z.rank() != 1)
    fail("sigmoid_ce", "logits must be rank 1, got " + shape_str(Z.shape()));
  if (Z.size() != labels.size())
    fail("sigmoid_ce", std::to_string(labels.size()) + " labels for " +
                           std::to_string(Z.size()) + " logits");
  for (double y : labels)
    if (y < 0.0 || y > 1.0)
      fail("sigmoid_ce", "label " + std::to_string(y) + " outside [0,1]");
  NodeId z_id = logits;
  TapeNode& n = push(Op::kSigmoidCe, z_id, 0, Z.shape());
  n.target = std::move(labels);
  n.needs_grad = nodes_[z_id].needs_grad;
  const Tensor& Zv = val(nodes_[z_id]);
  for (std::size_t i = 0; i < Zv.size(); ++i) {
    const double z = Zv[i];
    n.value[i] = std::max(z, 0.0) - z * n.target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return static_cast<NodeId>(live_ - 1);
}

NodeId Tape::bernoulli_kl(NodeId logits, std::vector<double> teacher_probs) {
  check_node(logits, "bernoulli_kl");
  const Tensor& Z = val(nodes_[logits]);
  if (Z.rank() != 1)
    fail("bernoulli_kl", "logits must be rank 1, got " + shape_str(Z.shape()));
  if (Z.size() != teacher_probs.size())
    fail("bernoulli_kl", std::to_string(teacher_probs.size()) + " probs for " +
                             std::to_string(Z.size()) + " logits");
  for (double& p : teacher_probs) {
    if (!std::isfinite(p))
      fail("bernoulli_kl", "non-finite teacher probability");
    p = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
  }
  NodeId z_id = logits;
  TapeNode& n = push(Op::kBernoulliKl, z_id, 0, Z.shape());
  n.target = std::move(teacher_probs);
  n.needs_grad = nodes_[z_id].needs_grad;
  const Tensor& Zv = val(nodes_[z_id]);
  for (std::size_t i = 0; i < Zv.size(); ++i) {
    const double z = Zv[i];
    const double p = n.target[i];
    // KL(p || sigmoid(z)) with log(q) = -softplus(-z), log(1-q) = -softplus(z).
    n.value[i] = p * std::log(p) + (1.0 - p) * std::log(1.0 - p) +
                 p * softplus_scalar(-z) + (1.0 - p) * softplus_scalar(z);
  }
  return static_cast<NodeId>(live_ - 1);
}

void Tape::reset() { live_ = 0; }

void Tape::backward(NodeId loss, GradMap& grads) {
  check_node(loss, "backward");
  if (!val(nodes_[loss]).shape().empty())
    fail("backward", "loss must be scalar, got " +
                         shape_str(val(nodes_[loss]).shape()));

  // Degenerate graph: the loss is itself a leaf.
  if (nodes_[loss].op == Op::kLeaf) {
    if (nodes_[loss].param != kNoParam)
      grads.slot(nodes_[loss].param, val(nodes_[loss]).shape())[0] += 1.0;
    return;
  }

  for (std::size_t i = 0; i <= loss; ++i) {
    TapeNode& n = nodes_[i];
    if (n.op == Op::kLeaf || !n.needs_grad) continue;
    n.grad.reinit(val(n).shape());
    n.grad.fill(0.0);
  }
  nodes_[loss].grad[0] = 1.0;

  auto grad_of = [&](NodeId id) -> Tensor* {
    TapeNode& n = nodes_[id];
    if (n.op == Op::kLeaf) {
      if (n.param == kNoParam) return nullptr;
      return &grads.slot(n.param, val(n).shape());
    }
    return n.needs_grad ? &n.grad : nullptr;
  };

  for (std::size_t idx = loss + 1; idx-- > 0;) {
    TapeNode& n = nodes_[idx];
    if (n.op == Op::kLeaf || !n.needs_grad) continue;
    const Tensor& d = n.grad;
    switch (n.op) {
      case Op::kMatmul: {
        const Tensor& A = val(nodes_[n.a]);
        const Tensor& B = val(nodes_[n.b]);
        Tensor* da = grad_of(n.a);
        Tensor* db = grad_of(n.b);
        if (A.rank() == 2 && B.rank() == 2) {
          const std::size_t m = A.rows(), k = A.cols(), p = B.cols();
          if (da)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t t = 0; t < k; ++t) {
                double s = 0.0;
                for (std::size_t j = 0; j < p; ++j)
                  s += d[i * p + j] * B[t * p + j];
                (*da)[i * k + t] += s;
              }
          if (db)
            for (std::size_t t = 0; t < k; ++t)
              for (std::size_t j = 0; j < p; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                  s += A[i * k + t] * d[i * p + j];
                (*db)[t * p + j] += s;
              }
        } else if (A.rank() == 2) {
          const std::size_t m = A.rows(), k = A.cols();
          if (da)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t t = 0; t < k; ++t)
                (*da)[i * k + t] += d[i] * B[t];
          if (db)
            for (std::size_t t = 0; t < k; ++t) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i) s += A[i * k + t] * d[i];
              (*db)[t] += s;
            }
        } else {
          const std::size_t k = B.rows(), p = B.cols();
          if (da)
            for (std::size_t t = 0; t < k; ++t) {
              double s = 0.0;
              for (std::size_t j = 0; j < p; ++j) s += d[j] * B[t * p + j];
              (*da)[t] += s;
            }
          if (db)
            for (std::size_t t = 0; t < k; ++t)
              for (std::size_t j = 0; j < p; ++j)
                (*db)[t * p + j] += A[t] * d[j];
        }
        break;
      }
      case Op::kMatmulBt: {
        const Tensor& A = val(nodes_[n.a]);
        const Tensor& B = val(nodes_[n.b]);
        Tensor* da = grad_of(n.a);
        Tensor* db = grad_of(n.b);
        const std::size_t k = B.cols(), nr = B.rows();
        if (A.rank() == 2) {
          const std::size_t m = A.rows();
          if (da)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t t = 0; t < k; ++t) {
                double s = 0.0;
                for (std::size_t j = 0; j < nr; ++j)
                  s += d[i * nr + j] * B[j * k + t];
                (*da)[i * k + t] += s;
              }
          if (db)
            for (std::size_t j = 0; j < nr; ++j)
              for (std::size_t t = 0; t < k; ++t) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                  s += d[i * nr + j] * A[i * k + t];
                (*db)[j * k + t] += s;
              }
        } else {
          if (da)
            for (std::size_t t = 0; t < k; ++t) {
              double s = 0.0;
              for (std::size_t j = 0; j < nr; ++j) s += d[j] * B[j * k + t];
              (*da)[t] += s;
            }
          if (db)
            for (std::size_t j = 0; j < nr; ++j)
              for (std::size_t t = 0; t < k; ++t)
                (*db)[j * k + t] += d[j] * A[t];
        }
        break;
      }
      case Op::kAdd: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i];
        if (Tensor* db = grad_of(n.b))
          for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] += d[i];
        break;
      }
      case Op::kBiasAdd: {
        if (Tensor* dx = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i) (*dx)[i] += d[i];
        if (Tensor* db = grad_of(n.b)) {
          const std::size_t cols = db->size();
          for (std::size_t i = 0; i < d.size(); ++i) (*db)[i % cols] += d[i];
        }
        break;
      }
      case Op::kConcat: {
        std::size_t at = 0;
        for (NodeId id : n.ins) {
          const std::size_t len = val(nodes_[id]).size();
          if (Tensor* di = grad_of(id))
            for (std::size_t i = 0; i < len; ++i) (*di)[i] += d[at + i];
          at += len;
        }
        break;
      }
      case Op::kConcatCols: {
        const std::size_t total_cols = val(n).cols();
        const std::size_t rows = val(n).rows();
        std::size_t col_at = 0;
        for (NodeId id : n.ins) {
          const std::size_t c = val(nodes_[id]).cols();
          if (Tensor* di = grad_of(id))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < c; ++j)
                (*di)[r * c + j] += d[r * total_cols + col_at + j];
          col_at += c;
        }
        break;
      }
      case Op::kSlice: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            (*da)[n.offset + i] += d[i];
        break;
      }
      case Op::kReshape: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i];
        break;
      }
      case Op::kTanh: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            (*da)[i] += d[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kRelu: {
        const Tensor& A = val(nodes_[n.a]);
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            if (A[i] > 0.0) (*da)[i] += d[i];
        break;
      }
      case Op::kSigmoid: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            (*da)[i] += d[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::kSoftmax: {
        if (Tensor* da = grad_of(n.a)) {
          double dot = 0.0;
          for (std::size_t i = 0; i < d.size(); ++i) dot += d[i] * n.value[i];
          for (std::size_t i = 0; i < d.size(); ++i)
            (*da)[i] += n.value[i] * (d[i] - dot);
        }
        break;
      }
      case Op::kGather: {
        if (Tensor* dt = grad_of(n.a)) {
          const std::size_t cols = val(nodes_[n.a]).cols();
          for (std::size_t i = 0; i < n.indices.size(); ++i) {
            const auto r = static_cast<std::size_t>(n.indices[i]);
            for (std::size_t j = 0; j < cols; ++j)
              (*dt)[r * cols + j] += d[i * cols + j];
          }
        }
        break;
      }
      case Op::kReduceMean: {
        if (Tensor* da = grad_of(n.a)) {
          const double g = d[0] / static_cast<double>(da->size());
          for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g;
        }
        break;
      }
      case Op::kScale: {
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * n.c;
        break;
      }
      case Op::kMul: {
        const Tensor& A = val(nodes_[n.a]);
        const Tensor& B = val(nodes_[n.b]);
        if (Tensor* da = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * B[i];
        if (Tensor* db = grad_of(n.b))
          for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] += d[i] * A[i];
        break;
      }
      case Op::kSigmoidCe: {
        const Tensor& Z = val(nodes_[n.a]);
        if (Tensor* dz = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            (*dz)[i] += d[i] * (sigmoid_scalar(Z[i]) - n.target[i]);
        break;
      }
      case Op::kBernoulliKl: {
        const Tensor& Z = val(nodes_[n.a]);
        if (Tensor* dz = grad_of(n.a))
          for (std::size_t i = 0; i < d.size(); ++i)
            (*dz)[i] += d[i] * (sigmoid_scalar(Z[i]) - n.target[i]);
        break;
      }
      case Op::kLeaf:
        break;
    }
  }
}

}  // namespace dccl
