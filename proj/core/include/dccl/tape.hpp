#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dccl/tensor.hpp"

namespace dccl {

// Reverse-mode autodiff over a linear tape. A tape records one forward pass;
// backward() walks it once in reverse. Tapes are cheap to reset and reuse,
// and a tape is only ever touched by one thread at a time.

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,      // (m,k)x(k,n)->(m,n), (m,k)x(k)->(m), (k)x(k,n)->(n)
  kMatmulBt,    // a x b^T: (m,k)x(n,k)->(m,n), (k)x(n,k)->(n)
  kAdd,
  kBiasAdd,     // (m,n)+(n) or (n)+(n) row broadcast
  kConcat,      // rank-1 inputs, in order
  kConcatCols,  // rank-2 inputs with equal rows, side by side
  kSlice,       // contiguous rank-1 slice
  kReshape,
  kTanh,
  kRelu,
  kSigmoid,
  kSoftmax,     // rank-1
  kGather,      // rows of a rank-2 table
  kReduceMean,  // any rank -> scalar
  kScale,       // elementwise * constant
  kMul,         // elementwise, same shape
  kSigmoidCe,   // per-element sigmoid cross-entropy against fixed labels
  kBernoulliKl, // per-element KL(target || sigmoid(logit)) against fixed probs
};

const char* op_name(Op op);

using NodeId = std::uint32_t;

inline constexpr std::size_t kNoParam = ~std::size_t{0};

struct TapeNode {
  Op op = Op::kLeaf;
  NodeId a = 0;
  NodeId b = 0;
  std::vector<NodeId> ins;       // kConcat only
  std::size_t param = kNoParam;  // trainable slot for kLeaf
  const Tensor* ext = nullptr;   // kLeaf borrows its value
  Tensor value;                  // computed nodes own their value
  Tensor grad;
  bool needs_grad = false;
  double c = 0.0;                     // kScale factor
  std::size_t offset = 0;             // kSlice start
  std::vector<std::int64_t> indices;  // kGather rows
  std::vector<double> target;         // kSigmoidCe labels / kBernoulliKl probs
};

// Accumulates parameter gradients keyed by trainable slot. Ordered iteration
// keeps optimizer updates deterministic.
class GradMap {
public:
  Tensor& slot(std::size_t param, const std::vector<std::size_t>& shape);
  const Tensor* find(std::size_t param) const;
  void add(const GradMap& other);  // elementwise accumulate
  void clear() { slots_.clear(); }
  auto begin() const { return slots_.begin(); }
  auto end() const { return slots_.end(); }
  std::size_t size() const { return slots_.size(); }

private:
  std::map<std::size_t, Tensor> slots_;
};

class Tape {
public:
  // Leaves. Constant leaves never receive gradients; param leaves route
  // their gradient into the GradMap slot given by `param`. The tensor must
  // outlive the pass.
  NodeId leaf(const Tensor& v);
  NodeId param(const Tensor& v, std::size_t param_slot);
  // Constant leaf that owns its value; for temporaries with no stable home.
  NodeId constant(Tensor v);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_bt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId bias_add(NodeId x, NodeId bias);
  NodeId concat(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId slice(NodeId a, std::size_t offset, std::size_t count);
  NodeId reshape(NodeId a, std::vector<std::size_t> shape);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId softmax(NodeId a);
  NodeId gather(NodeId table, std::vector<std::int64_t> rows);
  NodeId reduce_mean(NodeId a);
  NodeId scale(NodeId a, double c);
  NodeId mul(NodeId a, NodeId b);
  NodeId sigmoid_ce(NodeId logits, std::vector<double> labels);
  NodeId bernoulli_kl(NodeId logits, std::vector<double> teacher_probs);

  const Tensor& value(NodeId id) const;

  // Seeds d(loss)/d(loss) = 1 and accumulates parameter gradients into
  // `grads`. `loss` must be scalar. Each node is visited exactly once.
  void backward(NodeId loss, GradMap& grads);

  // Forgets all nodes but keeps their buffers for reuse.
  void reset();
  std::size_t size() const { return live_; }

private:
  TapeNode& push(Op op, NodeId a, NodeId b, std::vector<std::size_t> shape);
  NodeId check_node(NodeId id, const char* who) const;
  const Tensor& val(const TapeNode& n) const {
    return n.ext ? *n.ext : n.value;
  }

  std::vector<TapeNode> nodes_;
  std::size_t live_ = 0;
};

}  // namespace dccl
