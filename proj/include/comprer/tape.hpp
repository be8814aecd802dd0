#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "comprer/array.hpp"

namespace comprer {

enum class OpKind {
  constant,
  parameter,
  matmul,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  exp,
  log,
  gelu,
  sum,
  mean,
  row_l2_normalize,
  transpose,
  diagonal,
  row_logsumexp,
  reshape,
  concat_rows,
  slice_rows,
  add_rows_tiled,
  layer_norm,
  self_attention,
  group_mean,
  transposed_conv2d,
  add_channel_bias,
};

const char* op_name(OpKind kind);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar root with respect to every parameter leaf of a tape.
class Gradients {
 public:
  /// Throws ContractError if v is not a parameter of the differentiated tape.
  const Array& operator[](Var v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Array> grads_;
};

/// Records forward operations in topological order so backward() can replay
/// them once in reverse. One tape per forward pass; tapes share no state.
class Tape {
 public:
  /// Propagates `grad` (d root / d node `self`) into the node's inputs via
  /// accumulate().
  using BackwardFn = std::function<void(Tape& tape, std::size_t self, const Array& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var parameter(Array value);

  /// Appends an op node. The value must be finite; NaN/Inf raises NumericError.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Array value, BackwardFn backward);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds a gradient contribution for node `id`; no-op for nodes that do not
  /// require gradients. Only meaningful inside backward().
  void accumulate(std::size_t id, Array grad);

  Gradients backward(Var root);

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Array value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::optional<Array>> grads_;
};

inline const Array& Var::value() const { return tape_->value(id_); }

}  // namespace comprer
