#include "comprer/tape.hpp"

namespace comprer {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::gelu: return "gelu";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::row_l2_normalize: return "row_l2_normalize";
    case OpKind::transpose: return "transpose";
    case OpKind::diagonal: return "diagonal";
    case OpKind::row_logsumexp: return "row_logsumexp";
    case OpKind::reshape: return "reshape";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::add_rows_tiled: return "add_rows_tiled";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::self_attention: return "self_attention";
    case OpKind::group_mean: return "group_mean";
    case OpKind::transposed_conv2d: return "transposed_conv2d";
    case OpKind::add_channel_bias: return "add_channel_bias";
  }
  return "unknown";
}

const Array& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id());
  if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
  return it->second;
}

Var Tape::constant(Array value) {
  if (!value.all_finite()) throw NumericError("non-finite constant placed on tape");
  nodes_.push_back({OpKind::constant, {}, std::move(value), nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Array value) {
  if (!value.all_finite()) throw NumericError("non-finite parameter placed on tape");
  nodes_.push_back({OpKind::parameter, {}, std::move(value), nullptr, true});
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Array value, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op_name(kind));
  bool needs = false;
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) throw ContractError("op input refers to a later node");
    needs = needs || nodes_[id].requires_grad;
  }
  nodes_.push_back({kind, std::move(inputs), std::move(value), std::move(backward), needs});
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, Array grad) {
  if (!nodes_[id].requires_grad) return;
  auto& slot = grads_[id];
  if (!slot) {
    slot = std::move(grad);
  } else {
    slot->values() += grad.values();
  }
}

Gradients Tape::backward(Var root) {
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (root.value().size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_string(root.shape()));
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[root.id()] = Array::full(root.shape(), 1.0);

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !grads_[i] || !node.backward) continue;
    node.backward(*this, i, *grads_[i]);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != OpKind::parameter) continue;
    out.grads_.emplace(i, grads_[i] ? std::move(*grads_[i]) : Array(nodes_[i].value.shape()));
  }
  grads_.clear();
  return out;
}

}  // namespace comprer
