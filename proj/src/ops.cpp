#include "comprer/ops.hpp"

#include <cmath>
#include <numbers>

namespace comprer {

namespace {

Tape& tape_of(Var v) {
  if (!v.valid()) throw ContractError("operation on an unbound Var");
  return *v.tape();
}

Tape& common_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return tape_of(a);
}

void require_rank(Var x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_string(x.shape()));
  }
}

// Shape of a binary elementwise result; only equal shapes or a size-1 side.
Shape broadcast_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

// Sums a gradient down to the operand's shape (undoes scalar broadcast).
Array reduce_to(const Array& grad, const Array& operand) {
  if (operand.size() == grad.size()) return grad.reshaped(operand.shape());
  return Array::full(operand.shape(), grad.values().sum());
}

struct ConvGeometry {
  std::size_t batch, in_channels, out_channels, height, width, kernel, stride, out_height, out_width;
  bool batched;
};

ConvGeometry conv_geometry(const Array& x, const Array& kernel, std::size_t stride) {
  if (stride == 0) throw DimensionError("transposed_conv2d: stride must be positive");
  if (kernel.rank() != 4) throw DimensionError("transposed_conv2d: kernel must be [C×C'×k×k]");
  ConvGeometry g{};
  g.batched = x.rank() == 4;
  if (!g.batched && x.rank() != 3) throw DimensionError("transposed_conv2d: input must be [N×C×H×W] or [C×H×W]");
  const std::size_t off = g.batched ? 1 : 0;
  g.batch = g.batched ? x.dim(0) : 1;
  g.in_channels = x.dim(off);
  g.height = x.dim(off + 1);
  g.width = x.dim(off + 2);
  if (kernel.dim(0) != g.in_channels || kernel.dim(2) != kernel.dim(3)) {
    throw DimensionError("transposed_conv2d: kernel " + shape_string(kernel.shape()) + " inconsistent with input " +
                         shape_string(x.shape()));
  }
  g.out_channels = kernel.dim(1);
  g.kernel = kernel.dim(2);
  g.stride = stride;
  g.out_height = (g.height - 1) * stride + g.kernel;
  g.out_width = (g.width - 1) * stride + g.kernel;
  return g;
}

}  // namespace

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

namespace {

double gelu_derivative(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  // Row-by-row accumulation in a fixed k order: each output row depends only
  // on its own input row, so results do not change with batch composition
  // (blocked GEMM picks different kernels for different row counts).
  Array out({a.shape()[0], b.shape()[1]});
  {
    const auto A = a.value().matrix();
    const auto B = b.value().matrix();
    auto O = out.matrix();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      auto row = O.row(i);
      for (Eigen::Index k = 0; k < A.cols(); ++k) row.noalias() += A(i, k) * B.row(k);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::matmul, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t, const Array& g) {
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Array da(A.shape());
      da.matrix().noalias() = g.matrix() * B.matrix().transpose();
      t.accumulate(ia, std::move(da));
    }
    if (t.requires_grad(ib)) {
      Array db(B.shape());
      db.matrix().noalias() = A.matrix().transpose() * g.matrix();
      t.accumulate(ib, std::move(db));
    }
  });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(Binary kind, Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const char* name = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
  const Array& A = a.value();
  const Array& B = b.value();
  Array out(broadcast_shape(A, B, name));
  auto o = out.values().array();
  const bool a_scalar = A.size() == 1 && out.size() != 1;
  const bool b_scalar = B.size() == 1 && out.size() != 1;
  auto apply = [&](auto&& lhs, auto&& rhs) {
    switch (kind) {
      case Binary::add: o = lhs + rhs; break;
      case Binary::sub: o = lhs - rhs; break;
      case Binary::mul: o = lhs * rhs; break;
    }
  };
  if (a_scalar) {
    apply(A[0], B.values().array());
  } else if (b_scalar) {
    apply(A.values().array(), B[0]);
  } else {
    apply(A.values().array(), B.values().array());
  }
  const std::size_t ia = a.id(), ib = b.id();
  const OpKind op = kind == Binary::add ? OpKind::add : kind == Binary::sub ? OpKind::sub : OpKind::mul;
  return tape.record(op, {ia, ib}, std::move(out), [kind, ia, ib](Tape& t, std::size_t, const Array& g) {
    const Array& A = t.value(ia);
    const Array& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Array ga = g;
      if (kind == Binary::mul) {
        if (B.size() == 1) {
          ga.values() *= B[0];
        } else {
          ga.values().array() *= B.values().array();
        }
      }
      t.accumulate(ia, reduce_to(ga, A));
    }
    if (t.requires_grad(ib)) {
      Array gb = g;
      if (kind == Binary::sub) gb.values() = -gb.values();
      if (kind == Binary::mul) {
        if (A.size() == 1) {
          gb.values() *= A[0];
        } else {
          gb.values().array() *= A.values().array();
        }
      }
      t.accumulate(ib, reduce_to(gb, B));
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return binary(Binary::add, a, b); }
Var sub(Var a, Var b) { return binary(Binary::sub, a, b); }
Var mul(Var a, Var b) { return binary(Binary::mul, a, b); }

Var scale(Var x, double factor) {
  Tape& tape = tape_of(x);
  Array out = x.value();
  out.values() *= factor;
  const std::size_t ix = x.id();
  return tape.record(OpKind::scale, {ix}, std::move(out), [ix, factor](Tape& t, std::size_t, const Array& g) {
    Array gx = g;
    gx.values() *= factor;
    t.accumulate(ix, std::move(gx));
  });
}

Var add_scalar(Var x, double offset) {
  Tape& tape = tape_of(x);
  Array out = x.value();
  out.values().array() += offset;
  const std::size_t ix = x.id();
  return tape.record(OpKind::add_scalar, {ix}, std::move(out),
                     [ix](Tape& t, std::size_t, const Array& g) { t.accumulate(ix, g); });
}

Var exp(Var x) {
  Tape& tape = tape_of(x);
  Array out(x.shape());
  out.values() = x.value().values().array().exp().matrix();
  const std::size_t ix = x.id();
  return tape.record(OpKind::exp, {ix}, std::move(out), [ix](Tape& t, std::size_t self, const Array& g) {
    Array gx = g;
    gx.values().array() *= t.value(self).values().array();
    t.accumulate(ix, std::move(gx));
  });
}

Var log(Var x) {
  Tape& tape = tape_of(x);
  if ((x.value().values().array() <= 0.0).any()) throw DomainError("log of a non-positive value");
  Array out(x.shape());
  out.values() = x.value().values().array().log().matrix();
  const std::size_t ix = x.id();
  return tape.record(OpKind::log, {ix}, std::move(out), [ix](Tape& t, std::size_t, const Array& g) {
    Array gx = g;
    gx.values().array() /= t.value(ix).values().array();
    t.accumulate(ix, std::move(gx));
  });
}

Var gelu(Var x) {
  Tape& tape = tape_of(x);
  Array out(x.shape());
  out.values() = x.value().values().unaryExpr([](double v) { return gelu_value(v); });
  const std::size_t ix = x.id();
  return tape.record(OpKind::gelu, {ix}, std::move(out), [ix](Tape& t, std::size_t, const Array& g) {
    Array gx = g;
    gx.values().array() *= t.value(ix).values().unaryExpr([](double v) { return gelu_derivative(v); }).array();
    t.accumulate(ix, std::move(gx));
  });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  const std::size_t ix = x.id();
  return tape.record(OpKind::sum, {ix}, Array::scalar(x.value().values().sum()),
                     [ix](Tape& t, std::size_t, const Array& g) {
                       t.accumulate(ix, Array::full(t.value(ix).shape(), g[0]));
                     });
}

Var mean(Var x) {
  Tape& tape = tape_of(x);
  const std::size_t ix = x.id();
  const double n = static_cast<double>(x.value().size());
  return tape.record(OpKind::mean, {ix}, Array::scalar(x.value().values().sum() / n),
                     [ix, n](Tape& t, std::size_t, const Array& g) {
                       t.accumulate(ix, Array::full(t.value(ix).shape(), g[0] / n));
                     });
}

Var row_l2_normalize(Var x) {
  Tape& tape = tape_of(x);
  require_rank(x, 2, "row_l2_normalize");
  const auto X = x.value().matrix();
  VectorXd norms = X.rowwise().norm();
  if ((norms.array() == 0.0).any()) throw DegenerateInputError("row_l2_normalize: zero-norm row");
  Array out(x.shape());
  out.matrix() = norms.cwiseInverse().asDiagonal() * X;
  const std::size_t ix = x.id();
  return tape.record(OpKind::row_l2_normalize, {ix}, std::move(out),
                     [ix, norms = std::move(norms)](Tape& t, std::size_t self, const Array& g) {
                       const auto Y = t.value(self).matrix();
                       const auto G = g.matrix();
                       const VectorXd dots = (Y.array() * G.array()).rowwise().sum();
                       Array gx(g.shape());
                       gx.matrix() = norms.cwiseInverse().asDiagonal() * (G - dots.asDiagonal() * Y);
                       t.accumulate(ix, std::move(gx));
                     });
}

Var transpose(Var x) {
  Tape& tape = tape_of(x);
  require_rank(x, 2, "transpose");
  Array out({x.shape()[1], x.shape()[0]});
  out.matrix() = x.value().matrix().transpose();
  const std::size_t ix = x.id();
  return tape.record(OpKind::transpose, {ix}, std::move(out), [ix](Tape& t, std::size_t, const Array& g) {
    Array gx(t.value(ix).shape());
    gx.matrix() = g.matrix().transpose();
    t.accumulate(ix, std::move(gx));
  });
}

Var diagonal(Var x) {
  Tape& tape = tape_of(x);
  require_rank(x, 2, "diagonal");
  if (x.shape()[0] != x.shape()[1]) throw DimensionError("diagonal: matrix is not square");
  const std::size_t n = x.shape()[0];
  Array out({n});
  out.values() = x.value().matrix().diagonal();
  const std::size_t ix = x.id();
  return tape.record(OpKind::diagonal, {ix}, std::move(out), [ix, n](Tape& t, std::size_t, const Array& g) {
    Array gx({n, n});
    gx.matrix().diagonal() = g.values();
    t.accumulate(ix, std::move(gx));
  });
}

Var row_logsumexp(Var x) {
  Tape& tape = tape_of(x);
  require_rank(x, 2, "row_logsumexp");
  const auto X = x.value().matrix();
  const VectorXd row_max = X.rowwise().maxCoeff();
  MatrixXd shifted_exp = (X.colwise() - row_max).array().exp().matrix();
  const VectorXd sums = shifted_exp.rowwise().sum();
  Array out({x.shape()[0]});
  out.values() = row_max.array() + sums.array().log();
  // softmax rows, kept for the backward rule
  MatrixXd softmax = sums.cwiseInverse().asDiagonal() * shifted_exp;
  const std::size_t ix = x.id();
  return tape.record(OpKind::row_logsumexp, {ix}, std::move(out),
                     [ix, softmax = std::move(softmax)](Tape& t, std::size_t, const Array& g) {
                       Array gx(t.value(ix).shape());
                       gx.matrix() = g.values().asDiagonal() * softmax;
                       t.accumulate(ix, std::move(gx));
                     });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Array out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return tape.record(OpKind::reshape, {ix}, std::move(out), [ix](Tape& t, std::size_t, const Array& g) {
    t.accumulate(ix, g.reshaped(t.value(ix).shape()));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  Tape& tape = tape_of(parts[0]);
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw ContractError("concat_rows: operands live on different tapes");
    if (p.value().rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat_rows: trailing shapes differ");
    }
    rows += p.shape()[0];
    ids.push_back(p.id());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Array out(shape);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    out.values().segment(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(p.value().size())) =
        p.value().values();
    offset += p.value().size();
  }
  std::vector<std::size_t> inputs = ids;
  return tape.record(OpKind::concat_rows, std::move(inputs), std::move(out),
                     [ids](Tape& t, std::size_t, const Array& g) {
                       std::size_t off = 0;
                       for (std::size_t id : ids) {
                         const Array& part = t.value(id);
                         if (t.requires_grad(id)) {
                           t.accumulate(id, Array(part.shape(), g.values().segment(static_cast<Eigen::Index>(off),
                                                                                   static_cast<Eigen::Index>(part.size()))));
                         }
                         off += part.size();
                       }
                     });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(x);
  if (x.value().rank() == 0 || count == 0 || begin + count > x.shape()[0]) {
    throw DimensionError("slice_rows: range out of bounds for shape " + shape_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[0] = count;
  const std::size_t stride = x.value().size() / x.shape()[0];
  Array out(shape, x.value().values().segment(static_cast<Eigen::Index>(begin * stride),
                                              static_cast<Eigen::Index>(count * stride)));
  const std::size_t ix = x.id();
  return tape.record(OpKind::slice_rows, {ix}, std::move(out),
                     [ix, begin, stride](Tape& t, std::size_t, const Array& g) {
                       Array gx(t.value(ix).shape());
                       gx.values().segment(static_cast<Eigen::Index>(begin * stride),
                                           static_cast<Eigen::Index>(g.size())) = g.values();
                       t.accumulate(ix, std::move(gx));
                     });
}

Var add_rows_tiled(Var x, Var rows) {
  Tape& tape = common_tape(x, rows);
  const auto X = x.value().matrix();
  const auto R = rows.value().matrix();
  if (rows.value().rank() == 1) {
    // a rank-1 bias is a single row
    if (static_cast<Eigen::Index>(rows.value().size()) != X.cols()) {
      throw DimensionError("add_rows_tiled: bias length does not match row width");
    }
  } else if (R.cols() != X.cols() || X.rows() % R.rows() != 0) {
    throw DimensionError("add_rows_tiled: cannot tile " + shape_string(rows.shape()) + " over " +
                         shape_string(x.shape()));
  }
  const Eigen::Index period = rows.value().rank() == 1 ? 1 : R.rows();
  const auto table = Eigen::Map<const MatrixXd>(rows.value().data(), period, X.cols());
  Array out(x.shape());
  auto O = out.matrix();
  for (Eigen::Index start = 0; start < X.rows(); start += period) {
    O.middleRows(start, period) = X.middleRows(start, period) + table;
  }
  const std::size_t ix = x.id(), ir = rows.id();
  return tape.record(OpKind::add_rows_tiled, {ix, ir}, std::move(out),
                     [ix, ir, period](Tape& t, std::size_t, const Array& g) {
                       if (t.requires_grad(ix)) t.accumulate(ix, g.reshaped(t.value(ix).shape()));
                       if (t.requires_grad(ir)) {
                         const auto G = g.matrix();
                         MatrixXd acc = MatrixXd::Zero(period, G.cols());
                         for (Eigen::Index start = 0; start < G.rows(); start += period) {
                           acc += G.middleRows(start, period);
                         }
                         t.accumulate(ir, Array(t.value(ir).shape(), Eigen::Map<VectorXd>(acc.data(), acc.size())));
                       }
                     });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = common_tape(x, gain);
  if (bias.tape() != &tape) throw ContractError("layer_norm: operands live on different tapes");
  require_rank(x, 2, "layer_norm");
  const auto X = x.value().matrix();
  const Eigen::Index d = X.cols();
  if (static_cast<Eigen::Index>(gain.value().size()) != d || static_cast<Eigen::Index>(bias.value().size()) != d) {
    throw DimensionError("layer_norm: gain/bias length must equal row width");
  }
  const VectorXd mu = X.rowwise().mean();
  MatrixXd centered = X.colwise() - mu;
  const VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt().matrix();
  MatrixXd xhat = inv_std.asDiagonal() * centered;
  const auto gv = gain.value().values().transpose();
  const auto bv = bias.value().values().transpose();
  Array out(x.shape());
  out.matrix() = ((xhat.array().rowwise() * gv.array()).rowwise() + bv.array()).matrix();
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      OpKind::layer_norm, {ix, ig, ib}, std::move(out),
      [ix, ig, ib, xhat = std::move(xhat), inv_std](Tape& t, std::size_t, const Array& g) {
        const auto G = g.matrix();
        if (t.requires_grad(ig)) {
          t.accumulate(ig, Array(t.value(ig).shape(), (G.array() * xhat.array()).colwise().sum().transpose().matrix()));
        }
        if (t.requires_grad(ib)) t.accumulate(ib, Array(t.value(ib).shape(), G.colwise().sum().transpose()));
        if (t.requires_grad(ix)) {
          const auto gainv = t.value(ig).values().transpose();
          const MatrixXd dxhat = (G.array().rowwise() * gainv.array()).matrix();
          const double d = static_cast<double>(dxhat.cols());
          const VectorXd m1 = dxhat.rowwise().sum() / d;
          const VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
          Array gx(t.value(ix).shape());
          gx.matrix() = inv_std.asDiagonal() * ((dxhat.colwise() - m1) - m2.asDiagonal() * xhat);
          t.accumulate(ix, std::move(gx));
        }
      });
}

Var self_attention(Var qkv, std::size_t tokens, std::size_t heads) {
  Tape& tape = tape_of(qkv);
  require_rank(qkv, 2, "self_attention");
  const auto X = qkv.value().matrix();
  if (tokens == 0 || heads == 0 || X.rows() % static_cast<Eigen::Index>(tokens) != 0 || X.cols() % 3 != 0 ||
      (X.cols() / 3) % static_cast<Eigen::Index>(heads) != 0) {
    throw DimensionError("self_attention: qkv shape " + shape_string(qkv.shape()) + " incompatible with " +
                         std::to_string(tokens) + " tokens and " + std::to_string(heads) + " heads");
  }
  const Eigen::Index T = static_cast<Eigen::Index>(tokens);
  const Eigen::Index D = X.cols() / 3;
  const Eigen::Index H = static_cast<Eigen::Index>(heads);
  const Eigen::Index dh = D / H;
  const Eigen::Index groups = X.rows() / T;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Array out({static_cast<std::size_t>(X.rows()), static_cast<std::size_t>(D)});
  auto O = out.matrix();
  std::vector<MatrixXd> probs(static_cast<std::size_t>(groups * H));
  for (Eigen::Index s = 0; s < groups; ++s) {
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto Q = X.block(s * T, h * dh, T, dh);
      const auto K = X.block(s * T, D + h * dh, T, dh);
      const auto V = X.block(s * T, 2 * D + h * dh, T, dh);
      MatrixXd S = (Q * K.transpose()) * inv_sqrt;
      const VectorXd row_max = S.rowwise().maxCoeff();
      S = (S.colwise() - row_max).array().exp().matrix();
      const VectorXd row_sum = S.rowwise().sum();
      S = row_sum.cwiseInverse().asDiagonal() * S;
      O.block(s * T, h * dh, T, dh).noalias() = S * V;
      probs[static_cast<std::size_t>(s * H + h)] = std::move(S);
    }
  }
  const std::size_t ix = qkv.id();
  return tape.record(
      OpKind::self_attention, {ix}, std::move(out),
      [ix, T, D, H, dh, groups, inv_sqrt, probs = std::move(probs)](Tape& t, std::size_t, const Array& g) {
        const auto X = t.value(ix).matrix();
        const auto G = g.matrix();
        Array gx(t.value(ix).shape());
        auto GX = gx.matrix();
        for (Eigen::Index s = 0; s < groups; ++s) {
          for (Eigen::Index h = 0; h < H; ++h) {
            const MatrixXd& P = probs[static_cast<std::size_t>(s * H + h)];
            const auto Q = X.block(s * T, h * dh, T, dh);
            const auto K = X.block(s * T, D + h * dh, T, dh);
            const auto V = X.block(s * T, 2 * D + h * dh, T, dh);
            const auto dO = G.block(s * T, h * dh, T, dh);
            const MatrixXd dP = dO * V.transpose();
            const VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
            const MatrixXd dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * inv_sqrt;
            GX.block(s * T, h * dh, T, dh).noalias() = dS * K;
            GX.block(s * T, D + h * dh, T, dh).noalias() = dS.transpose() * Q;
            GX.block(s * T, 2 * D + h * dh, T, dh).noalias() = P.transpose() * dO;
          }
        }
        t.accumulate(ix, std::move(gx));
      });
}

Var group_mean(Var x, std::size_t group) {
  Tape& tape = tape_of(x);
  require_rank(x, 2, "group_mean");
  const auto X = x.value().matrix();
  const Eigen::Index n = static_cast<Eigen::Index>(group);
  if (group == 0 || X.rows() % n != 0) throw DimensionError("group_mean: rows not divisible by group size");
  const Eigen::Index groups = X.rows() / n;
  Array out({static_cast<std::size_t>(groups), static_cast<std::size_t>(X.cols())});
  auto O = out.matrix();
  for (Eigen::Index s = 0; s < groups; ++s) O.row(s) = X.middleRows(s * n, n).colwise().sum() / static_cast<double>(n);
  const std::size_t ix = x.id();
  return tape.record(OpKind::group_mean, {ix}, std::move(out), [ix, n, groups](Tape& t, std::size_t, const Array& g) {
    Array gx(t.value(ix).shape());
    auto GX = gx.matrix();
    const auto G = g.matrix();
    for (Eigen::Index s = 0; s < groups; ++s) {
      GX.middleRows(s * n, n) = G.row(s).replicate(n, 1) / static_cast<double>(n);
    }
    t.accumulate(ix, std::move(gx));
  });
}

Var transposed_conv2d(Var x, Var kernel, std::size_t stride) {
  Tape& tape = common_tape(x, kernel);
  const ConvGeometry geo = conv_geometry(x.value(), kernel.value(), stride);
  Shape shape{geo.out_channels, geo.out_height, geo.out_width};
  if (geo.batched) shape.insert(shape.begin(), geo.batch);
  Array out(shape);

  const double* in = x.value().data();
  const double* k = kernel.value().data();
  double* o = out.data();
  const std::size_t kk = geo.kernel * geo.kernel;
  for (std::size_t n = 0; n < geo.batch; ++n) {
    for (std::size_t ci = 0; ci < geo.in_channels; ++ci) {
      for (std::size_t y = 0; y < geo.height; ++y) {
        for (std::size_t xx = 0; xx < geo.width; ++xx) {
          const double v = in[((n * geo.in_channels + ci) * geo.height + y) * geo.width + xx];
          for (std::size_t co = 0; co < geo.out_channels; ++co) {
            const double* kp = k + (ci * geo.out_channels + co) * kk;
            double* op = o + ((n * geo.out_channels + co) * geo.out_height + y * geo.stride) * geo.out_width +
                         xx * geo.stride;
            for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
              for (std::size_t kx = 0; kx < geo.kernel; ++kx) op[ky * geo.out_width + kx] += v * kp[ky * geo.kernel + kx];
            }
          }
        }
      }
    }
  }

  const std::size_t ix = x.id(), ik = kernel.id();
  return tape.record(OpKind::transposed_conv2d, {ix, ik}, std::move(out),
                     [ix, ik, geo](Tape& t, std::size_t, const Array& g) {
                       const bool want_x = t.requires_grad(ix);
                       const bool want_k = t.requires_grad(ik);
                       const double* in = t.value(ix).data();
                       const double* k = t.value(ik).data();
                       const double* go = g.data();
                       Array gx(t.value(ix).shape());
                       Array gk(t.value(ik).shape());
                       const std::size_t kk = geo.kernel * geo.kernel;
                       for (std::size_t n = 0; n < geo.batch; ++n) {
                         for (std::size_t ci = 0; ci < geo.in_channels; ++ci) {
                           for (std::size_t y = 0; y < geo.height; ++y) {
                             for (std::size_t xx = 0; xx < geo.width; ++xx) {
                               const std::size_t in_idx = ((n * geo.in_channels + ci) * geo.height + y) * geo.width + xx;
                               const double v = in[in_idx];
                               double acc = 0.0;
                               for (std::size_t co = 0; co < geo.out_channels; ++co) {
                                 const std::size_t kbase = (ci * geo.out_channels + co) * kk;
                                 const double* gp = go + ((n * geo.out_channels + co) * geo.out_height + y * geo.stride) *
                                                             geo.out_width +
                                                    xx * geo.stride;
                                 for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
                                   for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
                                     const double gv = gp[ky * geo.out_width + kx];
                                     acc += gv * k[kbase + ky * geo.kernel + kx];
                                     gk[kbase + ky * geo.kernel + kx] += gv * v;
                                   }
                                 }
                               }
                               gx[in_idx] = acc;
                             }
                           }
                         }
                       }
                       if (want_x) t.accumulate(ix, std::move(gx));
                       if (want_k) t.accumulate(ik, std::move(gk));
                     });
}

Var add_channel_bias(Var x, Var bias) {
  Tape& tape = common_tape(x, bias);
  const Array& X = x.value();
  if (X.rank() != 3 && X.rank() != 4) throw DimensionError("add_channel_bias: input must be [N×C×H×W] or [C×H×W]");
  const std::size_t off = X.rank() == 4 ? 1 : 0;
  const std::size_t batch = off ? X.dim(0) : 1;
  const std::size_t channels = X.dim(off);
  const std::size_t plane = X.dim(off + 1) * X.dim(off + 2);
  if (bias.value().size() != channels) throw DimensionError("add_channel_bias: bias length must equal channel count");
  Array out = X;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      out.values().segment(static_cast<Eigen::Index>((n * channels + c) * plane), static_cast<Eigen::Index>(plane)).array() +=
          bias.value()[c];
    }
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return tape.record(OpKind::add_channel_bias, {ix, ib}, std::move(out),
                     [ix, ib, batch, channels, plane](Tape& t, std::size_t, const Array& g) {
                       if (t.requires_grad(ix)) t.accumulate(ix, g);
                       if (t.requires_grad(ib)) {
                         Array gb(t.value(ib).shape());
                         for (std::size_t n = 0; n < batch; ++n) {
                           for (std::size_t c = 0; c < channels; ++c) {
                             gb[c] += g.values()
                                          .segment(static_cast<Eigen::Index>((n * channels + c) * plane),
                                                   static_cast<Eigen::Index>(plane))
                                          .sum();
                           }
                         }
                         t.accumulate(ib, std::move(gb));
                       }
                     });
}

Array patchify(const Array& images, std::size_t patch) {
  if (images.rank() != 4) throw DimensionError("patchify: images must be [N×C×H×W], got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image size " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t row_len = c * patch * patch;
  Array out({n * gh * gw, row_len});
  const double* src = images.data();
  double* dst = out.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        double* row = dst + ((s * gh + py) * gw + px) * row_len;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < patch; ++y) {
            for (std::size_t x = 0; x < patch; ++x) {
              row[(ch * patch + y) * patch + x] = src[((s * c + ch) * h + py * patch + y) * w + px * patch + x];
            }
          }
        }
      }
    }
  }
  return out;
}

}  // namespace comprer
