#pragma once

// Differentiable operations recorded on a Tape. Only the set the model and the
// losses need is provided. Broadcasting is limited to scalar<->array and equal
// shapes; bias-style broadcasts are separate named ops.

#include <span>

#include "comprer/tape.hpp"

namespace comprer {

/// [M×K]·[K×N] -> [M×N].
Var matmul(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
Var exp(Var x);
/// Raises DomainError on non-positive entries.
Var log(Var x);
/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
Var gelu(Var x);

/// Reductions to a rank-0 scalar.
Var sum(Var x);
Var mean(Var x);

/// Scales every row of a 2-D array to unit Euclidean norm. Zero rows raise
/// DegenerateInputError.
Var row_l2_normalize(Var x);

Var transpose(Var x);
/// Main diagonal of a square matrix as a rank-1 array.
Var diagonal(Var x);
/// Per-row log(Σ exp), max-subtracted. [N×M] -> [N].
Var row_logsumexp(Var x);

Var reshape(Var x, Shape shape);
/// Concatenates along the leading axis; trailing dimensions must agree.
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);

/// x[R×…] + rows[P×…] where row r of x receives row (r mod P). P = 1 is a
/// bias add; P = tokens-per-sample adds a position table to every sample.
Var add_rows_tiled(Var x, Var rows);

/// Row-wise layer normalization with learned gain and bias (both length D).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Scaled dot-product self-attention over groups of `tokens` consecutive rows.
/// qkv is [M·tokens × 3D] holding the query, key and value blocks side by side;
/// the result is [M·tokens × D]. D is split evenly across `heads`.
Var self_attention(Var qkv, std::size_t tokens, std::size_t heads);

/// Mean over consecutive groups of `group` rows: [G·group × D] -> [G × D].
Var group_mean(Var x, std::size_t group);

/// Fractionally-strided convolution.
/// x: [N×C×H×W] or [C×H×W]; kernel: [C×C'×k×k];
/// output spatial size (H−1)·stride + k.
Var transposed_conv2d(Var x, Var kernel, std::size_t stride);

/// Adds bias[c] to every pixel of channel c. x: [N×C×H×W] or [C×H×W].
Var add_channel_bias(Var x, Var bias);

double gelu_value(double x);

/// Rearranges images [N×C×H×W] into patch rows [N·T × C·p·p], with patches in
/// raster order and each row laid out channel-major. Not differentiable:
/// images enter the graph as constants.
Array patchify(const Array& images, std::size_t patch);

}  // namespace comprer
