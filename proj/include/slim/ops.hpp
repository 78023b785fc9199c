#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "slim/tape.hpp"

namespace slim {

// All ops validate shapes, record a backward closure on the tape, and check
// outputs for NaN/Inf (see set_finite_checks).

// [n x k] * [k x m] -> [n x m]
Var matmul(Tape& t, Var a, Var b);

// Same-shape elementwise.
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);

// x[n x d] + bias[d] broadcast over rows.
Var add_bias_row(Tape& t, Var x, Var bias);

// Constant scalar multiply.
Var scale(Tape& t, Var x, double c);

// y[i,:] = x[i,:] * s[i]; s has shape [n].
Var scale_rows(Tape& t, Var x, Var s);

// Column j of a 2-D tensor as shape [n].
Var col(Tape& t, Var x, int64_t j);

// Zero the listed columns (sorted, unique, in range).
Var mask_cols(Tape& t, Var x, const std::vector<int32_t>& cols);

// Adds c[i] to x[i, j] for j in [col_lo, col_hi).
Var add_to_cols(Tape& t, Var x, int64_t col_lo, int64_t col_hi, const std::vector<double>& c);

Var relu(Tape& t, Var x);
Var gelu(Tape& t, Var x);

// Softmax over the last axis of a 2-D tensor.
Var softmax_rows(Tape& t, Var x);

// Per row: keep the K largest entries (ties broken by lower index), softmax
// over exactly those K values, zero elsewhere. Writes the selected index sets
// (ascending) to *selected when non-null. Exponentials are floored so all K
// kept weights stay strictly positive even for extreme spreads.
Var topk_softmax_rows(Tape& t, Var x, int64_t k, std::vector<std::vector<int32_t>>* selected = nullptr);

// y[i] = sum_{j in cols} x[i, j]; rows listed in snap_rows are forced to
// exactly 1.0 (used when the summed weights provably sum to one).
Var sum_cols(Tape& t, Var x, const std::vector<int32_t>& cols, const std::vector<int32_t>& snap_rows = {});

// RMS normalization over each row with a learned per-channel gain.
Var rmsnorm_rows(Tape& t, Var x, Var gain, double eps = 1e-5);

// Gather rows of table[v x d] by id; gradient scatter-adds.
Var embedding(Tape& t, Var table, const std::vector<int32_t>& ids);

// Fused multi-head causal self-attention over q,k,v of shape [b*tt x d].
Var causal_attention(Tape& t, Var q, Var k, Var v, int64_t b, int64_t tt, int64_t heads);

// Mean over targets of -log softmax(logits[row])[cls]; targets are
// (row, class) pairs.
Var cross_entropy_mean(Tape& t, Var logits, const std::vector<std::pair<int32_t, int32_t>>& targets);

Var sum(Tape& t, Var x);
// Elementwise absolute sum divided by element count.
Var mean_abs(Tape& t, Var x);

}  // namespace slim
