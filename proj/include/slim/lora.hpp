#pragma once

#include <cstdint>
#include <vector>

#include "slim/ops.hpp"
#include "slim/rng.hpp"

namespace slim {

// Low-rank adapter pair. Convention used throughout: token features are row
// vectors, x has d1 features and the output has d2; the contribution is
// (x * B) * A with B[d1 x r] and A[r x d2], so B*A is the effective d1 x d2
// update whose rows index input features and columns index output features.
struct LoraAdapter {
    Tensor b_down;  // B: [d1 x r]
    Tensor a_up;    // A: [r x d2]

    int64_t d1() const { return b_down.shape[0]; }
    int64_t d2() const { return a_up.shape[1]; }
    int64_t rank() const { return b_down.shape[1]; }

    // B starts all-zero and A Gaussian (std 0.02), so a fresh adapter
    // contributes exactly zero.
    static LoraAdapter init(int64_t d1, int64_t d2, int64_t r, Rng& rng);
};

// Row/column mask: rows of B (input features of B*A) and columns of A
// (output features) zeroed out. Regenerable from the stored seed.
struct MaskSpec {
    std::vector<int32_t> rows;
    std::vector<int32_t> cols;
    uint64_t seed = 0;

    bool empty() const { return rows.empty() && cols.empty(); }
    bool operator==(const MaskSpec&) const = default;
};

// Draws each row/column independently with rate p_rc chosen so the union
// pattern zeroes an expected fraction p of the d1 x d2 elements:
// p_rc = 1 - sqrt(1 - p). With paper_formula the literal published rate
// p_rc = 1 - sqrt(p) is used instead (under which p acts as a keep rate).
MaskSpec sample_mask(int64_t d1, int64_t d2, double p, uint64_t seed, bool paper_formula = false);

// Taped adapter product (x * B) * A; never materializes B*A.
Var lora_forward(Tape& t, Var b_down, Var a_up, Var x);
// Convenience for untaped use.
Tensor lora_apply(const LoraAdapter& ad, const Tensor& x);

// Masked product (x masked on B-rows) * B * A, then output columns masked.
// Exactly equals dense_masked_oracle while keeping O(r(d1+d2)) cost.
Var fast_masked_forward(Tape& t, Var b_down, Var a_up, const MaskSpec& mask, Var x);
Tensor fast_masked_apply(const LoraAdapter& ad, const MaskSpec& mask, const Tensor& x);

// Reference path: materializes B*A, zeroes every entry whose row is masked or
// whose column is masked, then multiplies. Used for equivalence tests and as
// the STD arm of the merge benchmark.
Tensor dense_masked_oracle(const LoraAdapter& ad, const MaskSpec& mask, const Tensor& x);

// Sum over adapters of mean|B| + mean|A| (elementwise L1 normalized by the
// element count r*d of each matrix).
Var l1_penalty(Tape& t, const std::vector<std::pair<Var, Var>>& adapters);

// Evaluates the drop-and-rescale merge with explicit complementary masks
// (entries must be 0/1 with m_l + m_a = 1 everywhere):
//   pre + lambda/(1-p) * m_l.(ins - pre) + lambda/(1-p) * m_a.(ins + ba - pre)
Tensor dare_merge(const Tensor& theta_pre, const Tensor& theta_ins, const Tensor& ba,
                  const Tensor& mask_l, const Tensor& mask_a, double lambda, double p);

// Confirms numerically that with lambda = 1-p the merge collapses to
// ins + m_a.(ba); returns the max elementwise deviation on one random
// instance of the given size.
double verify_dare_identity(double p, int64_t d1, int64_t d2, int64_t r, Rng& rng);

}  // namespace slim
