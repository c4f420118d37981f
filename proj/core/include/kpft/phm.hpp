#pragma once

#include <memory>
#include <vector>

#include "kpft/tensor.hpp"

namespace kpft {

enum class PhmMode {
    direct,    // B_i stored as full (k/n x d/n) matrices
    low_rank,  // B_i = s_i * t_i with s_i (k/n x r), t_i (r x d/n)
};

// Parameter set of one Kronecker-structured projection x -> y = x W + b with
// W = sum_i kron(A_i, B_i). The A_i may be aliased across many projections
// (shared slow weights); s_i/t_i and the bias are always per-projection.
struct PhmFactors {
    index n = 1;   // number of Kronecker summands; A_i are n x n
    index k = 0;   // input width,  k % n == 0
    index d = 0;   // output width, d % n == 0
    index rank = 1;
    PhmMode mode = PhmMode::direct;
    bool shared_a = false;

    std::vector<std::shared_ptr<Tensor2>> a_set;  // n of [n x n]
    std::vector<std::shared_ptr<Tensor2>> b_set;  // direct mode: n of [k/n x d/n]
    std::vector<std::shared_ptr<Tensor2>> s_set;  // low_rank mode: n of [k/n x r]
    std::vector<std::shared_ptr<Tensor2>> t_set;  // low_rank mode: n of [r x d/n]
    std::shared_ptr<Tensor2> bias;                // [1 x d], optional

    void validate() const;
    // effective B_i (forms s_i * t_i in low-rank mode)
    Tensor2 effective_b(index i) const;
};

// W = sum_i kron(A_i, B_i), the verification route. The apply path below is
// required to agree with (x * materialize_w + bias) to f64 roundoff.
Tensor2 materialize_w(const PhmFactors& f);

// --- block kernels shared by the plain apply and the autograd op ---
//
// A row x of width k is viewed as n consecutive blocks of width k/n; the
// output row of width d as n blocks of width d/n. With Z_i = blocks(x) * B_i,
// output block m accumulates sum_i sum_j A_i[j,m] * Z_i[.,j,:]. Nothing of
// size k x d is ever allocated.

// out[r*n + m, :] = sum_j a[j, m] * z[r*n + j, :]
Tensor2 block_combine(const Tensor2& z, const Tensor2& a);
// out[r*n + j, :] = sum_m a[j, m] * z[r*n + m, :]   (adjoint of block_combine)
Tensor2 block_combine_adj(const Tensor2& z, const Tensor2& a);

// y = x W + b on flattened activations x [R x k] -> y [R x d].
Tensor2 phm_apply_flat(const Tensor2& x, const std::vector<const Tensor2*>& a_set,
                       const std::vector<const Tensor2*>& b_set, const Tensor2* bias);

// gradients of phm_apply_flat given upstream g [R x d]
struct PhmGrads {
    Tensor2 x;                  // [R x k]
    std::vector<Tensor2> a;     // n of [n x n]
    std::vector<Tensor2> b;     // n of [k/n x d/n]
    Tensor2 bias;               // [1 x d]
};
PhmGrads phm_backward_flat(const Tensor2& x, const std::vector<const Tensor2*>& a_set,
                           const std::vector<const Tensor2*>& b_set, const Tensor2& g);

// batched convenience wrapper, y = x W + b per (batch, seq) row
Tensor3 phm_apply(const PhmFactors& f, const Tensor3& x);

}  // namespace kpft
