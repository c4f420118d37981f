#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "kpft/autograd.hpp"
#include "kpft/phm.hpp"
#include "kpft/rng.hpp"
#include "kpft/tensor.hpp"

namespace kpft {

enum class AdapterKind { dense, lowrank, phm, compacter };
enum class Placement { after_attn_and_ffn, after_ffn_only, after_attn_only };

const char* to_string(AdapterKind k);
const char* to_string(Placement p);

struct AdapterSpec {
    AdapterKind kind = AdapterKind::compacter;
    index bottleneck = 8;  // d
    index division = 2;    // n, Kronecker summands
    index rank = 1;        // r of the low-rank factors
    Placement placement = Placement::after_attn_and_ffn;
    index drop_first_m = 0;  // layers at the bottom of each stack without adapters

    // hidden is the model width k the adapter plugs into
    void validate(index hidden) const;
    bool at_attn() const { return placement != Placement::after_ffn_only; }
    bool at_ffn() const { return placement != Placement::after_attn_only; }
};

// One projection of an adapter (down: k -> d, up: d -> k). Dense and rank-r
// kinds keep explicit matrices; phm/compacter kinds keep Kronecker factors.
struct Projection {
    AdapterKind kind = AdapterKind::dense;
    index in = 0, out = 0;
    std::shared_ptr<Tensor2> w;     // dense [in x out]
    std::shared_ptr<Tensor2> s, t;  // lowrank: [in x r], [r x out]
    PhmFactors factors;             // phm / compacter
    std::shared_ptr<Tensor2> bias;  // [1 x out], aliases factors.bias when present
};

struct AdapterInstance {
    AdapterKind kind = AdapterKind::dense;
    Projection down, up;
};

// leaf Vars for persistent parameters, keyed by tensor identity so that a
// shared A matrix becomes a single graph node no matter how many layers use it
using VarCache = std::unordered_map<const Tensor2*, Var>;

Var cached_leaf(Tape& tape, VarCache& cache, const std::shared_ptr<Tensor2>& tensor,
                bool requires_grad);

// y = up(GeLU(down(x))) + x on flattened activations [R x k]
Var adapter_forward(const AdapterInstance& adapter, Var x, VarCache& cache);

// plain (no tape) version for verification paths
Tensor3 adapter_apply(const AdapterInstance& adapter, const Tensor3& x);

Tensor2 projection_weight(const Projection& p);  // materialized [in x out]

// Rewire every projection to one freshly drawn A-set; all of them must agree
// on n. Returns the shared tensors (n matrices of n x n).
std::vector<std::shared_ptr<Tensor2>> make_shared_slow_weights(index n,
                                                               const std::vector<PhmFactors*>& projections,
                                                               Rng& rng);

}  // namespace kpft
