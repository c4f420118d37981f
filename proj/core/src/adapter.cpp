#include "kpft/adapter.hpp"

#include <stdexcept>
#include <string>

namespace kpft {

const char* to_string(AdapterKind k) {
    switch (k) {
        case AdapterKind::dense: return "dense";
        case AdapterKind::lowrank: return "lowrank";
        case AdapterKind::phm: return "phm";
        case AdapterKind::compacter: return "compacter";
    }
    return "?";
}

const char* to_string(Placement p) {
    switch (p) {
        case Placement::after_attn_and_ffn: return "after_attn_and_ffn";
        case Placement::after_ffn_only: return "after_ffn_only";
        case Placement::after_attn_only: return "after_attn_only";
    }
    return "?";
}

void AdapterSpec::validate(index hidden) const {
    if (bottleneck < 1) throw std::invalid_argument("adapter: bottleneck must be >= 1");
    if (kind == AdapterKind::phm || kind == AdapterKind::compacter) {
        if (division < 1) throw std::invalid_argument("adapter: division n must be >= 1");
        if (hidden % division != 0 || bottleneck % division != 0)
            throw std::invalid_argument(
                "adapter: k and d must be divisible by n (k=" + std::to_string(hidden) +
                ", d=" + std::to_string(bottleneck) + ", n=" + std::to_string(division) + ")");
    }
    if (kind == AdapterKind::lowrank &&
        (rank < 1 || rank > std::min(hidden, bottleneck)))
        throw std::invalid_argument("adapter: rank must satisfy 1 <= r <= min(k, d)");
    if (kind == AdapterKind::compacter) {
        const index kb = hidden / division, db = bottleneck / division;
        if (rank < 1 || rank > std::min(kb, db))
            throw std::invalid_argument("adapter: rank must satisfy 1 <= r <= min(k/n, d/n)");
    }
    if (drop_first_m < 0) throw std::invalid_argument("adapter: drop_first_m must be >= 0");
}

Var cached_leaf(Tape& tape, VarCache& cache, const std::shared_ptr<Tensor2>& tensor,
                bool requires_grad) {
    const auto it = cache.find(tensor.get());
    if (it != cache.end()) return it->second;
    const Var v = leaf(tape, *tensor, requires_grad);
    cache.emplace(tensor.get(), v);
    return v;
}

namespace {

Var lookup(const VarCache& cache, const std::shared_ptr<Tensor2>& tensor) {
    const auto it = cache.find(tensor.get());
    if (it == cache.end())
        throw std::logic_error("adapter_forward: parameter has no leaf Var in the cache");
    return it->second;
}

Var projection_forward(const Projection& p, Var x, VarCache& cache) {
    switch (p.kind) {
        case AdapterKind::dense:
            return add_bias(matmul(x, lookup(cache, p.w)), lookup(cache, p.bias));
        case AdapterKind::lowrank:
            return add_bias(matmul(outer(x, lookup(cache, p.s)), lookup(cache, p.t)),
                            lookup(cache, p.bias));
        case AdapterKind::phm:
        case AdapterKind::compacter: {
            std::vector<Var> a_vars, b_vars;
            for (index i = 0; i < p.factors.n; ++i) {
                a_vars.push_back(lookup(cache, p.factors.a_set[static_cast<size_t>(i)]));
                if (p.factors.mode == PhmMode::direct) {
                    b_vars.push_back(lookup(cache, p.factors.b_set[static_cast<size_t>(i)]));
                } else {
                    b_vars.push_back(outer(lookup(cache, p.factors.s_set[static_cast<size_t>(i)]),
                                           lookup(cache, p.factors.t_set[static_cast<size_t>(i)])));
                }
            }
            return phm_linear(x, a_vars, b_vars, lookup(cache, p.bias));
        }
    }
    throw std::logic_error("projection_forward: unknown kind");
}

Tensor2 projection_apply_flat(const Projection& p, const Tensor2& x) {
    Tensor2 y = matmul(x, projection_weight(p));
    if (p.bias)
        for (index r = 0; r < y.rows; ++r)
            for (index c = 0; c < y.cols; ++c) y.at(r, c) += p.bias->at(0, c);
    return y;
}

}  // namespace

Tensor2 projection_weight(const Projection& p) {
    switch (p.kind) {
        case AdapterKind::dense: return *p.w;
        case AdapterKind::lowrank: return outer(*p.s, *p.t);
        case AdapterKind::phm:
        case AdapterKind::compacter: return materialize_w(p.factors);
    }
    throw std::logic_error("projection_weight: unknown kind");
}

Var adapter_forward(const AdapterInstance& adapter, Var x, VarCache& cache) {
    const Var h = gelu(projection_forward(adapter.down, x, cache));
    const Var y = projection_forward(adapter.up, h, cache);
    return add(y, x);
}

Tensor3 adapter_apply(const AdapterInstance& adapter, const Tensor3& x) {
    Tensor2 flat = flatten(x);
    Tensor2 h = projection_apply_flat(adapter.down, flat);
    for (auto& v : h.data) v = gelu_value(v);
    Tensor2 y = projection_apply_flat(adapter.up, h);
    y = add(y, flat);
    return unflatten(y, x.batch);
}

std::vector<std::shared_ptr<Tensor2>> make_shared_slow_weights(
    index n, const std::vector<PhmFactors*>& projections, Rng& rng) {
    if (n < 1) throw std::invalid_argument("make_shared_slow_weights: n must be >= 1");
    for (const PhmFactors* f : projections)
        if (!f || f->n != n)
            throw std::invalid_argument("make_shared_slow_weights: projection has mismatched n");
    std::vector<std::shared_ptr<Tensor2>> shared;
    shared.reserve(static_cast<size_t>(n));
    for (index i = 0; i < n; ++i) {
        auto a = std::make_shared<Tensor2>(n, n);
        for (auto& v : a->data) v = rng.normal(0.0, 0.05);
        shared.push_back(std::move(a));
    }
    for (PhmFactors* f : projections) {
        f->a_set = shared;
        f->shared_a = true;
    }
    return shared;
}

}  // namespace kpft
