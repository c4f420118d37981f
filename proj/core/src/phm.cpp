#include "kpft/phm.hpp"

#include <stdexcept>
#include <string>

namespace kpft {

void PhmFactors::validate() const {
    if (n < 1) throw std::invalid_argument("PhmFactors: n must be >= 1");
    if (k % n != 0 || d % n != 0)
        throw std::invalid_argument("PhmFactors: k and d must be divisible by n (k=" +
                                    std::to_string(k) + ", d=" + std::to_string(d) +
                                    ", n=" + std::to_string(n) + ")");
    if (static_cast<index>(a_set.size()) != n)
        throw std::invalid_argument("PhmFactors: expected n A matrices");
    for (const auto& a : a_set)
        if (!a || a->rows != n || a->cols != n)
            throw std::invalid_argument("PhmFactors: A_i must be n x n");
    const index kb = k / n, db = d / n;
    if (mode == PhmMode::direct) {
        if (static_cast<index>(b_set.size()) != n)
            throw std::invalid_argument("PhmFactors: expected n B matrices");
        for (const auto& b : b_set)
            if (!b || b->rows != kb || b->cols != db)
                throw std::invalid_argument("PhmFactors: B_i must be (k/n) x (d/n)");
    } else {
        if (rank < 1 || rank > std::min(kb, db))
            throw std::invalid_argument("PhmFactors: rank must satisfy 1 <= r <= min(k/n, d/n)");
        if (static_cast<index>(s_set.size()) != n || static_cast<index>(t_set.size()) != n)
            throw std::invalid_argument("PhmFactors: expected n (s_i, t_i) pairs");
        for (index i = 0; i < n; ++i) {
            if (!s_set[i] || s_set[i]->rows != kb || s_set[i]->cols != rank)
                throw std::invalid_argument("PhmFactors: s_i must be (k/n) x r");
            if (!t_set[i] || t_set[i]->rows != rank || t_set[i]->cols != db)
                throw std::invalid_argument("PhmFactors: t_i must be r x (d/n)");
        }
    }
    if (bias && (bias->rows != 1 || bias->cols != d))
        throw std::invalid_argument("PhmFactors: bias must be 1 x d");
}

Tensor2 PhmFactors::effective_b(index i) const {
    if (mode == PhmMode::direct) return *b_set[static_cast<size_t>(i)];
    return outer(*s_set[static_cast<size_t>(i)], *t_set[static_cast<size_t>(i)]);
}

Tensor2 materialize_w(const PhmFactors& f) {
    f.validate();
    Tensor2 w(f.k, f.d);
    for (index i = 0; i < f.n; ++i)
        w = add(w, kron(*f.a_set[static_cast<size_t>(i)], f.effective_b(i)));
    return w;
}

Tensor2 block_combine(const Tensor2& z, const Tensor2& a) {
    const index n = a.rows;
    const index groups = z.rows / n;
    const index w = z.cols;
    Tensor2 out(z.rows, w);
    for (index r = 0; r < groups; ++r) {
        for (index m = 0; m < n; ++m) {
            double* dst = &out.at(r * n + m, 0);
            for (index j = 0; j < n; ++j) {
                const double c = a.at(j, m);
                if (c == 0.0) continue;
                const double* src = &z.at(r * n + j, 0);
                for (index v = 0; v < w; ++v) dst[v] += c * src[v];
            }
        }
    }
    return out;
}

Tensor2 block_combine_adj(const Tensor2& z, const Tensor2& a) {
    const index n = a.rows;
    const index groups = z.rows / n;
    const index w = z.cols;
    Tensor2 out(z.rows, w);
    for (index r = 0; r < groups; ++r) {
        for (index j = 0; j < n; ++j) {
            double* dst = &out.at(r * n + j, 0);
            for (index m = 0; m < n; ++m) {
                const double c = a.at(j, m);
                if (c == 0.0) continue;
                const double* src = &z.at(r * n + m, 0);
                for (index v = 0; v < w; ++v) dst[v] += c * src[v];
            }
        }
    }
    return out;
}

namespace {

void check_apply_shapes(const Tensor2& x, const std::vector<const Tensor2*>& a_set,
                        const std::vector<const Tensor2*>& b_set) {
    if (a_set.empty() || a_set.size() != b_set.size())
        throw std::invalid_argument("phm_apply: need matching non-empty A and B sets");
    const index n = a_set[0]->rows;
    if (x.cols != n * b_set[0]->rows)
        throw std::invalid_argument("phm_apply: input width " + std::to_string(x.cols) +
                                    " does not match n * (k/n) = " +
                                    std::to_string(n * b_set[0]->rows));
}

}  // namespace

Tensor2 phm_apply_flat(const Tensor2& x, const std::vector<const Tensor2*>& a_set,
                       const std::vector<const Tensor2*>& b_set, const Tensor2* bias) {
    check_apply_shapes(x, a_set, b_set);
    const index n = a_set[0]->rows;
    const index kb = b_set[0]->rows;
    const index db = b_set[0]->cols;
    const index rows = x.rows;
    const index d = n * db;

    Tensor2 y(rows, d);
    if (bias) {
        for (index r = 0; r < rows; ++r)
            for (index c = 0; c < d; ++c) y.at(r, c) = bias->at(0, c);
    }

    const Tensor2 xb = reshape(x, rows * n, kb);
    for (index i = 0; i < n; ++i) {
        const Tensor2 z = matmul(xb, *b_set[static_cast<size_t>(i)]);
        const Tensor2 combined = block_combine(z, *a_set[static_cast<size_t>(i)]);
        for (size_t v = 0; v < y.data.size(); ++v) y.data[v] += combined.data[v];
    }
    return y;
}

PhmGrads phm_backward_flat(const Tensor2& x, const std::vector<const Tensor2*>& a_set,
                           const std::vector<const Tensor2*>& b_set, const Tensor2& g) {
    check_apply_shapes(x, a_set, b_set);
    const index n = a_set[0]->rows;
    const index kb = b_set[0]->rows;
    const index db = b_set[0]->cols;
    const index rows = x.rows;

    const Tensor2 xb = reshape(x, rows * n, kb);
    const Tensor2 gb = reshape(g, rows * n, db);

    PhmGrads out;
    out.x = Tensor2(rows, x.cols);
    Tensor2 dxb = reshape(out.x, rows * n, kb);
    out.bias = Tensor2(1, g.cols);
    for (index r = 0; r < rows; ++r)
        for (index c = 0; c < g.cols; ++c) out.bias.at(0, c) += g.at(r, c);

    for (index i = 0; i < n; ++i) {
        const Tensor2& a = *a_set[static_cast<size_t>(i)];
        const Tensor2& b = *b_set[static_cast<size_t>(i)];

        // dX blocks: sum_m A[j,m] * (G_m B^T)
        const Tensor2 zg = matmul(gb, transpose(b));
        const Tensor2 dxi = block_combine_adj(zg, a);
        for (size_t v = 0; v < dxb.data.size(); ++v) dxb.data[v] += dxi.data[v];

        // dA[j,m] = sum_r <Z_i[r,j,:], G[r,m,:]>
        const Tensor2 z = matmul(xb, b);
        Tensor2 da(n, n);
        for (index r = 0; r < rows; ++r)
            for (index j = 0; j < n; ++j) {
                const double* zrow = &z.at(r * n + j, 0);
                for (index m = 0; m < n; ++m) {
                    const double* grow = &gb.at(r * n + m, 0);
                    double acc = 0.0;
                    for (index v = 0; v < db; ++v) acc += zrow[v] * grow[v];
                    da.at(j, m) += acc;
                }
            }
        out.a.push_back(std::move(da));

        // dB_i = blocks(x)^T * H_i with H_i[.,j,:] = sum_m A[j,m] G[.,m,:]
        const Tensor2 h = block_combine_adj(gb, a);
        out.b.push_back(matmul(transpose(xb), h));
    }
    out.x = reshape(dxb, rows, x.cols);
    return out;
}

Tensor3 phm_apply(const PhmFactors& f, const Tensor3& x) {
    f.validate();
    if (x.cols != f.k)
        throw std::invalid_argument("phm_apply: last dim " + std::to_string(x.cols) +
                                    " != k = " + std::to_string(f.k));
    std::vector<Tensor2> b_eff;
    std::vector<const Tensor2*> a_ptr, b_ptr;
    b_eff.reserve(static_cast<size_t>(f.n));
    for (index i = 0; i < f.n; ++i) {
        b_eff.push_back(f.effective_b(i));
        a_ptr.push_back(f.a_set[static_cast<size_t>(i)].get());
    }
    for (const auto& b : b_eff) b_ptr.push_back(&b);
    const Tensor2 y = phm_apply_flat(flatten(x), a_ptr, b_ptr, f.bias.get());
    return unflatten(y, x.batch);
}

}  // namespace kpft
