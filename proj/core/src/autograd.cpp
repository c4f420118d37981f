#include "kpft/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kpft {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Node& node_of(Var v) {
    if (!v.valid()) throw std::invalid_argument("autograd: use of an empty Var");
    return v.tape->at(v.id);
}

void check_same_tape(Var a, Var b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("autograd: use of an empty Var");
    if (a.tape != b.tape)
        throw std::invalid_argument("autograd: detached graph, operands live on different tapes");
}

bool is2(const TensorValue& v) { return std::holds_alternative<Tensor2>(v); }

const Tensor2& t2(const TensorValue& v) { return std::get<Tensor2>(v); }
const Tensor3& t3(const TensorValue& v) { return std::get<Tensor3>(v); }

std::vector<double>& raw(TensorValue& v) {
    return is2(v) ? std::get<Tensor2>(v).data : std::get<Tensor3>(v).data;
}
const std::vector<double>& raw(const TensorValue& v) {
    return is2(v) ? std::get<Tensor2>(v).data : std::get<Tensor3>(v).data;
}

TensorValue zeros_like(const TensorValue& v) {
    if (is2(v)) {
        const Tensor2& m = t2(v);
        return Tensor2(m.rows, m.cols);
    }
    const Tensor3& m = t3(v);
    return Tensor3(m.batch, m.rows, m.cols);
}

// (rows, last-dim) view of either rank, used by softmax
std::pair<index, index> row_view(const TensorValue& v) {
    if (is2(v)) return {t2(v).rows, t2(v).cols};
    return {t3(v).batch * t3(v).rows, t3(v).cols};
}

void ensure_grad(Node& n) {
    if (!n.has_grad) {
        n.grad = zeros_like(n.value);
        n.has_grad = true;
    }
}

void accumulate(Node& n, const std::vector<double>& delta) {
    ensure_grad(n);
    auto& g = raw(n.grad);
    for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

Var record(Tape& t, Node n) {
    for (const int p : n.parents)
        if (t.at(p).requires_grad) {
            n.requires_grad = true;
            break;
        }
    return Var{&t, t.push(std::move(n))};
}

}  // namespace

double gelu_value(double x) { return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_slope(double x) {
    const double phi_cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return phi_cdf + x * phi_pdf;
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Var leaf(Tape& t, Tensor2 v, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(v);
    return Var{&t, t.push(std::move(n))};
}

Var leaf(Tape& t, Tensor3 v, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(v);
    return Var{&t, t.push(std::move(n))};
}

const Tensor2& val2(Var v) { return t2(node_of(v).value); }
const Tensor3& val3(Var v) { return t3(node_of(v).value); }

const Tensor2& grad2(Var v) {
    Node& n = node_of(v);
    if (!n.has_grad) throw std::runtime_error("autograd: node has no gradient");
    return t2(n.grad);
}

const Tensor3& grad3(Var v) {
    Node& n = node_of(v);
    if (!n.has_grad) throw std::runtime_error("autograd: node has no gradient");
    return t3(n.grad);
}

bool has_grad(Var v) { return node_of(v).has_grad; }

Var add(Var a, Var b) {
    check_same_tape(a, b);
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    if (raw(na.value).size() != raw(nb.value).size() || is2(na.value) != is2(nb.value))
        throw std::invalid_argument("add: shape mismatch");
    Node n;
    n.op = Op::add;
    n.parents = {a.id, b.id};
    n.value = na.value;
    auto& out = raw(n.value);
    const auto& rhs = raw(nb.value);
    for (size_t i = 0; i < out.size(); ++i) out[i] += rhs[i];
    return record(*a.tape, std::move(n));
}

Var add_bias(Var x, Var bias) {
    check_same_tape(x, bias);
    const Tensor2& xv = val2(x);
    const Tensor2& bv = val2(bias);
    if (bv.rows != 1 || bv.cols != xv.cols)
        throw std::invalid_argument("add_bias: bias must be 1 x cols");
    Node n;
    n.op = Op::add_bias;
    n.parents = {x.id, bias.id};
    Tensor2 out = xv;
    for (index r = 0; r < out.rows; ++r)
        for (index c = 0; c < out.cols; ++c) out.at(r, c) += bv.at(0, c);
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var scale(Var x, double factor) {
    Node n;
    n.op = Op::scale_const;
    n.parents = {x.id};
    n.scalar = factor;
    n.value = node_of(x).value;
    for (auto& v : raw(n.value)) v *= factor;
    return record(*x.tape, std::move(n));
}

Var matmul(Var a, Var b) {
    check_same_tape(a, b);
    Node n;
    n.op = Op::matmul;
    n.parents = {a.id, b.id};
    n.value = matmul(val2(a), val2(b));
    return record(*a.tape, std::move(n));
}

Var kron(Var a, Var b) {
    check_same_tape(a, b);
    Node n;
    n.op = Op::kron;
    n.parents = {a.id, b.id};
    n.value = kron(val2(a), val2(b));
    return record(*a.tape, std::move(n));
}

Var outer(Var s, Var t) {
    if (val2(s).cols < 1) throw std::invalid_argument("outer: rank dimension must be >= 1");
    return matmul(s, t);
}

Var gelu(Var x) {
    Node n;
    n.op = Op::gelu;
    n.parents = {x.id};
    n.value = node_of(x).value;
    for (auto& v : raw(n.value)) v = gelu_value(v);
    return record(*x.tape, std::move(n));
}

namespace {

Var layer_norm_impl(Var x, Var gain, Var bias, bool with_bias) {
    check_same_tape(x, gain);
    const Tensor2& xv = val2(x);
    const Tensor2& gv = val2(gain);
    if (xv.cols == 0) throw std::invalid_argument("layer_norm: empty last dimension");
    if (gv.rows != 1 || gv.cols != xv.cols)
        throw std::invalid_argument("layer_norm: gain must be 1 x cols");
    if (with_bias) {
        check_same_tape(x, bias);
        const Tensor2& bv = val2(bias);
        if (bv.rows != 1 || bv.cols != xv.cols)
            throw std::invalid_argument("layer_norm: bias must be 1 x cols");
    }
    Node n;
    n.op = Op::layer_norm;
    n.parents = with_bias ? std::vector<int>{x.id, gain.id, bias.id}
                          : std::vector<int>{x.id, gain.id};
    Tensor2 out(xv.rows, xv.cols);
    const index c = xv.cols;
    for (index r = 0; r < xv.rows; ++r) {
        double mean = 0.0;
        for (index j = 0; j < c; ++j) mean += xv.at(r, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (index j = 0; j < c; ++j) {
            const double dv = xv.at(r, j) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (index j = 0; j < c; ++j) {
            const double xhat = (xv.at(r, j) - mean) * inv;
            double y = xhat * gv.at(0, j);
            if (with_bias) y += val2(bias).at(0, j);
            out.at(r, j) = y;
        }
    }
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

}  // namespace

Var layer_norm(Var x, Var gain) { return layer_norm_impl(x, gain, Var{}, false); }
Var layer_norm(Var x, Var gain, Var bias) { return layer_norm_impl(x, gain, bias, true); }

Var softmax(Var x) {
    Node n;
    n.op = Op::softmax;
    n.parents = {x.id};
    n.value = node_of(x).value;
    auto [rows, cols] = row_view(n.value);
    if (cols == 0) throw std::invalid_argument("softmax: empty last dimension");
    auto& data = raw(n.value);
    for (index r = 0; r < rows; ++r) {
        double* row = data.data() + r * cols;
        double mx = row[0];
        for (index j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (index j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (index j = 0; j < cols; ++j) row[j] *= inv;
    }
    return record(*x.tape, std::move(n));
}

Var cross_entropy(Var logits, std::vector<int32_t> targets) {
    const Tensor2& lv = val2(logits);
    if (static_cast<index>(targets.size()) != lv.rows)
        throw std::invalid_argument("cross_entropy: one target per row required");
    for (const int32_t t : targets)
        if (t < 0 || t >= lv.cols)
            throw std::invalid_argument("cross_entropy: target out of range");
    Node n;
    n.op = Op::cross_entropy;
    n.parents = {logits.id};
    n.ids = std::move(targets);
    double loss = 0.0;
    for (index r = 0; r < lv.rows; ++r) {
        double mx = lv.at(r, 0);
        for (index j = 1; j < lv.cols; ++j) mx = std::max(mx, lv.at(r, j));
        double sum = 0.0;
        for (index j = 0; j < lv.cols; ++j) sum += std::exp(lv.at(r, j) - mx);
        loss += std::log(sum) + mx - lv.at(r, n.ids[static_cast<size_t>(r)]);
    }
    Tensor2 out(1, 1);
    out.at(0, 0) = loss / static_cast<double>(lv.rows);
    n.value = std::move(out);
    return record(*logits.tape, std::move(n));
}

Var sum_all(Var x) {
    Node n;
    n.op = Op::sum_all;
    n.parents = {x.id};
    double s = 0.0;
    for (const double v : raw(node_of(x).value)) s += v;
    Tensor2 out(1, 1);
    out.at(0, 0) = s;
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var phm_linear(Var x, const std::vector<Var>& a_set, const std::vector<Var>& b_set,
               Var bias) {
    if (a_set.empty() || a_set.size() != b_set.size())
        throw std::invalid_argument("phm_linear: need matching non-empty A and B sets");
    std::vector<const Tensor2*> a_ptr, b_ptr;
    Node n;
    n.op = Op::phm_linear;
    n.parents.push_back(x.id);
    for (const Var a : a_set) {
        check_same_tape(x, a);
        n.parents.push_back(a.id);
        a_ptr.push_back(&val2(a));
    }
    for (const Var b : b_set) {
        check_same_tape(x, b);
        n.parents.push_back(b.id);
        b_ptr.push_back(&val2(b));
    }
    n.i0 = static_cast<index>(a_set.size());
    const Tensor2* bias_ptr = nullptr;
    if (bias.valid()) {
        check_same_tape(x, bias);
        n.parents.push_back(bias.id);
        bias_ptr = &val2(bias);
        n.scalar = 1.0;  // marks bias presence
    }
    n.value = phm_apply_flat(val2(x), a_ptr, b_ptr, bias_ptr);
    return record(*x.tape, std::move(n));
}

Var flatten3(Var x) {
    Node n;
    n.op = Op::flatten3;
    n.parents = {x.id};
    const Tensor3& v = val3(x);
    n.i0 = v.batch;
    n.value = flatten(v);
    return record(*x.tape, std::move(n));
}

Var unflatten3(Var x, index batch) {
    Node n;
    n.op = Op::unflatten3;
    n.parents = {x.id};
    n.i0 = batch;
    n.value = unflatten(val2(x), batch);
    return record(*x.tape, std::move(n));
}

Var split_heads(Var x, index heads) {
    const Tensor3& v = val3(x);
    if (heads < 1 || v.cols % heads != 0)
        throw std::invalid_argument("split_heads: width not divisible by head count");
    Node n;
    n.op = Op::split_heads;
    n.parents = {x.id};
    n.i0 = heads;
    const index hd = v.cols / heads;
    Tensor3 out(v.batch * heads, v.rows, hd);
    for (index b = 0; b < v.batch; ++b)
        for (index s = 0; s < v.rows; ++s)
            for (index h = 0; h < heads; ++h)
                for (index j = 0; j < hd; ++j)
                    out.at(b * heads + h, s, j) = v.at(b, s, h * hd + j);
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var merge_heads(Var x, index heads) {
    const Tensor3& v = val3(x);
    if (heads < 1 || v.batch % heads != 0)
        throw std::invalid_argument("merge_heads: batch not divisible by head count");
    Node n;
    n.op = Op::merge_heads;
    n.parents = {x.id};
    n.i0 = heads;
    Tensor3 out(v.batch / heads, v.rows, v.cols * heads);
    for (index b = 0; b < out.batch; ++b)
        for (index s = 0; s < v.rows; ++s)
            for (index h = 0; h < heads; ++h)
                for (index j = 0; j < v.cols; ++j)
                    out.at(b, s, h * v.cols + j) = v.at(b * heads + h, s, j);
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var bmm(Var a, Var b) {
    check_same_tape(a, b);
    const Tensor3& av = val3(a);
    const Tensor3& bv = val3(b);
    if (av.batch != bv.batch || av.cols != bv.rows)
        throw std::invalid_argument("bmm: shape mismatch");
    Node n;
    n.op = Op::bmm;
    n.parents = {a.id, b.id};
    Tensor3 out(av.batch, av.rows, bv.cols);
    for (index bt = 0; bt < av.batch; ++bt)
        for (index i = 0; i < av.rows; ++i)
            for (index l = 0; l < av.cols; ++l) {
                const double ail = av.at(bt, i, l);
                if (ail == 0.0) continue;
                for (index j = 0; j < bv.cols; ++j)
                    out.at(bt, i, j) += ail * bv.at(bt, l, j);
            }
    n.value = std::move(out);
    return record(*a.tape, std::move(n));
}

Var transpose_last(Var x) {
    const Tensor3& v = val3(x);
    Node n;
    n.op = Op::transpose_last;
    n.parents = {x.id};
    Tensor3 out(v.batch, v.cols, v.rows);
    for (index b = 0; b < v.batch; ++b)
        for (index r = 0; r < v.rows; ++r)
            for (index c = 0; c < v.cols; ++c) out.at(b, c, r) = v.at(b, r, c);
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var embed(Var table, std::vector<int32_t> ids, index batch, index seq) {
    const Tensor2& tv = val2(table);
    if (static_cast<index>(ids.size()) != batch * seq)
        throw std::invalid_argument("embed: id count != batch * seq");
    for (const int32_t id : ids)
        if (id < 0 || id >= tv.rows)
            throw std::invalid_argument("embed: token id " + std::to_string(id) +
                                        " out of vocabulary range");
    Node n;
    n.op = Op::embed;
    n.parents = {table.id};
    n.ids = std::move(ids);
    Tensor3 out(batch, seq, tv.cols);
    for (index b = 0; b < batch; ++b)
        for (index s = 0; s < seq; ++s) {
            const index row = n.ids[static_cast<size_t>(b * seq + s)];
            for (index j = 0; j < tv.cols; ++j) out.at(b, s, j) = tv.at(row, j);
        }
    n.value = std::move(out);
    return record(*table.tape, std::move(n));
}

Var add_position(Var x, Var pos) {
    check_same_tape(x, pos);
    const Tensor3& xv = val3(x);
    const Tensor2& pv = val2(pos);
    if (pv.rows < xv.rows || pv.cols != xv.cols)
        throw std::invalid_argument("add_position: position table too small");
    Node n;
    n.op = Op::add_position;
    n.parents = {x.id, pos.id};
    Tensor3 out = xv;
    for (index b = 0; b < out.batch; ++b)
        for (index s = 0; s < out.rows; ++s)
            for (index j = 0; j < out.cols; ++j) out.at(b, s, j) += pv.at(s, j);
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

Var mean_pool(Var x, index seq) {
    const Tensor2& xv = val2(x);
    if (seq < 1 || xv.rows % seq != 0)
        throw std::invalid_argument("mean_pool: rows not divisible by sequence length");
    Node n;
    n.op = Op::mean_pool;
    n.parents = {x.id};
    n.i0 = seq;
    const index batch = xv.rows / seq;
    Tensor2 out(batch, xv.cols);
    const double inv = 1.0 / static_cast<double>(seq);
    for (index b = 0; b < batch; ++b)
        for (index s = 0; s < seq; ++s)
            for (index j = 0; j < xv.cols; ++j) out.at(b, j) += xv.at(b * seq + s, j) * inv;
    n.value = std::move(out);
    return record(*x.tape, std::move(n));
}

void backward(Var loss) {
    if (!loss.valid()) throw std::invalid_argument("backward: empty Var");
    const Node& n = node_of(loss);
    if (!is2(n.value) || t2(n.value).rows != 1 || t2(n.value).cols != 1)
        throw std::invalid_argument("backward: loss must be a 1x1 scalar");
    loss.tape->run_backward(loss.id);
}

void Tape::run_backward(int loss_id) {
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad = TensorValue{};
    }
    Node& loss = at(loss_id);
    ensure_grad(loss);
    raw(loss.grad)[0] = 1.0;
    for (int id = loss_id; id >= 0; --id) {
        Node& n = at(id);
        if (!n.requires_grad || !n.has_grad || n.op == Op::leaf) continue;
        backprop_node(id);
    }
}

void Tape::backprop_node(int id) {
    Node& n = at(id);
    const auto& g = raw(n.grad);

    auto parent = [&](size_t i) -> Node& { return at(n.parents[i]); };
    auto push_to = [&](size_t i, const std::vector<double>& delta) {
        Node& p = parent(i);
        if (p.requires_grad) accumulate(p, delta);
    };

    switch (n.op) {
        case Op::leaf:
            break;
        case Op::add: {
            push_to(0, g);
            push_to(1, g);
            break;
        }
        case Op::add_bias: {
            push_to(0, g);
            Node& pb = parent(1);
            if (pb.requires_grad) {
                const Tensor2& gv = t2(n.grad);
                Tensor2 db(1, gv.cols);
                for (index r = 0; r < gv.rows; ++r)
                    for (index c = 0; c < gv.cols; ++c) db.at(0, c) += gv.at(r, c);
                accumulate(pb, db.data);
            }
            break;
        }
        case Op::scale_const: {
            Node& p = parent(0);
            if (p.requires_grad) {
                std::vector<double> d = g;
                for (auto& v : d) v *= n.scalar;
                accumulate(p, d);
            }
            break;
        }
        case Op::matmul: {
            const Tensor2& gv = t2(n.grad);
            const Tensor2& av = t2(parent(0).value);
            const Tensor2& bv = t2(parent(1).value);
            if (parent(0).requires_grad) accumulate(parent(0), matmul(gv, transpose(bv)).data);
            if (parent(1).requires_grad) accumulate(parent(1), matmul(transpose(av), gv).data);
            break;
        }
        case Op::kron: {
            // W = kron(A, B); dA[i,j] = <G_block(i,j), B>_F,
            // dB = sum_{i,j} A[i,j] * G_block(i,j)
            const Tensor2& gv = t2(n.grad);
            const Tensor2& av = t2(parent(0).value);
            const Tensor2& bv = t2(parent(1).value);
            const index p = bv.rows, q = bv.cols;
            if (parent(0).requires_grad) {
                Tensor2 da(av.rows, av.cols);
                for (index i = 0; i < av.rows; ++i)
                    for (index j = 0; j < av.cols; ++j) {
                        double acc = 0.0;
                        for (index u = 0; u < p; ++u)
                            for (index v = 0; v < q; ++v)
                                acc += gv.at(i * p + u, j * q + v) * bv.at(u, v);
                        da.at(i, j) = acc;
                    }
                accumulate(parent(0), da.data);
            }
            if (parent(1).requires_grad) {
                Tensor2 db(p, q);
                for (index i = 0; i < av.rows; ++i)
                    for (index j = 0; j < av.cols; ++j) {
                        const double aij = av.at(i, j);
                        if (aij == 0.0) continue;
                        for (index u = 0; u < p; ++u)
                            for (index v = 0; v < q; ++v)
                                db.at(u, v) += aij * gv.at(i * p + u, j * q + v);
                    }
                accumulate(parent(1), db.data);
            }
            break;
        }
        case Op::gelu: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const auto& xv = raw(p.value);
                std::vector<double> d(g.size());
                for (size_t i = 0; i < g.size(); ++i) d[i] = g[i] * gelu_slope(xv[i]);
                accumulate(p, d);
            }
            break;
        }
        case Op::layer_norm: {
            const Tensor2& xv = t2(parent(0).value);
            const Tensor2& gainv = t2(parent(1).value);
            const Tensor2& gv = t2(n.grad);
            const index c = xv.cols;
            const double invc = 1.0 / static_cast<double>(c);
            Tensor2 dx(xv.rows, c), dgain(1, c), dbias(1, c);
            for (index r = 0; r < xv.rows; ++r) {
                double mean = 0.0;
                for (index j = 0; j < c; ++j) mean += xv.at(r, j);
                mean *= invc;
                double var = 0.0;
                for (index j = 0; j < c; ++j) {
                    const double dv = xv.at(r, j) - mean;
                    var += dv * dv;
                }
                var *= invc;
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (index j = 0; j < c; ++j) {
                    const double xhat = (xv.at(r, j) - mean) * inv;
                    const double dxhat = gv.at(r, j) * gainv.at(0, j);
                    dgain.at(0, j) += gv.at(r, j) * xhat;
                    dbias.at(0, j) += gv.at(r, j);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                sum_dxhat *= invc;
                sum_dxhat_xhat *= invc;
                for (index j = 0; j < c; ++j) {
                    const double xhat = (xv.at(r, j) - mean) * inv;
                    const double dxhat = gv.at(r, j) * gainv.at(0, j);
                    dx.at(r, j) = inv * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            push_to(0, dx.data);
            push_to(1, dgain.data);
            if (n.parents.size() == 3) push_to(2, dbias.data);
            break;
        }
        case Op::softmax: {
            Node& p = parent(0);
            if (p.requires_grad) {
                auto [rows, cols] = row_view(n.value);
                const auto& y = raw(n.value);
                std::vector<double> d(g.size());
                for (index r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * cols;
                    const double* gr = g.data() + r * cols;
                    double dot = 0.0;
                    for (index j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                    double* dr = d.data() + r * cols;
                    for (index j = 0; j < cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
                }
                accumulate(p, d);
            }
            break;
        }
        case Op::cross_entropy: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor2& lv = t2(p.value);
                const double gs = g[0] / static_cast<double>(lv.rows);
                Tensor2 d(lv.rows, lv.cols);
                for (index r = 0; r < lv.rows; ++r) {
                    double mx = lv.at(r, 0);
                    for (index j = 1; j < lv.cols; ++j) mx = std::max(mx, lv.at(r, j));
                    double sum = 0.0;
                    for (index j = 0; j < lv.cols; ++j) sum += std::exp(lv.at(r, j) - mx);
                    const double inv = 1.0 / sum;
                    for (index j = 0; j < lv.cols; ++j)
                        d.at(r, j) = gs * std::exp(lv.at(r, j) - mx) * inv;
                    d.at(r, n.ids[static_cast<size_t>(r)]) -= gs;
                }
                accumulate(p, d.data);
            }
            break;
        }
        case Op::sum_all: {
            Node& p = parent(0);
            if (p.requires_grad) {
                std::vector<double> d(raw(p.value).size(), g[0]);
                accumulate(p, d);
            }
            break;
        }
        case Op::phm_linear: {
            const index cnt = n.i0;
            const bool with_bias = n.scalar != 0.0;
            const Tensor2& xv = t2(parent(0).value);
            std::vector<const Tensor2*> a_ptr, b_ptr;
            for (index i = 0; i < cnt; ++i)
                a_ptr.push_back(&t2(parent(static_cast<size_t>(1 + i)).value));
            for (index i = 0; i < cnt; ++i)
                b_ptr.push_back(&t2(parent(static_cast<size_t>(1 + cnt + i)).value));
            const PhmGrads grads = phm_backward_flat(xv, a_ptr, b_ptr, t2(n.grad));
            push_to(0, grads.x.data);
            for (index i = 0; i < cnt; ++i)
                push_to(static_cast<size_t>(1 + i), grads.a[static_cast<size_t>(i)].data);
            for (index i = 0; i < cnt; ++i)
                push_to(static_cast<size_t>(1 + cnt + i), grads.b[static_cast<size_t>(i)].data);
            if (with_bias) push_to(n.parents.size() - 1, grads.bias.data);
            break;
        }
        case Op::flatten3:
        case Op::unflatten3: {
            push_to(0, g);  // same element layout on both sides
            break;
        }
        case Op::split_heads: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor3& xv = t3(p.value);
                const Tensor3& gv = t3(n.grad);
                const index heads = n.i0;
                const index hd = xv.cols / heads;
                Tensor3 d(xv.batch, xv.rows, xv.cols);
                for (index b = 0; b < xv.batch; ++b)
                    for (index s = 0; s < xv.rows; ++s)
                        for (index h = 0; h < heads; ++h)
                            for (index j = 0; j < hd; ++j)
                                d.at(b, s, h * hd + j) = gv.at(b * heads + h, s, j);
                accumulate(p, d.data);
            }
            break;
        }
        case Op::merge_heads: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor3& xv = t3(p.value);
                const Tensor3& gv = t3(n.grad);
                const index heads = n.i0;
                Tensor3 d(xv.batch, xv.rows, xv.cols);
                for (index b = 0; b < gv.batch; ++b)
                    for (index s = 0; s < gv.rows; ++s)
                        for (index h = 0; h < heads; ++h)
                            for (index j = 0; j < xv.cols; ++j)
                                d.at(b * heads + h, s, j) = gv.at(b, s, h * xv.cols + j);
                accumulate(p, d.data);
            }
            break;
        }
        case Op::bmm: {
            const Tensor3& av = t3(parent(0).value);
            const Tensor3& bv = t3(parent(1).value);
            const Tensor3& gv = t3(n.grad);
            if (parent(0).requires_grad) {
                Tensor3 da(av.batch, av.rows, av.cols);
                for (index bt = 0; bt < av.batch; ++bt)
                    for (index i = 0; i < av.rows; ++i)
                        for (index l = 0; l < av.cols; ++l) {
                            double acc = 0.0;
                            for (index j = 0; j < bv.cols; ++j)
                                acc += gv.at(bt, i, j) * bv.at(bt, l, j);
                            da.at(bt, i, l) = acc;
                        }
                accumulate(parent(0), da.data);
            }
            if (parent(1).requires_grad) {
                Tensor3 db(bv.batch, bv.rows, bv.cols);
                for (index bt = 0; bt < av.batch; ++bt)
                    for (index l = 0; l < av.cols; ++l)
                        for (index i = 0; i < av.rows; ++i) {
                            const double ail = av.at(bt, i, l);
                            if (ail == 0.0) continue;
                            for (index j = 0; j < bv.cols; ++j)
                                db.at(bt, l, j) += ail * gv.at(bt, i, j);
                        }
                accumulate(parent(1), db.data);
            }
            break;
        }
        case Op::transpose_last: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor3& gv = t3(n.grad);
                Tensor3 d(gv.batch, gv.cols, gv.rows);
                for (index b = 0; b < gv.batch; ++b)
                    for (index r = 0; r < gv.rows; ++r)
                        for (index c = 0; c < gv.cols; ++c) d.at(b, c, r) = gv.at(b, r, c);
                accumulate(p, d.data);
            }
            break;
        }
        case Op::embed: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor2& tv = t2(p.value);
                const Tensor3& gv = t3(n.grad);
                Tensor2 d(tv.rows, tv.cols);
                for (index b = 0; b < gv.batch; ++b)
                    for (index s = 0; s < gv.rows; ++s) {
                        const index row = n.ids[static_cast<size_t>(b * gv.rows + s)];
                        for (index j = 0; j < gv.cols; ++j) d.at(row, j) += gv.at(b, s, j);
                    }
                accumulate(p, d.data);
            }
            break;
        }
        case Op::add_position: {
            push_to(0, g);
            Node& pp = parent(1);
            if (pp.requires_grad) {
                const Tensor2& pv = t2(pp.value);
                const Tensor3& gv = t3(n.grad);
                Tensor2 d(pv.rows, pv.cols);
                for (index b = 0; b < gv.batch; ++b)
                    for (index s = 0; s < gv.rows; ++s)
                        for (index j = 0; j < gv.cols; ++j) d.at(s, j) += gv.at(b, s, j);
                accumulate(pp, d.data);
            }
            break;
        }
        case Op::mean_pool: {
            Node& p = parent(0);
            if (p.requires_grad) {
                const Tensor2& xv = t2(p.value);
                const Tensor2& gv = t2(n.grad);
                const index seq = n.i0;
                const double inv = 1.0 / static_cast<double>(seq);
                Tensor2 d(xv.rows, xv.cols);
                for (index b = 0; b < gv.rows; ++b)
                    for (index s = 0; s < seq; ++s)
                        for (index j = 0; j < xv.cols; ++j)
                            d.at(b * seq + s, j) = gv.at(b, j) * inv;
                accumulate(p, d.data);
            }
            break;
        }
    }
}

}  // namespace kpft
