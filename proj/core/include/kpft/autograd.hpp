#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "kpft/phm.hpp"
#include "kpft/tensor.hpp"

namespace kpft {

// Define-by-run reverse-mode engine. A Tape owns the recorded graph for one
// forward pass and is rebuilt every step; Vars are cheap handles into it.
// Backward walks the tape once in reverse insertion order with fixed-order
// accumulation, so gradients are bitwise reproducible.

using TensorValue = std::variant<Tensor2, Tensor3>;

enum class Op : uint8_t {
    leaf,
    add,
    add_bias,
    scale_const,
    matmul,
    kron,
    gelu,
    layer_norm,
    softmax,
    cross_entropy,
    sum_all,
    phm_linear,
    flatten3,
    unflatten3,
    split_heads,
    merge_heads,
    bmm,
    transpose_last,
    embed,
    add_position,
    mean_pool,
};

struct Node {
    Op op = Op::leaf;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<int> parents;
    TensorValue value;
    TensorValue grad;
    double scalar = 0.0;        // scale_const factor
    index i0 = 0;               // per-op integer (heads, batch, seq, n, ...)
    std::vector<int32_t> ids;   // embed / cross_entropy integer inputs
};

class Tape {
  public:
    int push(Node n);
    Node& at(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& at(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }
    void run_backward(int loss_id);

  private:
    void backprop_node(int id);
    std::vector<Node> nodes_;
};

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// leaves
Var leaf(Tape& t, Tensor2 v, bool requires_grad = false);
Var leaf(Tape& t, Tensor3 v, bool requires_grad = false);

// value / gradient access
const Tensor2& val2(Var v);
const Tensor3& val3(Var v);
const Tensor2& grad2(Var v);
const Tensor3& grad3(Var v);
bool has_grad(Var v);

// ops
Var add(Var a, Var b);
Var add_bias(Var x, Var bias);
Var scale(Var x, double factor);
Var matmul(Var a, Var b);
Var kron(Var a, Var b);
Var outer(Var s, Var t);
Var gelu(Var x);
Var layer_norm(Var x, Var gain);
Var layer_norm(Var x, Var gain, Var bias);
Var softmax(Var x);
Var cross_entropy(Var logits, std::vector<int32_t> targets);
Var sum_all(Var x);
// x [R x k] -> [R x d]; a_set/b_set are Vars of the A_i / effective B_i
Var phm_linear(Var x, const std::vector<Var>& a_set, const std::vector<Var>& b_set,
               Var bias = Var{});
Var flatten3(Var x);
Var unflatten3(Var x, index batch);
Var split_heads(Var x, index heads);
Var merge_heads(Var x, index heads);
Var bmm(Var a, Var b);
Var transpose_last(Var x);
Var embed(Var table, std::vector<int32_t> ids, index batch, index seq);
Var add_position(Var x, Var pos);
Var mean_pool(Var x, index seq);

// populate gradients of every requires_grad node reachable from loss
void backward(Var loss);

// exact erf-based GeLU, x * Phi(x)
double gelu_value(double x);
double gelu_slope(double x);

constexpr double kLayerNormEps = 1e-6;

}  // namespace kpft
