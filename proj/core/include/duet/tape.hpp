#pragma once

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

#include <functional>
#include <vector>

namespace duet {

class Tape;

// Handle into a Tape node. Cheap to copy; valid until Tape::reset().
struct Var {
    Tape* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    const Tensor& val() const;
};

// Reverse-mode autodiff over Tensor-valued nodes. Nodes are appended in
// evaluation order, so walking the arena backwards is a valid reverse
// topological order. One Tape instance per training step.
class Tape {
public:
    // ---- leaves ----
    Var input(Tensor value, bool needs_grad);
    Var constant(Tensor value) { return input(std::move(value), false); }

    // ---- elementwise / broadcast ----
    Var add(Var a, Var b);
    Var add_scaled(Var a, Var b, double c);  // a + c*b
    Var add_rowvec(Var a, Var r);           // a[m,n] + broadcast r[1,n]
    Var add_const(Var a, const Tensor& c);  // additive mask, no grad through c
    Var scale(Var a, double c);
    Var hadamard(Var a, Var b);
    Var relu(Var a);
    Var swish(Var a);
    Var sigmoid(Var a);
    Var glu(Var a);  // [m,2n] -> first half gated by sigmoid of second half

    // ---- linear algebra ----
    Var matmul(Var a, Var b);     // a[m,k] @ b[k,n]
    Var matmul_nt(Var a, Var b);  // a[m,k] @ b[n,k]^T

    // ---- normalization / rows ----
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var softmax_rows(Var x);
    Var log_softmax_rows(Var x);

    // ---- shape plumbing ----
    Var reshape(Var a, std::vector<int> shape);  // same numel, contiguous
    Var concat_rows(Var a, Var b);
    Var slice_rows(Var a, int r0, int r1);
    Var slice_cols(Var a, int c0, int c1);
    Var concat_cols(const std::vector<Var>& parts);

    // ---- masking / corruption ----
    Var mul_rowmask(Var a, const std::vector<double>& row_scale);
    // out[i] = flags[i] ? replacement : a[i]; grads route accordingly.
    Var replace_rows(Var a, Var replacement_row, const std::vector<uint8_t>& flags);
    Var dropout(Var a, double p, Rng& rng);

    // ---- embeddings / convolution ----
    Var gather_rows(Var table, const std::vector<int>& ids);
    // x[T,d] depthwise-convolved along T with w[k,d] (same padding), plus bias[1,d].
    Var depthwise_conv1d(Var x, Var w, Var bias);
    // Channels-last conv: x[H,W,Cin], w[Cout,3,3,Cin], bias[1,Cout], stride 2,
    // same padding. Output [ceil(H/2), ceil(W/2), Cout].
    Var conv2d_s2(Var x, Var w, Var bias);

    // ---- reductions / losses ----
    Var sum_all(Var a);
    // Sum of -log softmax(logits)[i, target[i]] over rows with target >= 0.
    Var cross_entropy_sum(Var logits, const std::vector<int>& targets);
    // CTC negative log-likelihood (forward algorithm in log space).
    // Throws NoAlignment when |labels| plus required blanks exceeds T.
    Var ctc_loss(Var logits, const std::vector<int>& labels, int blank);

    // ---- engine ----
    void backward(Var loss);
    const Tensor& grad(Var v) const;
    bool has_grad(Var v) const;
    size_t num_nodes() const { return nodes_.size(); }
    void reset();

    const Tensor& value(int idx) const { return nodes_[idx].val; }

private:
    struct Node {
        Tensor val;
        Tensor grad;  // empty until touched during backward
        std::function<void()> back;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;

    int push(Tensor val, bool needs_grad) {
        nodes_.push_back(Node{std::move(val), Tensor{}, nullptr, needs_grad});
        return int(nodes_.size()) - 1;
    }
    bool ng(Var v) const { return nodes_[v.idx].needs_grad; }
    Tensor& grad_buf(int idx);

    friend struct Var;
};

inline const Tensor& Var::val() const { return tape->value(idx); }

}  // namespace duet
