#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kanlab/tensor.hpp"

namespace kanlab {

// Trainable (or frozen) tensor with a gradient accumulator of the same shape.
struct Parameter {
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor v, bool trainable_ = true)
        : value(std::move(v)), grad(Tensor::zeros_like(value)), trainable(trainable_) {}

    void zero_grad() { grad.fill(0.0); }
};

enum class Op : std::uint8_t {
    leaf,
    add,
    mul,
    scale,
    sin,
    cos,
    tanh,
    exp,
    silu,
    relu,
    sum_axes,
    reshape,
    matmul,
    edge_contract,
    bspline_basis,
    combine,
    cross_entropy,
    mse,
};

const char* op_name(Op op);

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Values are computed eagerly; a backward record is pushed
// only when the output requires grad (and the tape is recording), so forward
// passes over frozen parameters leave the node list empty.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. `sink` (if non-null) receives accumulated gradients on backward.
    Var leaf(Tensor value, Tensor* sink = nullptr);
    Var leaf(Parameter& p);
    Var constant(Tensor value) { return leaf(std::move(value), nullptr); }

    const Tensor& value(Var v) const { return slots_[check(v)].value; }
    bool requires_grad(Var v) const { return slots_[check(v)].requires_grad; }

    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var sin(Var a);
    Var cos(Var a);
    Var tanh(Var a);
    Var exp(Var a);
    Var silu(Var a);
    Var relu(Var a);
    Var sum(Var a);                                 // full reduction to a scalar
    Var sum_axes(Var a, std::vector<int> axes);     // keeps non-reduced dims
    Var reshape(Var a, std::vector<std::size_t> shape);
    Var matmul(Var a, Var b, bool transpose_b = false);
    // amplitudes [o,i,g] contracted with activations [b,i,g] -> [b,o]
    Var edge_contract(Var amplitudes, Var activations);
    // Cox-de Boor basis of degree `degree` over `knots`; x is clamped to the
    // active knot range. x [b,d] -> [b, d, n_basis].
    Var bspline_basis(Var x, const std::vector<double>& knots, int degree);
    // base + spline + bias (bias broadcast over rows), charged as one combine.
    Var combine(Var base, Var spline, Var bias);
    Var cross_entropy(Var logits, const std::vector<int>& labels);
    Var mse(Var pred, Var target);

    // Seeds d(loss)/d(loss)=1 and sweeps nodes in reverse insertion order,
    // then accumulates leaf adjoints into their sinks (+=).
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }
    bool recording() const { return recording_; }

private:
    struct Slot {
        Tensor value;
        bool requires_grad = false;
        Tensor* sink = nullptr;
    };
    struct Node {
        Op op = Op::leaf;
        int a = -1, b = -1, c = -1;
        int out = -1;
        double scalar = 0.0;           // scale factor
        bool flag = false;             // matmul transpose_b
        std::vector<int> iaux;         // labels / axes / degree
        std::vector<std::size_t> saux; // original shape for reshape
        Tensor taux;                   // cached softmax / knot vector
    };

    int check(Var v) const;
    Var push_value(Tensor value, bool requires);
    void record(Node n);
    Tensor& adjoint(int id);
    void check_finite(const Tensor& t, Op op, int out_id) const;

    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
    std::vector<Tensor> adjoints_;   // lazily sized in backward
};

// Max over all coordinates of |analytic - central difference| /
// max(1, |central difference|). `fn` must rebuild the forward pass on the
// given tape from the live parameter values.
double grad_check(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                  double eps);

void zero_grads(std::span<Parameter* const> params);

}  // namespace kanlab
