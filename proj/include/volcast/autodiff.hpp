#pragma once

#include "volcast/tensor.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace volcast::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only meaningful together with
/// the tape that produced it.
struct Var {
    int index = -1;
    bool valid() const { return index >= 0; }
};

/// Records operations for reverse-mode differentiation. Every operation
/// evaluates eagerly and registers a backward rule expressed in terms of other
/// taped operations, so gradients are themselves differentiable and
/// higher-order derivatives come from repeated calls to gradients().
///
/// Confined to one thread; parameters bound via param() receive accumulated
/// gradients on backward().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // -- leaves -------------------------------------------------------------
    Var value(Tensor t);
    Var param(ParamTensor& p);

    // -- elementwise binary (numpy-style broadcast: equal rank with per-axis
    //    sizes equal or 1, or either operand a single-element scalar) --------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);

    // -- elementwise unary --------------------------------------------------
    Var neg(Var a);
    Var scale(Var a, double c);
    Var add_const(Var a, double c);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);
    Var abs(Var a);
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var softplus(Var a);
    Var leaky_relu(Var a, double negative_slope = 0.01);
    Var norm_cdf(Var a);
    Var clamp_min(Var a, double floor);

    // -- structure ----------------------------------------------------------
    Var reshape(Var a, Shape s);
    Var slice(Var a, int axis, int start, int length);
    Var concat(const std::vector<Var>& parts, int axis);
    Var broadcast_to(Var a, Shape s);

    // -- reductions ---------------------------------------------------------
    Var sum(Var a);                       // -> shape {1}
    Var mean(Var a);                      // -> shape {1}
    Var sum_axis(Var a, int axis);        // keeps the axis with size 1
    Var reduce_to_shape(Var a, Shape s);  // sum over axes broadcast from s

    // -- linear algebra -----------------------------------------------------
    Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);

    // -- convolution (stride 1, square zero padding) ------------------------
    // input (Cin,H,W) with kernel (Cout,Cin,kh,kw) -> (Cout,H',W')
    Var conv2d(Var input, Var kernel, int padding);
    // adjoint patterns, exposed because they are ordinary bilinear ops
    Var conv2d_input_grad(Var out_grad, Var kernel, int padding, Shape input_shape);
    Var conv2d_kernel_grad(Var out_grad, Var input, int padding, Shape kernel_shape);

    // -- softmax over one axis, max-stabilized ------------------------------
    Var softmax(Var a, int axis);

    // -- access -------------------------------------------------------------
    const Tensor& val(Var v) const;
    size_t node_count() const { return nodes_.size(); }

    /// Taped adjoints of a scalar output with respect to the given vars.
    /// The result vars live on this tape and can be differentiated again.
    std::vector<Var> gradients(Var output, std::span<const Var> wrt);

    /// Runs gradients() against every bound parameter reachable from the
    /// output and accumulates the values into each ParamTensor::grad.
    void backward(Var output);

    void clear();

private:
    // Backward rule: given the node's own Var and its adjoint, return one
    // adjoint contribution per parent (invalid Var = no contribution).
    using BackwardFn = std::function<std::vector<Var>(Tape&, Var, Var)>;

    struct Node {
        Tensor val;
        std::vector<Var> parents;
        BackwardFn backward;
        ParamTensor* bound = nullptr;
    };

    std::vector<Node> nodes_;

    Var emit(Tensor val, std::vector<Var> parents, BackwardFn backward);
    const Node& node(Var v) const;
    Var unary_pointwise(Var a, const std::function<double(double)>& f, const BackwardFn& backward);
};

/// Result of comparing a reverse-mode gradient element by element against
/// central finite differences over a descending ladder of step sizes (the
/// best step wins, so isolated activation kinks near a probe point do not
/// masquerade as gradient bugs).
struct GradCheckReport {
    double max_rel_error = 0.0;
    int worst_input = -1;
    int64_t worst_element = -1;
    bool pass = false;
};

/// function builds a scalar Var on the given tape from leaf vars created
/// from `points`. Throws ShapeError if the function output is not scalar.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

GradCheckReport grad_check(const ScalarFn& function, const std::vector<Tensor>& points, double tolerance);

} // namespace volcast::ad
