#pragma once

#include "volcast/autodiff.hpp"

#include <random>

namespace volcast::nn {

using ad::ParamTensor;
using ad::shape_str;
using ad::Shape;
using ad::Tensor;

/// Uniform in [lo, hi) from raw mt19937_64 bits, identical on every platform.
double portable_uniform(std::mt19937_64& rng, double lo, double hi);

/// Uniform tensor in ±1/sqrt(fan_in), the usual fan-based init bound.
/// Uniform(-gain/sqrt(fan_in), +gain/sqrt(fan_in)). The default gain suits
/// sigmoid/tanh gates; convolutions followed by a leaky rectifier want
/// kLeakyGain to keep deep stacks from attenuating their inputs.
inline constexpr double kLeakyGain = 2.449489742783178; // sqrt(6)
Tensor fan_uniform(Shape s, int fan_in, std::mt19937_64& rng, double gain = 1.0);

/// Hands out tape-bound weight Vars in the order parameters were declared.
/// Keeping consumption order identical to declaration order is what lets a
/// gradient-check rebuild the same graph from plain leaf vars.
struct WeightVars {
    std::vector<ad::Var> vars;
    size_t next = 0;
    ad::Var take();
};

/// Binds every parameter to the tape, in order.
WeightVars bind_all(ad::Tape& tape, std::vector<ParamTensor*> params);

/// 1x1 convolution expressed as a channel-mixing matmul. w: (out,in,1,1) or
/// (out,in); x: (in,H,W) -> (out,H,W).
ad::Var conv1x1(ad::Tape& t, ad::Var w, ad::Var x);

} // namespace volcast::nn
