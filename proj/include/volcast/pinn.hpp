#pragma once

#include "volcast/nn.hpp"

#include <cstdint>

namespace volcast::pinn {

using ad::ParamTensor;
using ad::Shape;
using ad::shape_str;
using ad::Tensor;
using ad::Var;

struct PinnConfig {
    int hidden = 10000;      // single hidden layer width, both nets
    double spot_scale = 1.0; // first training day's spot; S (and K) normalizer
};

/// Two single-hidden-layer softplus networks over (S, tau, m, r): one for the
/// call price, one for the volatility (softplus head, strictly positive).
/// The moneyness input is rebuilt as K/S on the tape, so input derivatives
/// with respect to S hold the strike fixed — the differentiation the pricing
/// equation needs.
class PinnModel {
public:
    PinnModel(PinnConfig cfg, uint64_t seed);

    const PinnConfig& config() const { return cfg_; }
    std::vector<ParamTensor*> parameters();

    struct Eval {
        Var call, sigma;    // (B,1) each
        Var spot_leaf, tau_leaf; // differentiate against these
    };

    /// batch: (B,4) raw rows [S, tau, m, r].
    Eval forward(ad::Tape& t, const Tensor& batch, nn::WeightVars& weights) const;
    Eval forward(ad::Tape& t, const Tensor& batch);

    struct Loss {
        Var total, sigma_term, pde_term;
        Eval eval;
    };

    /// Mean absolute volatility error plus mean absolute pricing-equation
    /// residual, the residual built from taped input-derivatives of the call
    /// net and the volatility net's output.
    Loss loss(ad::Tape& t, const Tensor& batch, const Tensor& sigma_true, nn::WeightVars& weights) const;
    Loss loss(ad::Tape& t, const Tensor& batch, const Tensor& sigma_true);

private:
    PinnConfig cfg_;
    std::vector<ParamTensor> params_;
};

} // namespace volcast::pinn
