#pragma once

#include "volcast/convtf.hpp"
#include "volcast/surface_data.hpp"

namespace volcast::pi {

using ad::ParamTensor;
using ad::Shape;
using ad::Tensor;
using ad::Var;

/// How the physics residual obtains the price derivatives.
///  - pointwise_analytic: differentiate each cell's closed-form price in its
///    own (S, tau). The pricing identity makes this residual vanish to
///    rounding noise for any positive sigma grid, which doubles as the
///    correctness oracle for the chain-rule path.
///  - grid_homogeneity: finite differences of the evaluated price surface
///    along the strike and maturity axes, with strike derivatives converted
///    to spot derivatives through Euler homogeneity. Sensitive to the shape
///    of the predicted smile.
enum class DerivativeMode { pointwise_analytic, grid_homogeneity };

struct PhysicsLossConfig {
    double lambda = 0.1;
    DerivativeMode mode = DerivativeMode::pointwise_analytic;
    double vol_floor = 1e-4; // nonpositive predictions are clamped, not fatal
};

struct CallGrid {
    Var call;        // same (H,W) layout as the market matrices
    int clamped = 0; // cells whose sigma sat below the floor
};

/// Elementwise closed-form call prices for a predicted volatility grid on the
/// target day's market state. sigma_pred is (H,W) or (1,H,W).
CallGrid eval_call_grid(ad::Tape& t, Var sigma_pred, const data::MarketMatrices& market,
                        double vol_floor = 1e-4);

struct PhysicsLoss {
    Var loss;
    int clamped = 0;
};

/// Mean absolute pricing-equation residual over the grid, derivatives per the
/// configured mode.
PhysicsLoss physics_loss(ad::Tape& t, Var sigma_pred, const data::MarketMatrices& market,
                         const PhysicsLossConfig& cfg);

struct PiLoss {
    Var total, data_term;
    Var physics_term; // invalid when lambda == 0 (the physics graph is skipped)
    int clamped = 0;
};

/// Mean absolute volatility error plus lambda times the physics residual.
/// lambda == 0 builds no physics graph at all, so training updates match a
/// plain data-loss model bitwise.
PiLoss piconvtf_loss(ad::Tape& t, Var sigma_pred, const Tensor& sigma_true,
                     const data::MarketMatrices& market, const PhysicsLossConfig& cfg);

/// The conv-transformer wrapped with the physics-informed loss. Prediction is
/// identical to the underlying transformer; only training differs.
class PiConvTfModel {
public:
    PiConvTfModel(tf::ConvTfConfig cfg, PhysicsLossConfig physics, uint64_t seed)
        : convtf_(std::move(cfg), seed), phys_(physics) {}

    const tf::ConvTfConfig& config() const { return convtf_.config(); }
    const PhysicsLossConfig& physics_config() const { return phys_; }
    std::vector<ParamTensor*> parameters() { return convtf_.parameters(); }

    Var forward(ad::Tape& t, const std::vector<Var>& window, nn::WeightVars& weights) const {
        return convtf_.forward(t, window, weights);
    }
    Var forward(ad::Tape& t, const std::vector<Var>& window) { return convtf_.forward(t, window); }
    Tensor predict(const std::vector<Tensor>& window) { return convtf_.predict(window); }

    PiLoss loss(ad::Tape& t, const std::vector<Var>& window, const Tensor& sigma_true,
                const data::MarketMatrices& market, nn::WeightVars& weights) const;
    PiLoss loss(ad::Tape& t, const std::vector<Var>& window, const Tensor& sigma_true,
                const data::MarketMatrices& market);

private:
    tf::ConvTfModel convtf_;
    PhysicsLossConfig phys_;
};

} // namespace volcast::pi
