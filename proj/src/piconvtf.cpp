#include "volcast/piconvtf.hpp"

#include "volcast/black_scholes.hpp"
#include "volcast/errors.hpp"

#include <cmath>

namespace volcast::pi {

using ad::Tape;

namespace {

void validate_market(const data::MarketMatrices& m) {
    if (m.tau.rank() != 2 || !m.spot.same_shape(m.tau) || !m.rate.same_shape(m.tau) ||
        !m.strike.same_shape(m.tau))
        throw ShapeError("market matrices must share one (H,W) shape");
    for (double v : m.tau.data)
        if (!(v > 0.0)) throw DataError("market tau entries must be positive");
    for (double v : m.spot.data)
        if (!(v > 0.0)) throw DataError("market spot entries must be positive");
    for (double v : m.strike.data)
        if (!(v > 0.0)) throw DataError("market strike entries must be positive");
}

/// Accepts (H,W) or (1,H,W) sigma grids; returns the (H,W) view.
Var flatten_sigma(Tape& t, Var sigma, const Shape& market_shape) {
    const Shape& s = t.val(sigma).shape;
    if (s == market_shape) return sigma;
    if (s.size() == 3 && s[0] == 1 && Shape{s[1], s[2]} == market_shape)
        return t.reshape(sigma, market_shape);
    throw ShapeError("sigma grid " + ad::shape_str(s) + " does not match market shape " +
                     ad::shape_str(market_shape));
}

int count_clamped(const Tensor& sigma, double floor) {
    int n = 0;
    for (double v : sigma.data) n += v < floor ? 1 : 0;
    return n;
}

/// First and second derivative of a taped (H,W) grid along one axis, given
/// the per-cell coordinate values. Interior cells use three-point formulas
/// valid for nonuniform spacing; edge cells fall back to the nearest
/// one-sided estimate.
struct AxisDerivs {
    Var d1, d2;
};

AxisDerivs fd_along_axis(Tape& t, Var c, const Tensor& x, int axis) {
    const int n = x.dim(axis);
    if (n < 3) throw ShapeError("finite differences need at least 3 cells per axis");

    const auto coord = [&](int i, int j_other) {
        return axis == 0 ? x.at({i, j_other}) : x.at({j_other, i});
    };
    const int other = x.dim(1 - axis);

    // Constant combination weights per cell, derivative = wm*C[i-1] + w0*C[i] + wp*C[i+1].
    const Shape inner = axis == 0 ? Shape{n - 2, other} : Shape{other, n - 2};
    Tensor wm1 = Tensor::zeros(inner), w01 = Tensor::zeros(inner), wp1 = Tensor::zeros(inner);
    Tensor wm2 = Tensor::zeros(inner), w02 = Tensor::zeros(inner), wp2 = Tensor::zeros(inner);
    const auto set = [&](Tensor& w, int i, int j, double v) {
        if (axis == 0) w.at({i, j}) = v;
        else w.at({j, i}) = v;
    };
    for (int i = 1; i < n - 1; ++i)
        for (int j = 0; j < other; ++j) {
            const double h1 = coord(i, j) - coord(i - 1, j);
            const double h2 = coord(i + 1, j) - coord(i, j);
            set(wm1, i - 1, j, -h2 / (h1 * (h1 + h2)));
            set(w01, i - 1, j, (h2 - h1) / (h1 * h2));
            set(wp1, i - 1, j, h1 / (h2 * (h1 + h2)));
            set(wm2, i - 1, j, 2.0 / (h1 * (h1 + h2)));
            set(w02, i - 1, j, -2.0 / (h1 * h2));
            set(wp2, i - 1, j, 2.0 / (h2 * (h1 + h2)));
        }

    const Var cm = t.slice(c, axis, 0, n - 2);
    const Var c0 = t.slice(c, axis, 1, n - 2);
    const Var cp = t.slice(c, axis, 2, n - 2);
    const auto combine = [&](const Tensor& a, const Tensor& b, const Tensor& d) {
        return t.add(t.add(t.mul(t.value(a), cm), t.mul(t.value(b), c0)), t.mul(t.value(d), cp));
    };
    const Var d1_int = combine(wm1, w01, wp1);
    const Var d2_int = combine(wm2, w02, wp2);

    // Edges: one-sided slope; curvature borrowed from the adjacent interior triple.
    const Shape edge = axis == 0 ? Shape{1, other} : Shape{other, 1};
    Tensor lo_scale = Tensor::zeros(edge), hi_scale = Tensor::zeros(edge);
    for (int j = 0; j < other; ++j) {
        set(lo_scale, 0, j, 1.0 / (coord(1, j) - coord(0, j)));
        set(hi_scale, 0, j, 1.0 / (coord(n - 1, j) - coord(n - 2, j)));
    }
    const Var c_first = t.slice(c, axis, 0, 1), c_second = t.slice(c, axis, 1, 1);
    const Var c_last = t.slice(c, axis, n - 1, 1), c_prev = t.slice(c, axis, n - 2, 1);
    const Var d1_lo = t.mul(t.value(lo_scale), t.sub(c_second, c_first));
    const Var d1_hi = t.mul(t.value(hi_scale), t.sub(c_last, c_prev));
    const Var d2_lo = t.slice(d2_int, axis, 0, 1);
    const Var d2_hi = t.slice(d2_int, axis, n - 3, 1);

    AxisDerivs out;
    out.d1 = t.concat({d1_lo, d1_int, d1_hi}, axis);
    out.d2 = t.concat({d2_lo, d2_int, d2_hi}, axis);
    return out;
}

} // namespace

CallGrid eval_call_grid(Tape& t, Var sigma_pred, const data::MarketMatrices& market,
                        double vol_floor) {
    validate_market(market);
    const Var sigma = flatten_sigma(t, sigma_pred, market.tau.shape);

    CallGrid out;
    out.clamped = count_clamped(t.val(sigma), vol_floor);
    out.call = bs::bs_price(t, t.value(market.spot), t.value(market.strike), t.value(market.rate),
                            t.value(market.tau), sigma, vol_floor);
    return out;
}

PhysicsLoss physics_loss(Tape& t, Var sigma_pred, const data::MarketMatrices& market,
                         const PhysicsLossConfig& cfg) {
    validate_market(market);
    const Var sigma = flatten_sigma(t, sigma_pred, market.tau.shape);
    const Var sigma_c = t.clamp_min(sigma, cfg.vol_floor);

    PhysicsLoss out;
    out.clamped = count_clamped(t.val(sigma), cfg.vol_floor);

    const Var k = t.value(market.strike), r = t.value(market.rate);
    Var residual;
    if (cfg.mode == DerivativeMode::pointwise_analytic) {
        // Differentiate each cell's price in its own spot/maturity leaves.
        const Var s = t.value(market.spot), tau = t.value(market.tau);
        const Var call = bs::bs_price(t, s, k, r, tau, sigma_c, cfg.vol_floor);
        const Var wrt[2] = {s, tau};
        const auto first = t.gradients(t.sum(call), std::span<const Var>(wrt, 2));
        const Var delta = first[0], theta = first[1];
        const Var gamma = t.gradients(t.sum(delta), std::span<const Var>(wrt, 1))[0];
        residual = bs::pde_residual(t, call, theta, delta, gamma, s, r, sigma_c);
    } else {
        // Differences of the price surface across neighbouring strikes and
        // maturities; spot derivatives via C_S = (C - K C_K)/S, C_SS = K^2 C_KK / S^2.
        const Var s = t.value(market.spot);
        const Var call = bs::bs_price(t, s, k, r, t.value(market.tau), sigma_c, cfg.vol_floor);
        const AxisDerivs dk = fd_along_axis(t, call, market.strike, 0);
        const AxisDerivs dt = fd_along_axis(t, call, market.tau, 1);
        const Var delta = t.div(t.sub(call, t.mul(k, dk.d1)), s);
        const Var gamma = t.div(t.mul(t.mul(k, k), dk.d2), t.mul(s, s));
        residual = bs::pde_residual(t, call, dt.d1, delta, gamma, s, r, sigma_c);
    }
    out.loss = t.mean(t.abs(residual));
    return out;
}

PiLoss piconvtf_loss(Tape& t, Var sigma_pred, const Tensor& sigma_true,
                     const data::MarketMatrices& market, const PhysicsLossConfig& cfg) {
    if (!(cfg.lambda >= 0.0)) throw ConfigError("physics weight lambda must be nonnegative");
    if (!t.val(sigma_pred).same_shape(sigma_true))
        throw ShapeError("sigma_true " + ad::shape_str(sigma_true.shape) + " does not match prediction " +
                         ad::shape_str(t.val(sigma_pred).shape));

    PiLoss out;
    out.data_term = t.mean(t.abs(t.sub(sigma_pred, t.value(sigma_true))));
    if (cfg.lambda == 0.0) {
        out.total = out.data_term; // no physics graph: updates match the plain model bitwise
        return out;
    }
    const PhysicsLoss phys = physics_loss(t, sigma_pred, market, cfg);
    out.physics_term = phys.loss;
    out.clamped = phys.clamped;
    out.total = t.add(out.data_term, t.scale(out.physics_term, cfg.lambda));
    return out;
}

PiLoss PiConvTfModel::loss(Tape& t, const std::vector<Var>& window, const Tensor& sigma_true,
                           const data::MarketMatrices& market, nn::WeightVars& weights) const {
    return piconvtf_loss(t, convtf_.forward(t, window, weights), sigma_true, market, phys_);
}

PiLoss PiConvTfModel::loss(Tape& t, const std::vector<Var>& window, const Tensor& sigma_true,
                           const data::MarketMatrices& market) {
    nn::WeightVars w = nn::bind_all(t, parameters());
    return loss(t, window, sigma_true, market, w);
}

} // namespace volcast::pi
