#pragma once

#include "volcast/autodiff.hpp"

namespace volcast::bs {

/// One call-option observation. moneyness is strike/spot.
struct MarketPoint {
    double spot = 0.0;
    double strike = 0.0;
    double rate = 0.0;
    double tau = 0.0;       // time to maturity, years
    double moneyness = 0.0; // strike / spot
    double vol = 0.0;       // implied volatility, per sqrt-year
};

MarketPoint make_market_point(double spot, double strike, double rate, double tau, double vol);

/// Call price together with the derivatives the physics losses need.
struct GreeksBundle {
    double price = 0.0;
    double delta = 0.0;     // dC/dS
    double gamma = 0.0;     // d2C/dS2
    double theta_tau = 0.0; // dC/dtau (maturity direction, not calendar time)
};

/// Standard normal CDF via the complementary error function.
double norm_cdf(double x);
double norm_pdf(double x);

/// Closed-form European call. Degenerate inputs (tau=0 or vol=0) return the
/// intrinsic / forward-intrinsic limit. Throws std::domain_error on
/// nonpositive spot or strike.
double bs_price(const MarketPoint& p);

/// Analytic delta/gamma/theta_tau. Requires tau > 0 and vol > 0; degenerate
/// inputs throw std::domain_error (callers must take limits themselves).
GreeksBundle bs_greeks(const MarketPoint& p);

/// Inverts bs_price in vol by safeguarded Newton bracketed by bisection on
/// [1e-4, 5.0]. `point.vol` is ignored. Throws std::domain_error when the
/// price violates the no-arbitrage bounds and std::runtime_error when 200
/// iterations fail to reach |price difference| < tol.
double implied_vol(double price, const MarketPoint& point, double tol = 1e-10);

/// Residual of the pricing equation in maturity time,
///   -dC/dtau - r C + r S dC/dS + 1/2 sigma^2 S^2 d2C/dS2,
/// which vanishes identically on the closed-form solution.
double pde_residual(double price, double theta_tau, double delta, double gamma, const MarketPoint& p);

/// Elementwise closed-form call price on the tape. All inputs must share one
/// shape (or broadcast); every entry needs tau > 0. sigma is clamped below at
/// `vol_floor` so near-zero vols stay differentiable.
ad::Var bs_price(ad::Tape& t, ad::Var spot, ad::Var strike, ad::Var rate, ad::Var tau,
                 ad::Var sigma, double vol_floor = 1e-4);

/// Elementwise pricing-equation residual on the tape from precomputed
/// derivative tensors: -theta_tau - r C + r S delta + 1/2 sigma^2 S^2 gamma.
ad::Var pde_residual(ad::Tape& t, ad::Var price, ad::Var theta_tau, ad::Var delta,
                     ad::Var gamma, ad::Var spot, ad::Var rate, ad::Var sigma);

} // namespace volcast::bs
