#include "volcast/black_scholes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace volcast::bs {

namespace {

constexpr double kVolLo = 1e-4;
constexpr double kVolHi = 5.0;
constexpr int kMaxIters = 200;

void require_positive_underlying(const MarketPoint& p) {
    if (p.spot <= 0.0 || p.strike <= 0.0)
        throw std::domain_error("spot and strike must be positive, got spot=" + std::to_string(p.spot) +
                                " strike=" + std::to_string(p.strike));
}

struct D12 {
    double d1, d2, sqrt_tau;
};

D12 d_values(const MarketPoint& p) {
    const double st = std::sqrt(p.tau);
    const double d1 = (std::log(p.spot / p.strike) + (p.rate + 0.5 * p.vol * p.vol) * p.tau) / (p.vol * st);
    return {d1, d1 - p.vol * st, st};
}

} // namespace

MarketPoint make_market_point(double spot, double strike, double rate, double tau, double vol) {
    MarketPoint p{spot, strike, rate, tau, strike / spot, vol};
    require_positive_underlying(p);
    if (tau < 0.0) throw std::domain_error("negative time to maturity");
    if (vol < 0.0) throw std::domain_error("negative volatility");
    return p;
}

double norm_cdf(double x) {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double norm_pdf(double x) {
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

double bs_price(const MarketPoint& p) {
    require_positive_underlying(p);
    if (p.tau < 0.0 || p.vol < 0.0) throw std::domain_error("negative tau or vol");
    if (p.tau == 0.0) return std::max(p.spot - p.strike, 0.0);
    if (p.vol == 0.0) return std::max(p.spot - p.strike * std::exp(-p.rate * p.tau), 0.0);
    const auto d = d_values(p);
    return p.spot * norm_cdf(d.d1) - p.strike * std::exp(-p.rate * p.tau) * norm_cdf(d.d2);
}

GreeksBundle bs_greeks(const MarketPoint& p) {
    require_positive_underlying(p);
    if (p.tau <= 0.0 || p.vol <= 0.0)
        throw std::domain_error("greeks undefined at tau=" + std::to_string(p.tau) +
                                " vol=" + std::to_string(p.vol) + "; take the degenerate limit instead");
    const auto d = d_values(p);
    GreeksBundle g;
    g.delta = norm_cdf(d.d1);
    g.gamma = norm_pdf(d.d1) / (p.spot * p.vol * d.sqrt_tau);
    const double discounted_strike = p.strike * std::exp(-p.rate * p.tau);
    g.theta_tau = p.spot * norm_pdf(d.d1) * p.vol / (2.0 * d.sqrt_tau) + p.rate * discounted_strike * norm_cdf(d.d2);
    g.price = p.spot * norm_cdf(d.d1) - discounted_strike * norm_cdf(d.d2);
    return g;
}

double implied_vol(double price, const MarketPoint& point, double tol) {
    require_positive_underlying(point);
    if (point.tau <= 0.0) throw std::domain_error("implied vol needs tau > 0");
    const double lower = std::max(point.spot - point.strike * std::exp(-point.rate * point.tau), 0.0);
    if (price <= lower || price >= point.spot)
        throw std::domain_error("price " + std::to_string(price) + " outside no-arbitrage bounds (" +
                                std::to_string(lower) + ", " + std::to_string(point.spot) + ")");

    MarketPoint p = point;
    double lo = kVolLo, hi = kVolHi;
    double sigma = 0.5 * (lo + hi);
    for (int it = 0; it < kMaxIters; ++it) {
        p.vol = sigma;
        const double diff = bs_price(p) - price;
        if (std::fabs(diff) < tol) return sigma;
        if (diff > 0.0) hi = sigma;
        else lo = sigma;
        const double vega = p.spot * norm_pdf(d_values(p).d1) * std::sqrt(p.tau);
        double next = sigma - diff / vega;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi); // Newton left the bracket
        sigma = next;
    }
    throw std::runtime_error("implied vol did not converge in " + std::to_string(kMaxIters) + " iterations");
}

double pde_residual(double price, double theta_tau, double delta, double gamma, const MarketPoint& p) {
    return -theta_tau - p.rate * price + p.rate * p.spot * delta +
           0.5 * p.vol * p.vol * p.spot * p.spot * gamma;
}

ad::Var bs_price(ad::Tape& t, ad::Var spot, ad::Var strike, ad::Var rate, ad::Var tau,
                 ad::Var sigma, double vol_floor) {
    const ad::Var vol = t.clamp_min(sigma, vol_floor);
    const ad::Var sqrt_tau = t.sqrt(tau);
    const ad::Var denom = t.mul(vol, sqrt_tau);
    const ad::Var drift = t.mul(t.add(rate, t.scale(t.mul(vol, vol), 0.5)), tau);
    const ad::Var d1 = t.div(t.add(t.log(t.div(spot, strike)), drift), denom);
    const ad::Var d2 = t.sub(d1, denom);
    const ad::Var discount = t.exp(t.neg(t.mul(rate, tau)));
    return t.sub(t.mul(spot, t.norm_cdf(d1)), t.mul(t.mul(strike, discount), t.norm_cdf(d2)));
}

ad::Var pde_residual(ad::Tape& t, ad::Var price, ad::Var theta_tau, ad::Var delta,
                     ad::Var gamma, ad::Var spot, ad::Var rate, ad::Var sigma) {
    const ad::Var carry = t.mul(rate, t.sub(t.mul(spot, delta), price));
    const ad::Var convexity = t.scale(t.mul(t.mul(sigma, sigma), t.mul(t.mul(spot, spot), gamma)), 0.5);
    return t.add(t.add(t.neg(theta_tau), carry), convexity);
}

} // namespace volcast::bs
