#include <doctest.h>

#include "volcast/black_scholes.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

using namespace volcast::bs;

namespace {

// e^{-r tau} E[max(S_T - K, 0)] under the lognormal terminal density,
// integrated over the standard normal factor by Simpson's rule.
double quadrature_price(double S, double K, double r, double tau, double sigma) {
    const int n = 40000; // even
    const double a = -10.0, b = 10.0, h = (b - a) / n;
    auto integrand = [&](double z) {
        const double st = S * std::exp((r - 0.5 * sigma * sigma) * tau + sigma * std::sqrt(tau) * z);
        return std::max(st - K, 0.0) * norm_pdf(z);
    };
    double acc = integrand(a) + integrand(b);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * integrand(a + i * h);
    return std::exp(-r * tau) * acc * h / 3.0;
}

} // namespace

TEST_CASE("bs_price: zero vol returns forward intrinsic value") {
    auto p = make_market_point(110.0, 100.0, 0.05, 1.0, 0.0);
    CHECK(bs_price(p) == doctest::Approx(110.0 - 100.0 * std::exp(-0.05)).epsilon(1e-14));
}

TEST_CASE("bs_price: expired out-of-the-money call is worthless") {
    auto p = make_market_point(90.0, 100.0, 0.03, 0.0, 0.25);
    CHECK(bs_price(p) == 0.0);
}

TEST_CASE("bs_price matches lognormal quadrature to 1e-6") {
    auto p = make_market_point(100.0, 100.0, 0.05, 1.0, 0.2);
    CHECK(bs_price(p) == doctest::Approx(quadrature_price(100, 100, 0.05, 1.0, 0.2)).epsilon(1e-6));

    auto q = make_market_point(95.0, 105.0, 0.01, 0.4, 0.35);
    CHECK(bs_price(q) == doctest::Approx(quadrature_price(95, 105, 0.01, 0.4, 0.35)).epsilon(1e-6));
}

TEST_CASE("bs_price rejects nonpositive underlying") {
    CHECK_THROWS_AS(bs_price(MarketPoint{-1.0, 100.0, 0.0, 1.0, 1.0, 0.2}), std::domain_error);
    CHECK_THROWS_AS(bs_price(MarketPoint{100.0, 0.0, 0.0, 1.0, 0.0, 0.2}), std::domain_error);
}

TEST_CASE("bs_greeks: deep in the money delta tends to 1") {
    auto g = bs_greeks(make_market_point(200.0, 100.0, 0.02, 0.5, 0.1));
    CHECK(g.delta > 0.999);
    CHECK(g.delta <= 1.0); // saturates to 1.0 in double precision this deep in the money
    CHECK(g.gamma >= 0.0);
}

TEST_CASE("bs_greeks agree with central finite differences") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> us(60.0, 180.0), uk(60.0, 180.0), ur(0.0, 0.08),
        ut(0.1, 1.0), uv(0.1, 0.8);
    for (int trial = 0; trial < 50; ++trial) {
        const double S = us(rng), K = uk(rng), r = ur(rng), tau = ut(rng), vol = uv(rng);
        auto p = make_market_point(S, K, r, tau, vol);
        auto g = bs_greeks(p);
        CHECK(g.price == doctest::Approx(bs_price(p)).epsilon(1e-12));

        const double hs = 1e-4 * S;
        auto up = make_market_point(S + hs, K, r, tau, vol);
        auto dn = make_market_point(S - hs, K, r, tau, vol);
        const double fd_delta = (bs_price(up) - bs_price(dn)) / (2.0 * hs);
        const double fd_gamma = (bs_price(up) - 2.0 * bs_price(p) + bs_price(dn)) / (hs * hs);
        CHECK(g.delta == doctest::Approx(fd_delta).epsilon(1e-5));
        CHECK(g.gamma == doctest::Approx(fd_gamma).epsilon(1e-5));

        const double ht = 1e-5;
        const double fd_theta = (bs_price(make_market_point(S, K, r, tau + ht, vol)) -
                                 bs_price(make_market_point(S, K, r, tau - ht, vol))) / (2.0 * ht);
        CHECK(g.theta_tau == doctest::Approx(fd_theta).epsilon(1e-5));
    }
}

TEST_CASE("bs_greeks reject degenerate inputs") {
    CHECK_THROWS_AS(bs_greeks(make_market_point(100, 100, 0.05, 0.0, 0.2)), std::domain_error);
    CHECK_THROWS_AS(bs_greeks(make_market_point(100, 100, 0.05, 1.0, 0.0)), std::domain_error);
}

TEST_CASE("implied_vol round-trips bs_price within 1e-8") {
    for (double sigma : {0.05, 0.2, 0.6, 1.0, 1.5}) {
        auto p = make_market_point(100.0, 110.0, 0.03, 0.7, sigma);
        const double price = bs_price(p);
        CHECK(implied_vol(price, p) == doctest::Approx(sigma).epsilon(1e-8));
    }
}

TEST_CASE("implied_vol rejects prices at or outside the no-arbitrage bounds") {
    auto p = make_market_point(120.0, 100.0, 0.05, 1.0, 0.0);
    const double lower = 120.0 - 100.0 * std::exp(-0.05);
    CHECK_THROWS_AS(implied_vol(lower, p), std::domain_error);
    CHECK_THROWS_AS(implied_vol(120.0, p), std::domain_error);
    CHECK_THROWS_AS(implied_vol(-1.0, p), std::domain_error);
}

TEST_CASE("implied_vol is monotone in price") {
    auto p = make_market_point(100.0, 100.0, 0.02, 0.5, 0.0);
    const double p1 = 6.0, p2 = 9.0; // both valid: intrinsic ~0.995, spot 100
    CHECK(implied_vol(p1, p) < implied_vol(p2, p));
}

TEST_CASE("pde_residual vanishes on the closed-form solution") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> us(50.0, 200.0), uk(45.0, 220.0), ur(0.0, 0.1),
        ut(0.05, 1.0), uv(0.05, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto p = make_market_point(us(rng), uk(rng), ur(rng), ut(rng), uv(rng));
        auto g = bs_greeks(p);
        worst = std::max(worst, std::fabs(pde_residual(g.price, g.theta_tau, g.delta, g.gamma, p)));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("pde_residual hand examples") {
    auto p = make_market_point(80.0, 100.0, 0.04, 0.5, 0.3);
    // C = S^2: theta_tau = 0, delta = 2S, gamma = 2
    const double S = p.spot, r = p.rate, v = p.vol;
    CHECK(pde_residual(S * S, 0.0, 2.0 * S, 2.0, p) == doctest::Approx((r + v * v) * S * S).epsilon(1e-12));
    // C = K e^{-r tau}: a solution of the equation
    const double disc = p.strike * std::exp(-r * p.tau);
    CHECK(pde_residual(disc, -r * disc, 0.0, 0.0, p) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("price bounds and monotonicity hold on a sample") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> us(50.0, 200.0), uk(45.0, 220.0), ur(0.0, 0.1),
        ut(0.05, 1.0), uv(0.05, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const double S = us(rng), K = uk(rng), r = ur(rng), tau = ut(rng), vol = uv(rng);
        const double c = bs_price(make_market_point(S, K, r, tau, vol));
        CHECK(c >= std::max(S - K * std::exp(-r * tau), 0.0) - 1e-12);
        CHECK(c <= S + 1e-12);
        CHECK(bs_price(make_market_point(S, K * 1.05, r, tau, vol)) <= c + 1e-12);
        CHECK(bs_price(make_market_point(S, K, r, tau, vol + 0.05)) >= c - 1e-12);
    }
}

TEST_CASE("norm_cdf is accurate to 1e-12 across |x| <= 8") {
    // reference values from the 30-digit series expansion of Phi
    CHECK(std::fabs(norm_cdf(0.0) - 0.5) < 1e-15);
    CHECK(std::fabs(norm_cdf(1.0) - 0.841344746068542948585232545632) < 1e-13);
    CHECK(std::fabs(norm_cdf(-1.0) - 0.158655253931457051414767454368) < 1e-13);
    CHECK(std::fabs(norm_cdf(2.0) - 0.977249868051820792828946834285) < 1e-13);
    CHECK(std::fabs(norm_cdf(-3.0) - 0.00134989803163009452665181477699) < 1e-14);
    CHECK(std::fabs(norm_cdf(8.0) - 1.0) < 1e-15);
    CHECK(norm_cdf(-8.0) > 0.0);
    CHECK(norm_cdf(-8.0) < 1e-14);
}
