#include <doctest.h>

#include "volcast/piconvtf.hpp"

#include "volcast/black_scholes.hpp"
#include "volcast/errors.hpp"
#include "volcast/optimizer.hpp"

#include <cmath>
#include <random>

using namespace volcast;
using namespace volcast::pi;
using ad::Tape;

namespace {

/// Hand-built market state: moneyness ladder along rows, maturities along
/// columns, constant spot and rate.
data::MarketMatrices make_market(int rows, int cols, double spot = 100.0, double rate = 0.02,
                                 double m_lo = 0.9, double m_hi = 1.1, double t_lo = 0.05,
                                 double t_hi = 1.0) {
    data::MarketMatrices m;
    m.tau = Tensor::zeros({rows, cols});
    m.spot = Tensor::full({rows, cols}, spot);
    m.rate = Tensor::full({rows, cols}, rate);
    m.strike = Tensor::zeros({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double mny = m_lo + (m_hi - m_lo) * i / (rows - 1.0);
            m.tau.at({i, j}) = t_lo + (t_hi - t_lo) * j / (cols - 1.0);
            m.strike.at({i, j}) = mny * spot;
        }
    return m;
}

Tensor random_sigma(int rows, int cols, std::mt19937_64& rng, double lo = 0.05, double hi = 1.5) {
    Tensor s = Tensor::zeros({rows, cols});
    for (double& v : s.data) v = nn::portable_uniform(rng, lo, hi);
    return s;
}

Tensor random_grid(int rows, int cols, std::mt19937_64& rng, double lo, double hi) {
    Tensor s = Tensor::zeros({1, rows, cols});
    for (double& v : s.data) v = nn::portable_uniform(rng, lo, hi);
    return s;
}

/// Discounted expectation of the lognormal payoff by Simpson quadrature over
/// the standard normal factor — prices the call without touching the
/// closed-form solution.
double quadrature_price(double spot, double strike, double rate, double tau, double sigma) {
    const double drift = (rate - 0.5 * sigma * sigma) * tau;
    const double vol = sigma * std::sqrt(tau);
    // Payoff turns positive above z*; integrate the smooth part only.
    const double z_star = (std::log(strike / spot) - drift) / vol;
    const double lo = std::max(z_star, -12.0), hi = 12.0;
    if (lo >= hi) return 0.0;
    const int panels = 4000; // Simpson needs an even count
    const double h = (hi - lo) / panels;
    const auto integrand = [&](double z) {
        const double payoff = spot * std::exp(drift + vol * z) - strike;
        return payoff * std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
    };
    double acc = integrand(lo) + integrand(hi);
    for (int i = 1; i < panels; ++i) acc += integrand(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return std::exp(-rate * tau) * acc * h / 3.0;
}

tf::ConvTfConfig toy_tf_config() {
    tf::ConvTfConfig cfg;
    cfg.window = 3;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.sffn_widths = {4, 1};
    return cfg;
}

} // namespace

TEST_CASE("eval_call_grid matches the closed form cell by cell") {
    const auto market = make_market(20, 20);
    std::mt19937_64 rng(5);
    const Tensor sigma = random_sigma(20, 20, rng);

    Tape t;
    const auto grid = eval_call_grid(t, t.value(sigma), market);
    CHECK(grid.clamped == 0);
    const Tensor call = t.val(grid.call);
    REQUIRE(call.shape == Shape{20, 20});
    for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 20; ++j) {
            const auto p = bs::make_market_point(market.spot.at({i, j}), market.strike.at({i, j}),
                                                 market.rate.at({i, j}), market.tau.at({i, j}),
                                                 sigma.at({i, j}));
            CHECK(call.at({i, j}) == doctest::Approx(bs::bs_price(p)).epsilon(1e-12));
        }
}

TEST_CASE("eval_call_grid accepts channel-shaped predictions and clamps nonpositive vols") {
    const auto market = make_market(4, 5);
    Tensor sigma = Tensor::full({1, 4, 5}, 0.3);
    sigma.at({0, 0, 0}) = -0.2;
    sigma.at({0, 2, 3}) = 0.0;
    sigma.at({0, 3, 4}) = 1e-9;

    Tape t;
    const auto grid = eval_call_grid(t, t.value(sigma), market);
    CHECK(grid.clamped == 3);
    const Tensor call = t.val(grid.call);
    const auto p = bs::make_market_point(market.spot.at({0, 0}), market.strike.at({0, 0}),
                                         market.rate.at({0, 0}), market.tau.at({0, 0}), 1e-4);
    CHECK(call.at({0, 0}) == doctest::Approx(bs::bs_price(p)).epsilon(1e-12));
    for (double v : call.data) CHECK(std::isfinite(v));
}

TEST_CASE("deep in-the-money cell with tiny vol prices at the intrinsic limit") {
    auto market = make_market(3, 3, 100.0, 0.03, 0.5, 0.7, 0.4, 0.6);
    Tensor sigma = Tensor::full({3, 3}, 1e-12); // clamped to the floor

    Tape t;
    const auto grid = eval_call_grid(t, t.value(sigma), market);
    CHECK(grid.clamped == 9);
    const Tensor call = t.val(grid.call);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double intrinsic =
                market.spot.at({i, j}) -
                market.strike.at({i, j}) * std::exp(-market.rate.at({i, j}) * market.tau.at({i, j}));
            CHECK(call.at({i, j}) == doctest::Approx(intrinsic).epsilon(1e-10));
        }
}

TEST_CASE("eval_call_grid agrees with a lognormal quadrature oracle") {
    const auto market = make_market(6, 5);
    std::mt19937_64 rng(7);
    const Tensor sigma = random_sigma(6, 5, rng, 0.1, 0.8);

    Tape t;
    const Tensor call = t.val(eval_call_grid(t, t.value(sigma), market).call);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) {
            const double q = quadrature_price(market.spot.at({i, j}), market.strike.at({i, j}),
                                              market.rate.at({i, j}), market.tau.at({i, j}),
                                              sigma.at({i, j}));
            CHECK(call.at({i, j}) == doctest::Approx(q).epsilon(1e-6));
        }
}

TEST_CASE("eval_call_grid respects no-arbitrage bounds") {
    const auto market = make_market(20, 20);
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 3; ++rep) {
        const Tensor sigma = random_sigma(20, 20, rng, 0.01, 2.0);
        Tape t;
        const Tensor call = t.val(eval_call_grid(t, t.value(sigma), market).call);
        for (int i = 0; i < 20; ++i)
            for (int j = 0; j < 20; ++j) {
                const double lower =
                    std::max(market.spot.at({i, j}) - market.strike.at({i, j}) *
                                                          std::exp(-market.rate.at({i, j}) *
                                                                   market.tau.at({i, j})),
                             0.0);
                CHECK(call.at({i, j}) >= lower - 1e-12);
                CHECK(call.at({i, j}) <= market.spot.at({i, j}) + 1e-12);
            }
    }
}

TEST_CASE("market validation rejects broken inputs") {
    auto market = make_market(4, 4);
    Tape t;
    const Tensor sigma = Tensor::full({4, 4}, 0.2);

    auto bad_tau = market;
    bad_tau.tau.at({1, 2}) = 0.0;
    CHECK_THROWS_AS(eval_call_grid(t, t.value(sigma), bad_tau), DataError);

    auto bad_shape = market;
    bad_shape.spot = Tensor::full({4, 5}, 100.0);
    CHECK_THROWS_AS(eval_call_grid(t, t.value(sigma), bad_shape), ShapeError);

    CHECK_THROWS_AS(eval_call_grid(t, t.value(Tensor::full({5, 4}, 0.2)), market), ShapeError);
    CHECK_THROWS_AS(physics_loss(t, t.value(Tensor::full({2, 4, 4}, 0.2)), market, {}), ShapeError);
}

TEST_CASE("pointwise physics residual vanishes for any positive sigma grid") {
    const auto market = make_market(20, 20);
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 3; ++rep) {
        const Tensor sigma = random_sigma(20, 20, rng);
        Tape t;
        const auto phys = physics_loss(t, t.value(sigma), market,
                                       {.lambda = 0.1, .mode = DerivativeMode::pointwise_analytic});
        CHECK(t.val(phys.loss).item() < 1e-8);
    }
}

TEST_CASE("grid-homogeneity residual reacts to smile curvature") {
    const auto market = make_market(20, 20);
    const PhysicsLossConfig cfg{.lambda = 0.1, .mode = DerivativeMode::grid_homogeneity,
                                .vol_floor = 1e-4};

    Tensor flat = Tensor::full({20, 20}, 0.2);
    Tensor curved = Tensor::zeros({20, 20});
    for (int i = 0; i < 20; ++i) {
        const double m = 0.9 + 0.2 * i / 19.0;
        for (int j = 0; j < 20; ++j) curved.at({i, j}) = 0.2 + 0.8 * (m - 1.0) * (m - 1.0);
    }

    Tape tf_, tc;
    const double flat_resid = tf_.val(physics_loss(tf_, tf_.value(flat), market, cfg).loss).item();
    const double curved_resid = tc.val(physics_loss(tc, tc.value(curved), market, cfg).loss).item();
    INFO("flat ", flat_resid, " curved ", curved_resid);
    CHECK(curved_resid > 0.0);
    CHECK(curved_resid > 2.0 * flat_resid);
}

TEST_CASE("piconvtf loss hand values") {
    const auto market = make_market(20, 20);
    Tensor truth = Tensor::full({20, 20}, 0.2);

    SUBCASE("perfect prediction, pointwise mode, arbitrary lambda") {
        Tape t;
        const auto loss = piconvtf_loss(t, t.value(truth), truth, market,
                                        {.lambda = 0.7, .mode = DerivativeMode::pointwise_analytic});
        CHECK(t.val(loss.total).item() < 1e-8);
    }
    SUBCASE("ten percent vol overshoot with lambda zero is pure data loss") {
        Tensor pred = Tensor::full({20, 20}, 0.22);
        Tape t;
        const auto loss = piconvtf_loss(t, t.value(pred), truth, market, {.lambda = 0.0});
        CHECK(t.val(loss.total).item() == doctest::Approx(0.02).epsilon(1e-14));
        CHECK(!loss.physics_term.valid()); // the physics graph was never built
        // bitwise identical to the bare data term
        Tape t2;
        const double bare =
            t2.val(t2.mean(t2.abs(t2.sub(t2.value(pred), t2.value(truth))))).item();
        CHECK(t.val(loss.total).item() == bare);
    }
    SUBCASE("lambda scales the physics term") {
        std::mt19937_64 rng(17);
        const Tensor pred = random_sigma(20, 20, rng, 0.15, 0.45);
        const PhysicsLossConfig grid_cfg{.lambda = 0.5, .mode = DerivativeMode::grid_homogeneity,
                                         .vol_floor = 1e-4};
        Tape t;
        const auto loss = piconvtf_loss(t, t.value(pred), truth, market, grid_cfg);
        const double expect = t.val(loss.data_term).item() + 0.5 * t.val(loss.physics_term).item();
        CHECK(t.val(loss.total).item() == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("total loss gradient against sigma_pred passes grad_check in both modes") {
    const auto market = make_market(6, 5);
    Tensor truth = Tensor::full({6, 5}, 0.25);
    std::mt19937_64 rng(19);
    const Tensor pred0 = random_sigma(6, 5, rng, 0.15, 0.5);

    for (const auto mode : {DerivativeMode::pointwise_analytic, DerivativeMode::grid_homogeneity}) {
        const PhysicsLossConfig cfg{.lambda = 0.25, .mode = mode, .vol_floor = 1e-4};
        const auto report = ad::grad_check(
            [&](Tape& t, const std::vector<Var>& leaves) {
                return piconvtf_loss(t, leaves[0], truth, market, cfg).total;
            },
            {pred0}, 1e-4);
        INFO("mode ", mode == DerivativeMode::pointwise_analytic ? "pointwise" : "grid", " rel ",
             report.max_rel_error);
        CHECK(report.pass);
    }
}

TEST_CASE("lambda zero training matches the plain transformer bitwise") {
    const auto cfg = toy_tf_config();
    const auto market = make_market(6, 6);
    std::mt19937_64 rng(23);

    std::vector<Tensor> window;
    for (int i = 0; i < 3; ++i) window.push_back(random_grid(6, 6, rng, 0.15, 0.35));
    const Tensor target = random_grid(6, 6, rng, 0.15, 0.35);

    tf::ConvTfModel plain(cfg, 99);
    PiConvTfModel informed(cfg, {.lambda = 0.0}, 99);
    opt::Adam opt_plain(plain.parameters(), {.lr = 1e-3});
    opt::Adam opt_informed(informed.parameters(), {.lr = 1e-3});

    for (int step = 0; step < 3; ++step) {
        {
            Tape t;
            std::vector<Var> w;
            for (const auto& g : window) w.push_back(t.value(g));
            const Var pred = plain.forward(t, w);
            t.backward(t.mean(t.abs(t.sub(pred, t.value(target)))));
            opt_plain.step();
        }
        {
            Tape t;
            std::vector<Var> w;
            for (const auto& g : window) w.push_back(t.value(g));
            t.backward(informed.loss(t, w, target, market).total);
            opt_informed.step();
        }
    }

    const auto pp = plain.parameters(), pi_ = informed.parameters();
    REQUIRE(pp.size() == pi_.size());
    for (size_t i = 0; i < pp.size(); ++i) {
        REQUIRE(pp[i]->value.data.size() == pi_[i]->value.data.size());
        for (size_t e = 0; e < pp[i]->value.data.size(); ++e)
            CHECK(pp[i]->value.data[e] == pi_[i]->value.data[e]);
    }
}

TEST_CASE("physics loss reaches the transformer weights in grid mode") {
    const auto cfg = toy_tf_config();
    const auto market = make_market(6, 6);
    std::mt19937_64 rng(29);
    std::vector<Tensor> window;
    for (int i = 0; i < 3; ++i) window.push_back(random_grid(6, 6, rng, 0.15, 0.35));
    const Tensor target = random_grid(6, 6, rng, 0.15, 0.35);

    PiConvTfModel model(cfg, {.lambda = 0.5, .mode = DerivativeMode::grid_homogeneity}, 101);
    Tape t;
    std::vector<Var> w;
    for (const auto& g : window) w.push_back(t.value(g));
    const auto loss = model.loss(t, w, target, market);
    CHECK(t.val(loss.physics_term).item() > 0.0);
    t.backward(loss.total);

    // Single-query decoder self-attention has softmax == 1 regardless of the
    // scores, so its query and score convolutions are structurally inert;
    // everything else must feel the loss.
    for (ad::ParamTensor* p : model.parameters()) {
        double mag = 0.0;
        for (double g : p->grad.data) mag += std::fabs(g);
        const bool inert = p->name.find("self_attn") != std::string::npos &&
                           (p->name.ends_with("w1") || p->name.ends_with("w3"));
        INFO(p->name, " grad magnitude ", mag);
        if (inert) CHECK(mag == 0.0);
        else CHECK(mag > 0.0);
    }
}
