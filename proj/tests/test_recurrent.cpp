#include <doctest.h>

#include "volcast/recurrent.hpp"

#include "volcast/errors.hpp"

#include <cmath>
#include <random>

using namespace volcast;
using namespace volcast::rnn;
using ad::Tape;
using ad::Var;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = nn::portable_uniform(rng, lo, hi);
    return t;
}

// Independent direct-summation "same"-padded convolution.
Tensor naive_conv(const Tensor& in, const Tensor& k, int pad) {
    const int ic = in.shape[0], h = in.shape[1], w = in.shape[2];
    const int oc = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    Tensor out = Tensor::zeros({oc, h, w});
    for (int o = 0; o < oc; ++o)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int c = 0; c < ic; ++c)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            const int sy = y + dy - pad, sx = x + dx - pad;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            acc += in.at({c, sy, sx}) * k.at({o, c, dy, dx});
                        }
                out.at({o, y, x}) = acc;
            }
    return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

TEST_CASE("cell step with all-zero weights: half gates, damped state") {
    Tape t;
    const int hidden = 3, grid = 5;
    std::mt19937_64 rng(11);
    Tensor c_prev = random_tensor({hidden, grid, grid}, rng);

    CellVars w;
    w.wx = t.value(Tensor::zeros({4 * hidden, 1, 3, 3}));
    w.wh = t.value(Tensor::zeros({4 * hidden, hidden, 3, 3}));
    w.bias = t.value(Tensor::zeros({4 * hidden, 1, 1}));
    CellState prev{t.value(random_tensor({hidden, grid, grid}, rng)), t.value(c_prev)};
    const CellState next = convlstm_cell_step(t, t.value(random_tensor({1, grid, grid}, rng)), prev, w);

    for (int64_t e = 0; e < c_prev.size(); ++e) {
        const double c_expect = 0.5 * c_prev.data[size_t(e)];
        CHECK(t.val(next.c).data[size_t(e)] == doctest::Approx(c_expect).epsilon(1e-15));
        CHECK(t.val(next.h).data[size_t(e)] ==
              doctest::Approx(0.5 * std::tanh(c_expect)).epsilon(1e-15));
    }
}

TEST_CASE("cell step matches an independent direct-summation oracle to 1e-10") {
    const int hidden = 3, grid = 20;
    std::mt19937_64 rng(29);
    Tensor x = random_tensor({1, grid, grid}, rng);
    Tensor h_prev = random_tensor({hidden, grid, grid}, rng);
    Tensor c_prev = random_tensor({hidden, grid, grid}, rng);
    Tensor wx = random_tensor({4 * hidden, 1, 3, 3}, rng);
    Tensor wh = random_tensor({4 * hidden, hidden, 3, 3}, rng);
    Tensor bias = random_tensor({4 * hidden, 1, 1}, rng);

    Tape t;
    CellVars w{t.value(wx), t.value(wh), t.value(bias)};
    const CellState next = convlstm_cell_step(t, t.value(x), {t.value(h_prev), t.value(c_prev)}, w);

    const Tensor pre_x = naive_conv(x, wx, 1), pre_h = naive_conv(h_prev, wh, 1);
    for (int c = 0; c < hidden; ++c)
        for (int y = 0; y < grid; ++y)
            for (int xx = 0; xx < grid; ++xx) {
                auto pre = [&](int block) {
                    const int ch = block * hidden + c;
                    return pre_x.at({ch, y, xx}) + pre_h.at({ch, y, xx}) + bias.at({ch, 0, 0});
                };
                const double f = sig(pre(0)), i = sig(pre(1)), g = std::tanh(pre(2)), o = sig(pre(3));
                const double cc = f * c_prev.at({c, y, xx}) + i * g;
                CHECK(std::fabs(t.val(next.c).at({c, y, xx}) - cc) < 1e-10);
                CHECK(std::fabs(t.val(next.h).at({c, y, xx}) - o * std::tanh(cc)) < 1e-10);
            }
}

TEST_CASE("gates keep hidden state inside (-1, 1) for wild inputs") {
    std::mt19937_64 rng(37);
    const int hidden = 4, grid = 6;
    Tape t;
    CellVars w{t.value(random_tensor({4 * hidden, 2, 3, 3}, rng, -10.0, 10.0)),
               t.value(random_tensor({4 * hidden, hidden, 3, 3}, rng, -10.0, 10.0)),
               t.value(random_tensor({4 * hidden, 1, 1}, rng, -10.0, 10.0))};
    CellState state{t.value(Tensor::zeros({hidden, grid, grid})), t.value(Tensor::zeros({hidden, grid, grid}))};
    for (int step = 0; step < 4; ++step) {
        state = convlstm_cell_step(t, t.value(random_tensor({2, grid, grid}, rng, -100.0, 100.0)), state, w);
        for (double v : t.val(state.h).data) {
            CHECK(v > -1.0);
            CHECK(v < 1.0);
        }
        CHECK(t.val(state.h).all_finite());
        CHECK(t.val(state.c).all_finite());
    }
}

namespace {

SaVars random_sa_vars(Tape& t, int hidden, int attn, std::mt19937_64& rng, double scale = 1.0) {
    auto r = [&](Shape s) { return t.value(random_tensor(std::move(s), rng, -scale, scale)); };
    SaVars w;
    w.wq = r({attn, hidden, 1, 1});
    w.whk = r({attn, hidden, 1, 1});
    w.whv = r({hidden, hidden, 1, 1});
    w.wmk = r({attn, hidden, 1, 1});
    w.wmv = r({hidden, hidden, 1, 1});
    w.wz = r({hidden, 2 * hidden, 1, 1});
    w.wmho = r({hidden, hidden, 1, 1});
    w.wmzo = r({hidden, hidden, 1, 1});
    w.wmhg = r({hidden, hidden, 1, 1});
    w.wmzg = r({hidden, hidden, 1, 1});
    w.wmhi = r({hidden, hidden, 1, 1});
    w.wmzi = r({hidden, hidden, 1, 1});
    w.bo = r({hidden, 1, 1});
    w.bg = r({hidden, 1, 1});
    w.bi = r({hidden, 1, 1});
    return w;
}

} // namespace

TEST_CASE("attention rows sum to one within 1e-10 and memory stays bounded") {
    std::mt19937_64 rng(41);
    const int hidden = 4, attn = 2, grid = 5, cells = grid * grid;
    Tape t;
    SaVars w = random_sa_vars(t, hidden, attn, rng, 0.25); // keeps tanh well off its saturation plateau
    Var h_in = t.value(random_tensor({hidden, grid, grid}, rng));
    Var m_prev = t.value(random_tensor({hidden, grid, grid}, rng)); // in [-1, 1]
    const SaStep step = sa_memory_step(t, h_in, m_prev, w);

    for (const Var attn_map : {step.attn_h, step.attn_m}) {
        const Tensor& a = t.val(attn_map);
        REQUIRE(a.shape == Shape{cells, cells});
        for (int row = 0; row < cells; ++row) {
            double sum = 0.0;
            for (int col = 0; col < cells; ++col) sum += a.at({row, col});
            CHECK(std::fabs(sum - 1.0) < 1e-10);
        }
    }
    for (double v : t.val(step.m_next).data) {
        CHECK(v > -1.0);
        CHECK(v < 1.0);
    }

    // saturating weights: the convex combination can round onto ±1 but never past
    SaVars wild = random_sa_vars(t, hidden, attn, rng, 10.0);
    const SaStep sat = sa_memory_step(t, t.value(random_tensor({hidden, grid, grid}, rng, -50.0, 50.0)),
                                      t.value(random_tensor({hidden, grid, grid}, rng)), wild);
    for (double v : t.val(sat.m_next).data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(t.val(sat.h_out).all_finite());
}

TEST_CASE("zero attention weights reduce the memory to an exact half-decay") {
    std::mt19937_64 rng(43);
    const int hidden = 3, attn = 2, grid = 4;
    Tape t;
    SaVars w = random_sa_vars(t, hidden, attn, rng, 0.0); // every weight and bias zero
    Tensor m0 = random_tensor({hidden, grid, grid}, rng);
    const SaStep step =
        sa_memory_step(t, t.value(random_tensor({hidden, grid, grid}, rng)), t.value(m0), w);
    for (int64_t e = 0; e < m0.size(); ++e) {
        CHECK(t.val(step.m_next).data[size_t(e)] == 0.5 * m0.data[size_t(e)]); // bitwise
        CHECK(t.val(step.h_out).data[size_t(e)] == 0.5 * (0.5 * m0.data[size_t(e)]));
    }
}

TEST_CASE("default config: 8 query/key channels, value keeps hidden channels") {
    RecurrentModel model({Variant::self_attention}, 1);
    bool saw_q = false, saw_v = false;
    for (ParamTensor* p : model.parameters()) {
        if (p->name == "layer0.wq") {
            CHECK(p->value.shape == Shape{8, 64, 1, 1});
            saw_q = true;
        }
        if (p->name == "layer0.whv") {
            CHECK(p->value.shape == Shape{64, 64, 1, 1});
            saw_v = true;
        }
    }
    CHECK(saw_q);
    CHECK(saw_v);
}

TEST_CASE("rollout produces a 1x20x20 grid and is seed-deterministic") {
    std::mt19937_64 rng(47);
    std::vector<Tensor> window;
    for (int i = 0; i < 10; ++i) window.push_back(random_tensor({1, 20, 20}, rng, 0.1, 0.4));

    for (Variant variant : {Variant::plain, Variant::self_attention}) {
        RecurrentConfig cfg;
        cfg.variant = variant;
        cfg.hidden_channels = 8; // full Table-1 width exercised in the acceptance suite
        RecurrentModel a(cfg, 123), b(cfg, 123);
        const Tensor pa = a.predict(window), pb = b.predict(window);
        CHECK(pa.shape == Shape{1, 20, 20});
        CHECK(pa.all_finite());
        CHECK(pa.data == pb.data); // bitwise
    }
}

TEST_CASE("second layer consumes first-layer hidden maps") {
    RecurrentConfig cfg;
    cfg.layers = 2;
    cfg.hidden_channels = 5;
    RecurrentModel model(cfg, 7);
    bool found = false;
    for (ParamTensor* p : model.parameters())
        if (p->name == "layer1.wx") {
            CHECK(p->value.shape == Shape{20, 5, 3, 3}); // in-channels = hidden of layer 0
            found = true;
        }
    CHECK(found);

    std::mt19937_64 rng(53);
    std::vector<Tensor> window;
    for (int i = 0; i < 3; ++i) window.push_back(random_tensor({1, 6, 6}, rng));
    CHECK(model.predict(window).shape == Shape{1, 6, 6});
}

TEST_CASE("invalid configs are rejected") {
    CHECK_THROWS_AS(RecurrentModel({Variant::plain, 1, 64, 3, 0}, 1), ConfigError);
    CHECK_THROWS_AS(RecurrentModel({Variant::plain, 1, 64, 4, 1}, 1), ConfigError); // even kernel
    CHECK_THROWS_AS(RecurrentModel({Variant::plain, 1, 0, 3, 1}, 1), ConfigError);
}

TEST_CASE("whole-model gradient check, both variants, n=3 hidden=4") {
    std::mt19937_64 rng(59);
    std::vector<Tensor> window;
    for (int i = 0; i < 3; ++i) window.push_back(random_tensor({1, 6, 6}, rng, 0.1, 0.4));
    const Tensor target = random_tensor({1, 6, 6}, rng, 0.1, 0.4);

    for (Variant variant : {Variant::plain, Variant::self_attention}) {
        RecurrentConfig cfg;
        cfg.variant = variant;
        cfg.hidden_channels = 4;
        cfg.attention_channels = 2;
        RecurrentModel model(cfg, 61);

        std::vector<Tensor> points;
        for (ParamTensor* p : model.parameters()) points.push_back(p->value);
        auto fn = [&](Tape& t, const std::vector<Var>& vars) {
            nn::WeightVars w{vars, 0};
            std::vector<Var> win;
            for (const Tensor& g : window) win.push_back(t.value(g));
            const Var pred = model.forward(t, win, w);
            return t.mean(t.abs(t.sub(pred, t.value(target))));
        };
        const auto report = ad::grad_check(fn, points, 1e-4);
        INFO("variant ", variant == Variant::plain ? "plain" : "self_attention", " max rel err ",
             report.max_rel_error);
        CHECK(report.pass);
    }
}
