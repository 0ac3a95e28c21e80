#include "volcast/pinn.hpp"

#include "volcast/black_scholes.hpp"
#include "volcast/errors.hpp"

namespace volcast::pinn {

using ad::Tape;

PinnModel::PinnModel(PinnConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.hidden < 1) throw ConfigError("hidden width must be positive");
    if (!(cfg.spot_scale > 0.0)) throw ConfigError("spot scale must be positive");
    std::mt19937_64 rng(seed);
    for (const char* net : {"call", "sigma"}) {
        const std::string p = std::string(net) + ".";
        params_.emplace_back(p + "w1", nn::fan_uniform({cfg.hidden, 4}, 4, rng));
        params_.emplace_back(p + "b1", Tensor::zeros({1, cfg.hidden}));
        params_.emplace_back(p + "w2", nn::fan_uniform({1, cfg.hidden}, cfg.hidden, rng));
        params_.emplace_back(p + "b2", Tensor::zeros({1, 1}));
    }
}

std::vector<ParamTensor*> PinnModel::parameters() {
    std::vector<ParamTensor*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
}

namespace {

Var net_forward(Tape& t, Var x, Var w1, Var b1, Var w2, Var b2) {
    const Var hidden = t.softplus(t.add(t.matmul(x, w1, false, true), b1));
    return t.add(t.matmul(hidden, w2, false, true), b2);
}

} // namespace

PinnModel::Eval PinnModel::forward(Tape& t, const Tensor& batch, nn::WeightVars& weights) const {
    if (batch.rank() != 2 || batch.dim(1) != 4)
        throw ShapeError("expected a (B,4) batch of [S,tau,m,r] rows, got " + shape_str(batch.shape));
    const int rows = batch.dim(0);

    Tensor spot = Tensor::zeros({rows, 1}), tau = Tensor::zeros({rows, 1});
    Tensor strike = Tensor::zeros({rows, 1}), rate = Tensor::zeros({rows, 1});
    for (int i = 0; i < rows; ++i) {
        spot.at({i, 0}) = batch.at({i, 0});
        tau.at({i, 0}) = batch.at({i, 1});
        strike.at({i, 0}) = batch.at({i, 2}) * batch.at({i, 0}); // K = m*S, held fixed per row
        rate.at({i, 0}) = batch.at({i, 3});
    }

    Eval eval;
    eval.spot_leaf = t.value(std::move(spot));
    eval.tau_leaf = t.value(std::move(tau));
    const Var moneyness = t.div(t.value(std::move(strike)), eval.spot_leaf); // K/S rides the tape
    const Var x = t.concat({t.scale(eval.spot_leaf, 1.0 / cfg_.spot_scale), eval.tau_leaf, moneyness,
                            t.value(std::move(rate))},
                           1);

    const Var cw1 = weights.take(), cb1 = weights.take(), cw2 = weights.take(), cb2 = weights.take();
    const Var sw1 = weights.take(), sb1 = weights.take(), sw2 = weights.take(), sb2 = weights.take();
    eval.call = net_forward(t, x, cw1, cb1, cw2, cb2);
    eval.sigma = t.softplus(net_forward(t, x, sw1, sb1, sw2, sb2));
    return eval;
}

PinnModel::Eval PinnModel::forward(Tape& t, const Tensor& batch) {
    nn::WeightVars w = nn::bind_all(t, parameters());
    return forward(t, batch, w);
}

PinnModel::Loss PinnModel::loss(Tape& t, const Tensor& batch, const Tensor& sigma_true,
                                nn::WeightVars& weights) const {
    if (batch.dim(0) < 1) throw ShapeError("loss needs a nonempty batch");
    if (sigma_true.rank() != 2 || sigma_true.dim(0) != batch.dim(0) || sigma_true.dim(1) != 1)
        throw ShapeError("sigma_true must be (B,1) matching the batch, got " + shape_str(sigma_true.shape));
    const int rows = batch.dim(0);

    Loss out;
    out.eval = forward(t, batch, weights);
    const Var s = out.eval.spot_leaf;

    const Var wrt[2] = {s, out.eval.tau_leaf};
    const auto first = t.gradients(t.sum(out.eval.call), std::span<const Var>(wrt, 2));
    const Var delta = first[0], theta_tau = first[1];
    const auto second = t.gradients(t.sum(delta), std::span<const Var>(wrt, 1));
    const Var gamma = second[0];

    Tensor rate = Tensor::zeros({rows, 1});
    for (int i = 0; i < rows; ++i) rate.at({i, 0}) = batch.at({i, 3});
    const Var r = t.value(std::move(rate));

    const Var residual =
        bs::pde_residual(t, out.eval.call, theta_tau, delta, gamma, s, r, out.eval.sigma);

    out.sigma_term = t.mean(t.abs(t.sub(out.eval.sigma, t.value(sigma_true))));
    out.pde_term = t.mean(t.abs(residual));
    out.total = t.add(out.sigma_term, out.pde_term);
    return out;
}

PinnModel::Loss PinnModel::loss(Tape& t, const Tensor& batch, const Tensor& sigma_true) {
    nn::WeightVars w = nn::bind_all(t, parameters());
    return loss(t, batch, sigma_true, w);
}

} // namespace volcast::pinn
