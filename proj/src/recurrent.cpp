#include "volcast/recurrent.hpp"

#include "volcast/errors.hpp"

namespace volcast::rnn {

using ad::Tape;
using ad::Var;

CellState convlstm_cell_step(Tape& t, Var x, const CellState& prev, const CellVars& w) {
    const Shape& wx_shape = t.val(w.wx).shape;
    const int hidden = wx_shape[0] / 4;
    const int padding = (wx_shape[2] - 1) / 2;

    Var pre = t.add(t.conv2d(x, w.wx, padding), t.conv2d(prev.h, w.wh, padding));
    if (w.bias.valid()) pre = t.add(pre, w.bias);

    Var f = t.sigmoid(t.slice(pre, 0, 0, hidden));
    Var i = t.sigmoid(t.slice(pre, 0, hidden, hidden));
    Var g = t.tanh(t.slice(pre, 0, 2 * hidden, hidden));
    Var o = t.sigmoid(t.slice(pre, 0, 3 * hidden, hidden));

    CellState next;
    next.c = t.add(t.mul(f, prev.c), t.mul(i, g));
    next.h = t.mul(o, t.tanh(next.c));
    return next;
}

SaStep sa_memory_step(Tape& t, Var h_in, Var m_prev, const SaVars& w) {
    const Shape& hs = t.val(h_in).shape;
    if (hs != t.val(m_prev).shape)
        throw ShapeError("attention memory shape " + shape_str(t.val(m_prev).shape) +
                         " does not match hidden shape " + shape_str(hs));
    const int channels = hs[0], height = hs[1], width = hs[2];
    const int cells = height * width;

    auto mix = [&](Var weight, Var map) {
        const int out = t.val(weight).shape[0];
        return t.matmul(t.reshape(weight, {out, channels}), t.reshape(map, {channels, cells}));
    };
    Var q = mix(w.wq, h_in);       // (attn, cells)
    Var kh = mix(w.whk, h_in);     // (attn, cells)
    Var vh = mix(w.whv, h_in);     // (channels, cells)
    Var km = mix(w.wmk, m_prev);   // (attn, cells)
    Var vm = mix(w.wmv, m_prev);   // (channels, cells)

    Var ah = t.softmax(t.matmul(q, kh, true, false), 1); // rows: query cells
    Var am = t.softmax(t.matmul(q, km, true, false), 1);
    Var zh = t.matmul(vh, ah, false, true); // (channels, cells)
    Var zm = t.matmul(vm, am, false, true);

    Var z = t.reshape(t.matmul(t.reshape(w.wz, {channels, 2 * channels}), t.concat({zh, zm}, 0)),
                      {channels, height, width});

    auto gate = [&](Var wh_, Var wz_, Var bias, bool squash_tanh) {
        Var pre = t.add(nn::conv1x1(t, wh_, h_in), nn::conv1x1(t, wz_, z));
        if (bias.valid()) pre = t.add(pre, bias);
        return squash_tanh ? t.tanh(pre) : t.sigmoid(pre);
    };
    Var o = gate(w.wmho, w.wmzo, w.bo, false);
    Var g = gate(w.wmhg, w.wmzg, w.bg, true);
    Var i = gate(w.wmhi, w.wmzi, w.bi, false);

    SaStep out;
    out.m_next = t.add(t.sub(m_prev, t.mul(i, m_prev)), t.mul(i, g)); // (1-i)·M + i·G
    out.h_out = t.mul(o, out.m_next);
    out.attn_h = ah;
    out.attn_m = am;
    return out;
}

RecurrentModel::RecurrentModel(RecurrentConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.layers < 1) throw ConfigError("recurrent model needs at least one layer");
    if (cfg.hidden_channels < 1 || cfg.input_channels < 1)
        throw ConfigError("recurrent model channel counts must be positive");
    if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0)
        throw ConfigError("recurrent model kernel size must be odd (same-padded convolutions)");
    if (cfg.attention_channels < 1) throw ConfigError("attention channel count must be positive");

    std::mt19937_64 rng(seed);
    const int h = cfg.hidden_channels, k = cfg.kernel_size, a = cfg.attention_channels;
    auto push = [&](const std::string& name, Shape shape, int fan_in) {
        params_.emplace_back(name, nn::fan_uniform(std::move(shape), fan_in, rng));
    };
    for (int l = 0; l < cfg.layers; ++l) {
        const int in = (l == 0) ? cfg.input_channels : h;
        const std::string p = "layer" + std::to_string(l) + ".";
        push(p + "wx", {4 * h, in, k, k}, in * k * k);
        push(p + "wh", {4 * h, h, k, k}, h * k * k);
        if (cfg.use_biases) {
            Tensor b = Tensor::zeros({4 * h, 1, 1});
            for (int c = 0; c < h; ++c) b.data[static_cast<size_t>(c)] = 1.0; // forget gate opens first
            params_.emplace_back(p + "bias", std::move(b));
        }
        if (cfg.variant == Variant::self_attention) {
            push(p + "wq", {a, h, 1, 1}, h);
            push(p + "whk", {a, h, 1, 1}, h);
            push(p + "whv", {h, h, 1, 1}, h);
            push(p + "wmk", {a, h, 1, 1}, h);
            push(p + "wmv", {h, h, 1, 1}, h);
            push(p + "wz", {h, 2 * h, 1, 1}, 2 * h);
            for (const char* g : {"wmho", "wmzo", "wmhg", "wmzg", "wmhi", "wmzi"})
                push(p + g, {h, h, 1, 1}, h);
            if (cfg.use_biases)
                for (const char* g : {"bo", "bg", "bi"})
                    params_.emplace_back(p + g, Tensor::zeros({h, 1, 1}));
        }
    }
    push("w_final", {1, h, 1, 1}, h);
}

std::vector<ParamTensor*> RecurrentModel::parameters() {
    std::vector<ParamTensor*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
}

Var RecurrentModel::forward(Tape& t, const std::vector<Var>& window, nn::WeightVars& weights) const {
    if (window.empty()) throw ShapeError("recurrent forward needs a non-empty window");
    const Shape& in_shape = t.val(window[0]).shape;
    if (in_shape.size() != 3 || in_shape[0] != cfg_.input_channels)
        throw ShapeError("window grids must be (" + std::to_string(cfg_.input_channels) +
                         ",H,W), got " + shape_str(in_shape));
    const int h = cfg_.hidden_channels, height = in_shape[1], width = in_shape[2];

    std::vector<Var> seq = window;
    for (int l = 0; l < cfg_.layers; ++l) {
        CellVars cell;
        cell.wx = weights.take();
        cell.wh = weights.take();
        if (cfg_.use_biases) cell.bias = weights.take();
        SaVars sa;
        if (cfg_.variant == Variant::self_attention) {
            sa.wq = weights.take();
            sa.whk = weights.take();
            sa.whv = weights.take();
            sa.wmk = weights.take();
            sa.wmv = weights.take();
            sa.wz = weights.take();
            sa.wmho = weights.take();
            sa.wmzo = weights.take();
            sa.wmhg = weights.take();
            sa.wmzg = weights.take();
            sa.wmhi = weights.take();
            sa.wmzi = weights.take();
            if (cfg_.use_biases) {
                sa.bo = weights.take();
                sa.bg = weights.take();
                sa.bi = weights.take();
            }
        }

        CellState state{t.value(Tensor::zeros({h, height, width})), t.value(Tensor::zeros({h, height, width}))};
        Var memory = t.value(Tensor::zeros({h, height, width}));
        std::vector<Var> hidden;
        hidden.reserve(seq.size());
        for (Var x : seq) {
            state = convlstm_cell_step(t, x, state, cell);
            if (cfg_.variant == Variant::self_attention) {
                SaStep step = sa_memory_step(t, state.h, memory, sa);
                state.h = step.h_out;
                memory = step.m_next;
            }
            hidden.push_back(state.h);
        }
        seq = std::move(hidden);
    }
    return nn::conv1x1(t, weights.take(), seq.back());
}

Var RecurrentModel::forward(Tape& t, const std::vector<Var>& window) {
    nn::WeightVars w = nn::bind_all(t, parameters());
    return forward(t, window, w);
}

Tensor RecurrentModel::predict(const std::vector<Tensor>& window) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(window.size());
    for (const Tensor& g : window) vars.push_back(t.value(g));
    return t.val(forward(t, vars));
}

} // namespace volcast::rnn
