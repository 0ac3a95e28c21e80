#include "volcast/convtf.hpp"

#include "volcast/errors.hpp"

#include <cmath>

namespace volcast::tf {

using ad::Tape;

std::vector<int> default_sffn_widths() {
    std::vector<int> widths;
    for (int w : {32, 64, 128})
        for (int rep = 0; rep < 5; ++rep) widths.push_back(w);
    for (int w : {112, 96, 80, 64, 48, 32, 24, 16, 12, 8, 6, 4, 2, 2, 1}) widths.push_back(w);
    return widths;
}

Tensor positional_encoding(int slot, int channels) {
    Tensor pe = Tensor::zeros({channels, 1, 1});
    for (int c = 0; c < channels; ++c) {
        const double exponent = static_cast<double>(c - (c % 2)) / channels;
        const double angle = slot / std::pow(10000.0, exponent);
        pe.data[static_cast<size_t>(c)] = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return pe;
}

AttnResult multi_conv_attn(Tape& t, const std::vector<Var>& queries, const std::vector<Var>& keys_values,
                           const AttnWeights& w) {
    if (queries.empty() || keys_values.empty())
        throw ShapeError("attention needs at least one query and one key/value map");
    if (w.w1.size() != w.w2.size() || w.w1.size() != w.w3.size() || w.w1.empty())
        throw ShapeError("attention weights must hold w1/w2/w3 for each head");
    const int heads = static_cast<int>(w.w1.size());
    const int slots = static_cast<int>(keys_values.size());

    // Key/value projections are shared by every query.
    std::vector<std::vector<Var>> values(static_cast<size_t>(heads));
    for (int j = 0; j < heads; ++j)
        for (const Var kv : keys_values) values[size_t(j)].push_back(t.conv2d(kv, w.w2[size_t(j)], 1));

    AttnResult result;
    for (const Var query : queries) {
        std::vector<Var> head_outputs;
        for (int j = 0; j < heads; ++j) {
            const Var q = t.conv2d(query, w.w1[size_t(j)], 1);
            std::vector<Var> scores;
            scores.reserve(static_cast<size_t>(slots));
            for (int i = 0; i < slots; ++i)
                scores.push_back(t.conv2d(t.concat({q, values[size_t(j)][size_t(i)]}, 0), w.w3[size_t(j)], 1));
            const Var attn = t.softmax(t.concat(scores, 0), 0); // (slots,H,W), per-pixel over slots
            Var out;
            for (int i = 0; i < slots; ++i) {
                const Var weighted = t.mul(t.slice(attn, 0, i, 1), values[size_t(j)][size_t(i)]);
                out = out.valid() ? t.add(out, weighted) : weighted;
            }
            head_outputs.push_back(out);
            result.attention.push_back(attn);
        }
        result.outputs.push_back(heads == 1 ? head_outputs[0] : t.concat(head_outputs, 0));
    }
    return result;
}

Var conv_stack(Tape& t, Var x, nn::WeightVars& weights, const std::vector<int>& widths, bool biases,
               bool last_is_1x1) {
    for (size_t l = 0; l < widths.size(); ++l) {
        const bool one_by_one = last_is_1x1 && l + 1 == widths.size();
        Var y = t.conv2d(x, weights.take(), one_by_one ? 0 : 1);
        if (biases) y = t.add(y, weights.take());
        x = t.leaky_relu(y);
    }
    return x;
}

Var sffn_forward(Tape& t, Var x, nn::WeightVars& weights, const std::vector<int>& widths, bool biases) {
    if (widths.size() != 30)
        throw ConfigError("prediction head expects its 30-layer schedule, got " +
                          std::to_string(widths.size()) + " layers");
    if (widths.back() != 1) throw ConfigError("prediction head must end in a single channel");
    return conv_stack(t, x, weights, widths, biases, /*last_is_1x1=*/true);
}

namespace {

std::vector<int> resolved_embed(const ConvTfConfig& cfg) {
    if (!cfg.embed_widths.empty()) return cfg.embed_widths;
    const int d = cfg.channels;
    // Never pinch the early embedding layers below four channels: with one or
    // two channels a run of negative tap-sums can mute the whole input pathway
    // behind the leaky activations, leaving the model input-independent.
    return {std::max(4, d / 8), std::max(4, d / 4), std::max(4, d / 2), d};
}

std::vector<int> resolved_sffn(const ConvTfConfig& cfg) {
    return cfg.sffn_widths.empty() ? default_sffn_widths() : cfg.sffn_widths;
}

} // namespace

ConvTfModel::ConvTfModel(ConvTfConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.window < 1) throw ConfigError("transformer window must be at least 1");
    if (cfg_.channels < 1 || cfg_.input_channels < 1) throw ConfigError("channel counts must be positive");
    if (cfg_.heads < 1 || cfg_.channels % cfg_.heads != 0)
        throw ConfigError("head count " + std::to_string(cfg_.heads) + " must divide channel count " +
                          std::to_string(cfg_.channels));
    if (cfg_.layers < 1) throw ConfigError("transformer needs at least one encoder/decoder layer");
    cfg_.embed_widths = resolved_embed(cfg_);
    if (cfg_.embed_widths.size() != 4 || cfg_.embed_widths.back() != cfg_.channels)
        throw ConfigError("embedding schedule must be four convolutions ending at the working width");
    cfg_.sffn_widths = resolved_sffn(cfg_);
    if (cfg_.head == Head::sffn && (cfg_.sffn_widths.empty() || cfg_.sffn_widths.back() != 1))
        throw ConfigError("prediction-head schedule must end in a single channel");

    std::mt19937_64 rng(seed);
    const int d = cfg_.channels, dh = d / cfg_.heads;
    // Convolutions feeding a leaky rectifier take the larger gain so the deep
    // embed/encode/decode/head pipeline keeps its input signal alive; the
    // attention projections and score convolutions stay at unit gain.
    auto push = [&](const std::string& name, Shape shape, int fan_in, double gain = 1.0) {
        params_.emplace_back(name, nn::fan_uniform(std::move(shape), fan_in, rng, gain));
    };
    auto push_bias = [&](const std::string& name, int channels) {
        if (cfg_.use_biases) params_.emplace_back(name, Tensor::zeros({channels, 1, 1}));
    };
    auto push_attn = [&](const std::string& prefix) {
        for (int j = 0; j < cfg_.heads; ++j) {
            const std::string p = prefix + ".head" + std::to_string(j) + ".";
            push(p + "w1", {dh, d, 3, 3}, d * 9);
            push(p + "w2", {dh, d, 3, 3}, d * 9);
            push(p + "w3", {1, 2 * dh, 3, 3}, 2 * dh * 9);
        }
    };

    int in = cfg_.input_channels;
    for (size_t e = 0; e < 4; ++e) {
        const int out = cfg_.embed_widths[e];
        push("embed.w" + std::to_string(e + 1), {out, in, 3, 3}, in * 9, nn::kLeakyGain);
        push_bias("embed.b" + std::to_string(e + 1), out);
        in = out;
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "encoder" + std::to_string(l);
        push_attn(p + ".attn");
        push(p + ".w_enc", {d, d, 3, 3}, d * 9, nn::kLeakyGain);
        push_bias(p + ".b_enc", d);
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "decoder" + std::to_string(l);
        push_attn(p + ".self_attn");
        push_attn(p + ".cross_attn");
        push(p + ".w_dec", {d, d, 3, 3}, d * 9, nn::kLeakyGain);
        push_bias(p + ".b_dec", d);
    }
    if (cfg_.head == Head::sffn) {
        int c = d;
        for (size_t l = 0; l < cfg_.sffn_widths.size(); ++l) {
            const int out = cfg_.sffn_widths[l];
            const bool one_by_one = l + 1 == cfg_.sffn_widths.size();
            const int k = one_by_one ? 1 : 3;
            push("sffn.w" + std::to_string(l), {out, c, k, k}, c * k * k, nn::kLeakyGain);
            push_bias("sffn.b" + std::to_string(l), out);
            c = out;
        }
    } else {
        push("head.w_final", {1, d, 1, 1}, d, nn::kLeakyGain);
        push_bias("head.b_final", 1);
    }
}

std::vector<ParamTensor*> ConvTfModel::parameters() {
    std::vector<ParamTensor*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
}

AttnWeights ConvTfModel::take_attn(nn::WeightVars& weights) const {
    AttnWeights w;
    for (int j = 0; j < cfg_.heads; ++j) {
        w.w1.push_back(weights.take());
        w.w2.push_back(weights.take());
        w.w3.push_back(weights.take());
    }
    return w;
}

std::vector<Var> ConvTfModel::feature_embed(Tape& t, const std::vector<Var>& window,
                                            nn::WeightVars& weights) const {
    if (static_cast<int>(window.size()) != cfg_.window)
        throw ShapeError("expected a window of " + std::to_string(cfg_.window) + " grids, got " +
                         std::to_string(window.size()));
    const Shape& in_shape = t.val(window[0]).shape;
    if (in_shape.size() != 3 || in_shape[0] != cfg_.input_channels)
        throw ShapeError("window grids must be (" + std::to_string(cfg_.input_channels) + ",H,W), got " +
                         shape_str(in_shape));

    std::vector<Var> conv_ws, bias_ws;
    for (int e = 0; e < 4; ++e) {
        conv_ws.push_back(weights.take());
        if (cfg_.use_biases) bias_ws.push_back(weights.take());
    }
    std::vector<Var> embedded;
    embedded.reserve(window.size());
    for (size_t p = 0; p < window.size(); ++p) {
        Var x = window[p];
        for (int e = 0; e < 4; ++e) {
            Var y = t.conv2d(x, conv_ws[size_t(e)], 1);
            if (cfg_.use_biases) y = t.add(y, bias_ws[size_t(e)]);
            x = t.leaky_relu(y);
        }
        embedded.push_back(t.add(x, t.value(positional_encoding(static_cast<int>(p), cfg_.channels))));
    }
    return embedded;
}

Var ConvTfModel::forward(Tape& t, const std::vector<Var>& window, nn::WeightVars& weights) const {
    std::vector<Var> seq = feature_embed(t, window, weights);
    const Var latest = seq.back();

    auto residual = [&](Var attended, Var identity) {
        return cfg_.use_residual ? t.add(attended, identity) : attended;
    };

    for (int l = 0; l < cfg_.layers; ++l) {
        const AttnWeights attn = take_attn(weights);
        const Var w_enc = weights.take();
        const Var b_enc = cfg_.use_biases ? weights.take() : Var{};
        const AttnResult self_attn = multi_conv_attn(t, seq, seq, attn);
        for (size_t i = 0; i < seq.size(); ++i) {
            Var y = t.conv2d(residual(self_attn.outputs[i], seq[i]), w_enc, 1);
            if (b_enc.valid()) y = t.add(y, b_enc);
            seq[i] = t.leaky_relu(y);
        }
    }

    Var q = latest; // the decoder conditions on the most recent day
    for (int l = 0; l < cfg_.layers; ++l) {
        const AttnWeights self_w = take_attn(weights);
        const AttnWeights cross_w = take_attn(weights);
        const Var w_dec = weights.take();
        const Var b_dec = cfg_.use_biases ? weights.take() : Var{};
        q = residual(multi_conv_attn(t, {q}, {q}, self_w).outputs[0], q);
        q = residual(multi_conv_attn(t, {q}, seq, cross_w).outputs[0], q);
        Var y = t.conv2d(q, w_dec, 1);
        if (b_dec.valid()) y = t.add(y, b_dec);
        q = t.leaky_relu(y);
    }

    if (cfg_.head == Head::final_conv) {
        Var y = t.conv2d(q, weights.take(), 0);
        if (cfg_.use_biases) y = t.add(y, weights.take());
        return t.leaky_relu(y);
    }
    if (cfg_.sffn_widths.size() == 30) return sffn_forward(t, q, weights, cfg_.sffn_widths, cfg_.use_biases);
    return conv_stack(t, q, weights, cfg_.sffn_widths, cfg_.use_biases, /*last_is_1x1=*/true); // toy override

}

Var ConvTfModel::forward(Tape& t, const std::vector<Var>& window) {
    nn::WeightVars w = nn::bind_all(t, parameters());
    return forward(t, window, w);
}

Tensor ConvTfModel::predict(const std::vector<Tensor>& window) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(window.size());
    for (const Tensor& g : window) vars.push_back(t.value(g));
    return t.val(forward(t, vars));
}

} // namespace volcast::tf
