#pragma once

#include "volcast/nn.hpp"

#include <cstdint>

namespace volcast::tf {

using ad::ParamTensor;
using ad::Shape;
using ad::shape_str;
using ad::Tensor;
using ad::Var;

enum class Head { sffn, final_conv };

struct ConvTfConfig {
    int window = 10;        // n: input sequence length
    int channels = 32;      // d: working channel width
    int heads = 4;          // h: attention heads, must divide d
    int layers = 1;         // encoder/decoder depth
    int input_channels = 1; // 5 when market matrices ride along
    std::vector<int> embed_widths; // empty: d/8 -> d/4 -> d/2 -> d
    std::vector<int> sffn_widths;  // empty: the 30-layer rise-and-fall schedule
    bool use_biases = true;
    bool use_residual = true; // identity residual around each attention block
    Head head = Head::sffn;
};

/// The 30-layer prediction-head schedule: widths rise 32 -> 64 -> 128 over the
/// first half and fall to a single channel over the second.
std::vector<int> default_sffn_widths();

/// Sinusoidal per-channel encoding for one sequence slot, shape (channels,1,1),
/// broadcast spatially when added.
Tensor positional_encoding(int slot, int channels);

/// Per-head 3x3 kernels: w1 (query), w2 (key=value), w3 (score, single channel).
struct AttnWeights {
    std::vector<Var> w1, w2, w3;
};

struct AttnResult {
    std::vector<Var> outputs;   // one d-channel map per query
    std::vector<Var> attention; // per (query, head): (slots,H,W) per-pixel softmax
};

/// Multi-head convolutional attention. Each query map attends over the
/// keys_values sequence; per pixel the slot weights are a softmax, and each
/// head contributes d/h output channels.
AttnResult multi_conv_attn(ad::Tape& t, const std::vector<Var>& queries, const std::vector<Var>& keys_values,
                           const AttnWeights& w);

/// Stack of same-padded convolutions, each followed by leaky ReLU. The last
/// layer uses a 1x1 kernel when `last_is_1x1`. Weights (and biases when
/// `biases`) are consumed from the cursor in layer order.
Var conv_stack(ad::Tape& t, Var x, nn::WeightVars& weights, const std::vector<int>& widths, bool biases,
               bool last_is_1x1);

/// The paper-shaped SFFN head: exactly 30 layers ending in a single channel.
Var sffn_forward(ad::Tape& t, Var x, nn::WeightVars& weights, const std::vector<int>& widths, bool biases);

/// Convolutional transformer forecaster: embed + encode the window, decode
/// from the most recent day's embedded map, project through the SFFN.
class ConvTfModel {
public:
    ConvTfModel(ConvTfConfig cfg, uint64_t seed);

    const ConvTfConfig& config() const { return cfg_; }
    std::vector<ParamTensor*> parameters();

    /// Embedding stage: four widening convolutions plus positional encoding.
    /// Consumes the embedding weights from the cursor.
    std::vector<Var> feature_embed(ad::Tape& t, const std::vector<Var>& window, nn::WeightVars& weights) const;

    Var forward(ad::Tape& t, const std::vector<Var>& window, nn::WeightVars& weights) const;
    Var forward(ad::Tape& t, const std::vector<Var>& window);
    Tensor predict(const std::vector<Tensor>& window);

private:
    ConvTfConfig cfg_;
    std::vector<ParamTensor> params_;

    AttnWeights take_attn(nn::WeightVars& weights) const;
};

} // namespace volcast::tf
