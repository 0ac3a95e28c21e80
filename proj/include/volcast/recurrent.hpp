#pragma once

#include "volcast/nn.hpp"

#include <cstdint>

namespace volcast::rnn {

using ad::ParamTensor;
using ad::shape_str;
using ad::Shape;
using ad::Tensor;

enum class Variant { plain, self_attention };

struct RecurrentConfig {
    Variant variant = Variant::plain;
    int input_channels = 1;
    int hidden_channels = 64;
    int kernel_size = 3; // odd; convolutions are "same"-padded
    int layers = 1;
    int attention_channels = 8; // query/key channels of the attention memory
    bool use_biases = true;     // per-gate biases, forget gate starting at 1
};

/// Hidden and cell map of one ConvLSTM cell, as tape vars.
struct CellState {
    ad::Var h, c;
};

/// Stacked-gate cell weights: wx (4h, in, k, k), wh (4h, h, k, k), optional
/// bias (4h, 1, 1). Gate order along the channel axis: forget, input,
/// candidate, output.
struct CellVars {
    ad::Var wx, wh, bias; // bias invalid when biases are disabled
};

CellState convlstm_cell_step(ad::Tape& t, ad::Var x, const CellState& prev, const CellVars& w);

/// Attention-memory weights, all 1x1 channel-mixing convolutions.
struct SaVars {
    ad::Var wq, whk, whv, wmk, wmv, wz;
    ad::Var wmho, wmzo, wmhg, wmzg, wmhi, wmzi;
    ad::Var bo, bg, bi; // invalid when biases are disabled
};

struct SaStep {
    ad::Var h_out, m_next;
    ad::Var attn_h, attn_m; // (cells, cells) attention maps, rows = query cells
};

SaStep sa_memory_step(ad::Tape& t, ad::Var h_in, ad::Var m_prev, const SaVars& w);

/// ConvLSTM / SA-ConvLSTM forecaster: maps a window of surface grids to the
/// next day's 1-channel grid. Layer i's hidden sequence is layer i+1's input
/// sequence; the prediction is a 1x1 projection of the last hidden map.
class RecurrentModel {
public:
    RecurrentModel(RecurrentConfig cfg, uint64_t seed);

    const RecurrentConfig& config() const { return cfg_; }
    std::vector<ParamTensor*> parameters();

    /// Rollout from pre-bound weight vars (consumed in parameters() order).
    ad::Var forward(ad::Tape& t, const std::vector<ad::Var>& window, nn::WeightVars& weights) const;
    /// Binds this model's parameters and rolls out.
    ad::Var forward(ad::Tape& t, const std::vector<ad::Var>& window);

    Tensor predict(const std::vector<Tensor>& window);

private:
    RecurrentConfig cfg_;
    std::vector<ParamTensor> params_;
};

} // namespace volcast::rnn
