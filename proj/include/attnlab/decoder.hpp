#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "attnlab/attention_tensor.hpp"
#include "attnlab/intervention.hpp"
#include "attnlab/modality.hpp"

namespace attnlab {

using TokenId = std::uint32_t;

enum class Answer { No, Yes };

struct DecoderConfig {
    std::size_t layer_count = 8;
    std::size_t head_count = 4;
    std::size_t model_dim = 64;
    std::size_t feedforward_dim = 128;
    std::size_t vocab_size = 120;
    std::size_t max_seq_len = 24;
    TokenId yes_token_id = 4;
    TokenId no_token_id = 5;

    std::size_t head_dim() const { return model_dim / head_count; }

    // Throws ConfigError on a violated invariant.
    void validate() const;

    bool operator==(const DecoderConfig&) const = default;
};

// Offsets of each named tensor inside the flat parameter vector. The order
// is also the checkpoint order:
//   token_embedding [vocab][dim], position_embedding [max_seq][dim],
//   per layer: ln1_gain, ln1_bias [dim], w_query, w_key, w_value, w_out
//   [dim][dim], ln2_gain, ln2_bias [dim], ff_in [dim][ff], ff_in_bias [ff],
//   ff_out [ff][dim], ff_out_bias [dim],
//   final_gain, final_bias [dim], output_head [dim][vocab].
// Matrices are row-major [input][output].
struct LayerOffsets {
    std::size_t ln1_gain, ln1_bias;
    std::size_t w_query, w_key, w_value, w_out;
    std::size_t ln2_gain, ln2_bias;
    std::size_t ff_in, ff_in_bias, ff_out, ff_out_bias;
};

struct ParamLayout {
    std::size_t token_embedding = 0;
    std::size_t position_embedding = 0;
    std::vector<LayerOffsets> layers;
    std::size_t final_gain = 0;
    std::size_t final_bias = 0;
    std::size_t output_head = 0;
    std::size_t total = 0;

    explicit ParamLayout(const DecoderConfig& config);
};

// All trainable weights in one flat double vector. Gradients use the same
// type and layout.
class DecoderParams {
public:
    explicit DecoderParams(const DecoderConfig& config);

    const DecoderConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }

    double* at(std::size_t offset) { return values_.data() + offset; }
    const double* at(std::size_t offset) const { return values_.data() + offset; }

    void set_zero();
    bool all_finite() const;
    // Rounds every value to the nearest 32-bit float, the checkpoint precision.
    void round_to_float();
    // FNV-1a over the float32 image of the parameters.
    std::uint64_t checksum() const;

    bool operator==(const DecoderParams& other) const { return values_ == other.values_; }

private:
    DecoderConfig config_;
    ParamLayout layout_;
    std::vector<double> values_;
};

struct ForwardOptions {
    // Post-softmax, pre-intervention attention of every layer and head.
    bool capture_attention = false;
    // Residual stream after each layer.
    bool capture_hidden = false;
};

struct ForwardOutput {
    std::vector<double> logits;
    std::optional<AttentionTensor> captured_attention;
    RowRewriteStats rewrite_stats;
    std::vector<std::vector<double>> layer_outputs;
};

// Pre-norm decoder forward over a templated prompt. In-scope post-softmax
// rows are rewritten per spec before value mixing; PAI additionally scales
// in-scope image-key scores before the softmax and fuses the logits with an
// image-free forward pass.
// Throws ShapeError when the token count differs from the layout or exceeds
// max_seq_len, NumericalError on non-finite logits.
ForwardOutput forward(const DecoderParams& params, std::span<const TokenId> tokens,
                      const ModalityLayout& layout, const InterventionSpec& spec,
                      ForwardOptions options = {});

// Yes iff the yes logit strictly exceeds the no logit.
Answer answer(const ForwardOutput& output, const DecoderConfig& config);
Answer answer(std::span<const double> logits, const DecoderConfig& config);

AttentionTensor capture_attention(const DecoderParams& params, std::span<const TokenId> tokens,
                                  const ModalityLayout& layout);

// Cross-entropy of the final-position distribution against target, without
// intervention.
double answer_loss(const DecoderParams& params, std::span<const TokenId> tokens, TokenId target);

// As answer_loss, and adds d(loss)/d(params) into grads.
double answer_loss_and_gradient(const DecoderParams& params, std::span<const TokenId> tokens,
                                TokenId target, DecoderParams& grads);

// Summed loss over a batch of sequences, evaluated jointly; the gradient of
// the sum is added into grads. Throws ShapeError on a size mismatch.
double batch_loss_and_gradient(const DecoderParams& params,
                               std::span<const std::span<const TokenId>> sequences,
                               std::span<const TokenId> targets, DecoderParams& grads);

}  // namespace attnlab
