#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnlab/benchgen.hpp"
#include "attnlab/decoder.hpp"

namespace attnlab {

enum class OptimizerKind { SGD, Adam };

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epoch_count = 6;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::optional<double> gradient_clip_norm = 1.0;

    // Throws ConfigError on a violated invariant.
    void validate() const;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double final_train_accuracy = 0.0;
    // Yes-rate on a label-balanced subsample of the training prompts.
    double probe_yes_rate = 0.0;
    std::uint64_t param_checksum = 0;
};

// key: value text record, one field per line, doubles at round-trip
// precision.
std::string encode_train_report(const TrainReport& report);

// Scaled normal initialization, deterministic in seed: embeddings and
// projections N(0, 1/sqrt(fan_in)), residual output projections further
// scaled by 1/sqrt(2 * layer_count), norm gains 1, biases 0.
DecoderParams init_params(const DecoderConfig& config, std::uint64_t seed);

// Constant learning-rate SGD or Adam over the flat parameter vector.
class Optimizer {
public:
    Optimizer(const TrainConfig& config, std::size_t param_count);

    // grads holds the batch-mean gradient; clipping is applied here.
    void step(DecoderParams& params, DecoderParams& grads);

private:
    TrainConfig config_;
    std::vector<double> first_moment_;
    std::vector<double> second_moment_;
    std::uint64_t steps_ = 0;
};

// Minibatch training on the answer-token cross-entropy. Deterministic in
// (initial params, dataset, config). Throws TrainingDiverged on a non-finite
// loss, ConfigError for an empty dataset or invalid config.
std::pair<DecoderParams, TrainReport> train(DecoderParams params, const Dataset& dataset,
                                            const TrainConfig& config);

// Target token for a prompt label.
TokenId label_token(const DecoderConfig& config, Answer label);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
};

// Central finite differences on `count` seeded random parameters, compared
// against the analytic gradient. The relative error denominator is
// max(|analytic|, |numeric|, 1e-8). Throws ConfigError for epsilon outside
// [1e-5, 1e-3], NumericalError for a non-finite gradient.
GradCheckResult grad_check(const DecoderParams& params, std::span<const TokenId> tokens,
                           TokenId target, double epsilon, std::size_t count = 128,
                           std::uint64_t seed = 0);

}  // namespace attnlab
