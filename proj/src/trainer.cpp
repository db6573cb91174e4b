#include "attnlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "attnlab/errors.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer == OptimizerKind::Adam) {
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            throw ConfigError("Adam betas must lie in [0, 1)");
        }
        if (!(adam_epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
    }
    if (gradient_clip_norm && !(*gradient_clip_norm > 0.0)) {
        throw ConfigError("gradient_clip_norm must be positive");
    }
}

std::string encode_train_report(const TrainReport& report) {
    auto fmt = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::ostringstream out;
    out << "epochs: " << report.epoch_loss.size() << '\n';
    out << "epoch_loss:";
    for (double l : report.epoch_loss) out << ' ' << fmt(l);
    out << '\n';
    out << "final_train_accuracy: " << fmt(report.final_train_accuracy) << '\n';
    out << "probe_yes_rate: " << fmt(report.probe_yes_rate) << '\n';
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(report.param_checksum));
    out << "param_checksum: " << hex << '\n';
    return out.str();
}

DecoderParams init_params(const DecoderConfig& config, std::uint64_t seed) {
    DecoderParams params(config);
    const ParamLayout& pl = params.layout();
    const std::size_t d = config.model_dim;
    const std::size_t ff = config.feedforward_dim;
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layer_count));
    Rng rng(seed);

    auto fill_normal = [&](std::size_t offset, std::size_t n, double stddev) {
        double* p = params.at(offset);
        for (std::size_t i = 0; i < n; ++i) p[i] = stddev * rng.normal();
    };
    auto fill_const = [&](std::size_t offset, std::size_t n, double value) {
        std::fill(params.at(offset), params.at(offset) + n, value);
    };
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_sqrt_ff = 1.0 / std::sqrt(static_cast<double>(ff));

    fill_normal(pl.token_embedding, config.vocab_size * d, 1.0);
    fill_normal(pl.position_embedding, config.max_seq_len * d, 1.0);
    for (const LayerOffsets& o : pl.layers) {
        fill_const(o.ln1_gain, d, 1.0);
        fill_const(o.ln1_bias, d, 0.0);
        fill_normal(o.w_query, d * d, inv_sqrt_d);
        fill_normal(o.w_key, d * d, inv_sqrt_d);
        fill_normal(o.w_value, d * d, inv_sqrt_d);
        fill_normal(o.w_out, d * d, inv_sqrt_d * residual_scale);
        fill_const(o.ln2_gain, d, 1.0);
        fill_const(o.ln2_bias, d, 0.0);
        fill_normal(o.ff_in, d * ff, inv_sqrt_d);
        fill_const(o.ff_in_bias, ff, 0.0);
        fill_normal(o.ff_out, ff * d, inv_sqrt_ff * residual_scale);
        fill_const(o.ff_out_bias, d, 0.0);
    }
    fill_const(pl.final_gain, d, 1.0);
    fill_const(pl.final_bias, d, 0.0);
    fill_normal(pl.output_head, d * config.vocab_size, inv_sqrt_d);
    return params;
}

Optimizer::Optimizer(const TrainConfig& config, std::size_t param_count) : config_(config) {
    config_.validate();
    if (config_.optimizer == OptimizerKind::Adam) {
        first_moment_.assign(param_count, 0.0);
        second_moment_.assign(param_count, 0.0);
    }
}

void Optimizer::step(DecoderParams& params, DecoderParams& grads) {
    std::span<double> g = grads.values();
    if (config_.gradient_clip_norm) {
        double sq = 0.0;
        for (double v : g) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > *config_.gradient_clip_norm) {
            const double scale = *config_.gradient_clip_norm / norm;
            for (double& v : g) v *= scale;
        }
    }
    std::span<double> p = params.values();
    const double lr = config_.learning_rate;
    if (config_.optimizer == OptimizerKind::SGD) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        return;
    }
    ++steps_;
    const double b1 = config_.adam_beta1;
    const double b2 = config_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < p.size(); ++i) {
        first_moment_[i] = b1 * first_moment_[i] + (1.0 - b1) * g[i];
        second_moment_[i] = b2 * second_moment_[i] + (1.0 - b2) * g[i] * g[i];
        const double m_hat = first_moment_[i] / c1;
        const double v_hat = second_moment_[i] / c2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.adam_epsilon);
    }
}

TokenId label_token(const DecoderConfig& config, Answer label) {
    return label == Answer::Yes ? config.yes_token_id : config.no_token_id;
}

namespace {

Answer predict(const DecoderParams& params, const Prompt& p) {
    return answer(forward(params, p.tokens, p.layout, InterventionSpec::none()), params.config());
}

}  // namespace

std::pair<DecoderParams, TrainReport> train(DecoderParams params, const Dataset& dataset,
                                            const TrainConfig& config) {
    config.validate();
    if (dataset.prompts.empty()) throw ConfigError("training dataset is empty");
    const DecoderConfig& dc = params.config();

    TrainReport report;
    Optimizer optimizer(config, params.size());
    DecoderParams grads(dc);
    Rng rng(config.seed);

    std::vector<std::size_t> order(dataset.prompts.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::span<const TokenId>> sequences;
    std::vector<TokenId> targets;

    for (std::size_t epoch = 0; epoch < config.epoch_count; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            grads.set_zero();
            sequences.clear();
            targets.clear();
            for (std::size_t i = start; i < end; ++i) {
                const Prompt& p = dataset.prompts[order[i]];
                sequences.emplace_back(p.tokens);
                targets.push_back(label_token(dc, p.label));
            }
            double loss = 0.0;
            try {
                loss = batch_loss_and_gradient(params, sequences, targets, grads);
            } catch (const NumericalError&) {
                loss = NAN;
            }
            if (!std::isfinite(loss)) {
                throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch));
            }
            epoch_loss += loss;
            const double inv = 1.0 / static_cast<double>(end - start);
            for (double& g : grads.values()) g *= inv;
            optimizer.step(params, grads);
        }
        epoch_loss /= static_cast<double>(order.size());
        if (!std::isfinite(epoch_loss) || !params.all_finite()) {
            throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch));
        }
        report.epoch_loss.push_back(epoch_loss);
    }

    std::size_t correct = 0;
    std::vector<Answer> predictions;
    predictions.reserve(dataset.prompts.size());
    for (const Prompt& p : dataset.prompts) {
        predictions.push_back(predict(params, p));
        if (predictions.back() == p.label) ++correct;
    }
    report.final_train_accuracy =
        static_cast<double>(correct) / static_cast<double>(dataset.prompts.size());

    // Balanced probe: the first k yes and first k no prompts, k = min count.
    const auto n_yes = static_cast<std::size_t>(
        std::count_if(dataset.prompts.begin(), dataset.prompts.end(),
                      [](const Prompt& p) { return p.label == Answer::Yes; }));
    const std::size_t k = std::min(n_yes, dataset.prompts.size() - n_yes);
    std::size_t taken_yes = 0;
    std::size_t taken_no = 0;
    std::size_t said_yes = 0;
    for (std::size_t i = 0; i < dataset.prompts.size(); ++i) {
        std::size_t& taken = dataset.prompts[i].label == Answer::Yes ? taken_yes : taken_no;
        if (taken >= k) continue;
        ++taken;
        if (predictions[i] == Answer::Yes) ++said_yes;
    }
    report.probe_yes_rate = k == 0 ? 0.0 : static_cast<double>(said_yes) / static_cast<double>(2 * k);
    report.param_checksum = params.checksum();
    return {std::move(params), report};
}

GradCheckResult grad_check(const DecoderParams& params, std::span<const TokenId> tokens,
                           TokenId target, double epsilon, std::size_t count, std::uint64_t seed) {
    if (!(epsilon >= 1e-5 && epsilon <= 1e-3)) {
        throw ConfigError("grad_check epsilon must lie in [1e-5, 1e-3]");
    }
    DecoderParams grads(params.config());
    answer_loss_and_gradient(params, tokens, target, grads);
    if (!grads.all_finite()) throw NumericalError("non-finite analytic gradient");

    std::vector<std::size_t> indices(params.size());
    std::iota(indices.begin(), indices.end(), 0);
    Rng rng(seed);
    rng.shuffle(indices);
    indices.resize(std::min(count, indices.size()));

    DecoderParams probe = params;
    GradCheckResult result;
    for (std::size_t idx : indices) {
        const double original = probe.values()[idx];
        probe.values()[idx] = original + epsilon;
        const double plus = answer_loss(probe, tokens, target);
        probe.values()[idx] = original - epsilon;
        const double minus = answer_loss(probe, tokens, target);
        probe.values()[idx] = original;

        const double numeric = (plus - minus) / (2.0 * epsilon);
        const double analytic = grads.values()[idx];
        if (!std::isfinite(numeric)) throw NumericalError("non-finite numeric gradient");
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        result.max_relative_error =
            std::max(result.max_relative_error, std::abs(analytic - numeric) / denom);
        ++result.checked;
    }
    return result;
}

}  // namespace attnlab
