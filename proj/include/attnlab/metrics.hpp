#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>

#include "attnlab/decoder.hpp"

namespace attnlab {

struct ResponseRecord {
    std::optional<std::uint32_t> pair_id;
    std::uint32_t prompt_id = 0;
    Answer ground_truth = Answer::No;
    Answer model_answer = Answer::No;

    bool correct() const { return ground_truth == model_answer; }
};

struct MetricBlock {
    double simple_accuracy = 0.0;
    std::optional<double> paired_accuracy;
    double yes_rate = 0.0;
    double ground_truth_yes_fraction = 0.0;
    // 100 * (yes_rate - gt), percentage points.
    double yes_rate_delta_pp = 0.0;
    // 100 * (yes_rate / gt - 1), relative percent.
    double yes_rate_delta_rel = 0.0;
    std::size_t n_prompts = 0;
    std::size_t n_pairs = 0;
};

// Each throws EmptyInput on an empty record set.
double simple_accuracy(std::span<const ResponseRecord> records);
double yes_rate(std::span<const ResponseRecord> records);
double ground_truth_yes_fraction(std::span<const ResponseRecord> records);

// Share of pairs with both members correct. Throws PairingError unless every
// record carries a pair id and each id occurs exactly twice.
double paired_accuracy(std::span<const ResponseRecord> records);

// (delta_pp, delta_rel). Throws DegenerateGroundTruth for gt outside (0, 1).
std::pair<double, double> yes_rate_deltas(double yes_rate, double ground_truth_yes_fraction);

// Full block; paired accuracy is filled only when every record is paired.
MetricBlock compute_metrics(std::span<const ResponseRecord> records);

}  // namespace attnlab
