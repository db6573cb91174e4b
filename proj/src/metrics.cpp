#include "attnlab/metrics.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "attnlab/errors.hpp"

namespace attnlab {

namespace {

void require_nonempty(std::span<const ResponseRecord> records) {
    if (records.empty()) throw EmptyInput("no response records");
}

template <class Pred>
double share(std::span<const ResponseRecord> records, Pred pred) {
    require_nonempty(records);
    const auto hits = std::count_if(records.begin(), records.end(), pred);
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace

double simple_accuracy(std::span<const ResponseRecord> records) {
    return share(records, [](const ResponseRecord& r) { return r.correct(); });
}

double yes_rate(std::span<const ResponseRecord> records) {
    return share(records, [](const ResponseRecord& r) { return r.model_answer == Answer::Yes; });
}

double ground_truth_yes_fraction(std::span<const ResponseRecord> records) {
    return share(records, [](const ResponseRecord& r) { return r.ground_truth == Answer::Yes; });
}

double paired_accuracy(std::span<const ResponseRecord> records) {
    require_nonempty(records);
    std::map<std::uint32_t, std::pair<int, bool>> pairs;  // count, all correct
    for (const ResponseRecord& r : records) {
        if (!r.pair_id) {
            throw PairingError("prompt " + std::to_string(r.prompt_id) + " is not grouped in a pair");
        }
        auto [it, inserted] = pairs.try_emplace(*r.pair_id, 0, true);
        it->second.first += 1;
        it->second.second = it->second.second && r.correct();
    }
    std::size_t both = 0;
    for (const auto& [id, entry] : pairs) {
        if (entry.first != 2) {
            throw PairingError("pair " + std::to_string(id) + " has " +
                               std::to_string(entry.first) + " records, expected 2");
        }
        if (entry.second) ++both;
    }
    return static_cast<double>(both) / static_cast<double>(pairs.size());
}

std::pair<double, double> yes_rate_deltas(double yes_rate, double gt) {
    if (!(gt > 0.0 && gt < 1.0)) {
        throw DegenerateGroundTruth("ground-truth yes fraction must lie strictly inside (0, 1)");
    }
    return {100.0 * (yes_rate - gt), 100.0 * (yes_rate / gt - 1.0)};
}

MetricBlock compute_metrics(std::span<const ResponseRecord> records) {
    MetricBlock m;
    m.simple_accuracy = simple_accuracy(records);
    m.yes_rate = yes_rate(records);
    m.ground_truth_yes_fraction = ground_truth_yes_fraction(records);
    m.n_prompts = records.size();
    const bool paired = std::all_of(records.begin(), records.end(),
                                    [](const ResponseRecord& r) { return r.pair_id.has_value(); });
    if (paired) {
        m.paired_accuracy = paired_accuracy(records);
        m.n_pairs = records.size() / 2;
    }
    if (m.ground_truth_yes_fraction > 0.0 && m.ground_truth_yes_fraction < 1.0) {
        std::tie(m.yes_rate_delta_pp, m.yes_rate_delta_rel) =
            yes_rate_deltas(m.yes_rate, m.ground_truth_yes_fraction);
    }
    return m;
}

}  // namespace attnlab
