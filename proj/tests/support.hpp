#pragma once

#include <cmath>
#include <vector>

#include "attnlab/attention_tensor.hpp"
#include "attnlab/modality.hpp"
#include "attnlab/rng.hpp"

namespace testing {

// Random layout with spans of 1..max_len tokens each.
inline attnlab::ModalityLayout random_layout(attnlab::Rng& rng, std::size_t max_len = 6) {
    return attnlab::build_layout(1 + rng.below(max_len), 1 + rng.below(max_len),
                                 1 + rng.below(max_len));
}

// Probability row over the first `visible` keys, zero beyond. Some weights
// are pushed toward zero so rows are not all near-uniform.
inline std::vector<double> random_row(attnlab::Rng& rng, std::size_t len, std::size_t visible) {
    std::vector<double> row(len, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < visible; ++i) {
        const double u = rng.uniform();
        row[i] = u * u * u + 1e-6;
        sum += row[i];
    }
    for (std::size_t i = 0; i < visible; ++i) row[i] /= sum;
    return row;
}

// Row of a full-prompt query (every key visible).
inline std::vector<double> random_full_row(attnlab::Rng& rng, const attnlab::ModalityLayout& layout) {
    return random_row(rng, layout.prompt_len(), layout.prompt_len());
}

inline double sum(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Causal tensor with random rows.
inline attnlab::AttentionTensor random_tensor(attnlab::Rng& rng, std::size_t layers,
                                              std::size_t heads, std::size_t len) {
    attnlab::AttentionTensor t(layers, heads, len, len);
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t q = 0; q < len; ++q) {
                const std::vector<double> row = random_row(rng, len, q + 1);
                auto dst = t.row(l, h, q);
                for (std::size_t k = 0; k < len; ++k) dst[k] = static_cast<float>(row[k]);
            }
        }
    }
    return t;
}

}  // namespace testing
