#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace attnlab {

// Post-softmax attention weights indexed [layer][head][query][key], stored
// row-major as 32-bit floats (the analysis and dump precision).
class AttentionTensor {
public:
    AttentionTensor() = default;
    AttentionTensor(std::size_t layers, std::size_t heads, std::size_t queries, std::size_t keys);

    std::size_t layer_count() const { return layers_; }
    std::size_t head_count() const { return heads_; }
    std::size_t query_count() const { return queries_; }
    std::size_t key_count() const { return keys_; }
    std::size_t row_count() const { return layers_ * heads_ * queries_; }

    std::span<float> row(std::size_t layer, std::size_t head, std::size_t query);
    std::span<const float> row(std::size_t layer, std::size_t head, std::size_t query) const;

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    // True when all weights are >= 0, keys above the query are exactly 0,
    // and every row sums to 1 within tolerance.
    bool is_valid(double tolerance = 1e-6) const;

    bool operator==(const AttentionTensor&) const = default;

private:
    std::size_t offset(std::size_t layer, std::size_t head, std::size_t query) const;

    std::size_t layers_ = 0;
    std::size_t heads_ = 0;
    std::size_t queries_ = 0;
    std::size_t keys_ = 0;
    std::vector<float> data_;
};

}  // namespace attnlab
