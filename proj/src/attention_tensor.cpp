#include "attnlab/attention_tensor.hpp"

#include <cmath>

namespace attnlab {

AttentionTensor::AttentionTensor(std::size_t layers, std::size_t heads, std::size_t queries,
                                 std::size_t keys)
    : layers_(layers),
      heads_(heads),
      queries_(queries),
      keys_(keys),
      data_(layers * heads * queries * keys, 0.0f) {}

std::size_t AttentionTensor::offset(std::size_t layer, std::size_t head, std::size_t query) const {
    return ((layer * heads_ + head) * queries_ + query) * keys_;
}

std::span<float> AttentionTensor::row(std::size_t layer, std::size_t head, std::size_t query) {
    return {data_.data() + offset(layer, head, query), keys_};
}

std::span<const float> AttentionTensor::row(std::size_t layer, std::size_t head,
                                            std::size_t query) const {
    return {data_.data() + offset(layer, head, query), keys_};
}

bool AttentionTensor::is_valid(double tolerance) const {
    for (std::size_t l = 0; l < layers_; ++l) {
        for (std::size_t h = 0; h < heads_; ++h) {
            for (std::size_t q = 0; q < queries_; ++q) {
                const auto r = row(l, h, q);
                double sum = 0.0;
                for (std::size_t k = 0; k < keys_; ++k) {
                    if (!(r[k] >= 0.0f)) return false;
                    if (k > q && r[k] != 0.0f) return false;
                    sum += r[k];
                }
                if (std::abs(sum - 1.0) > tolerance) return false;
            }
        }
    }
    return true;
}

}  // namespace attnlab
