#include "attnlab/modality.hpp"

#include <string>

#include "attnlab/attention_tensor.hpp"
#include "attnlab/errors.hpp"
#include "attnlab/intervention.hpp"

namespace attnlab {

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::System: return "system";
        case Modality::Image: return "image";
        case Modality::Text: return "text";
    }
    return "?";
}

Modality parse_modality(std::string_view name) {
    if (name == "system") return Modality::System;
    if (name == "image") return Modality::Image;
    if (name == "text") return Modality::Text;
    throw InvalidSpec("unknown modality '" + std::string(name) + "'");
}

ModalityLayout build_layout(std::size_t system_len, std::size_t image_len, std::size_t text_len) {
    if (system_len == 0 || image_len == 0 || text_len == 0) {
        throw InvalidLayout("every modality span needs at least one token (got " +
                            std::to_string(system_len) + ", " + std::to_string(image_len) + ", " +
                            std::to_string(text_len) + ")");
    }
    ModalityLayout layout;
    layout.spans_[0] = {0, system_len};
    layout.spans_[1] = {system_len, system_len + image_len};
    layout.spans_[2] = {system_len + image_len, system_len + image_len + text_len};
    return layout;
}

Modality modality_of(const ModalityLayout& layout, std::size_t token_index) {
    if (token_index >= layout.prompt_len()) {
        throw IndexOutOfRange("token index " + std::to_string(token_index) +
                              " outside prompt of length " +
                              std::to_string(layout.prompt_len()));
    }
    if (token_index < layout.span(Modality::Image).begin) return Modality::System;
    if (token_index < layout.span(Modality::Text).begin) return Modality::Image;
    return Modality::Text;
}

namespace {

template <class T>
ModalityMass row_mass_impl(std::span<const T> row, const ModalityLayout& layout) {
    ModalityMass mass;
    for (Modality m : all_modalities) {
        const Span s = layout.span(m);
        double sum = 0.0;
        for (std::size_t i = s.begin; i < s.end; ++i) {
            sum += static_cast<double>(row[i]);
        }
        mass[m] = sum;
    }
    return mass;
}

}  // namespace

ModalityMass row_mass(std::span<const double> row, const ModalityLayout& layout) {
    return row_mass_impl(row, layout);
}

ModalityMass row_mass(std::span<const float> row, const ModalityLayout& layout) {
    return row_mass_impl(row, layout);
}

ModalityMass modality_mass(const AttentionTensor& attn, const ModalityLayout& layout,
                           const LayerScope& scope) {
    if (attn.key_count() != layout.prompt_len()) {
        throw ShapeError("attention covers " + std::to_string(attn.key_count()) +
                         " keys but the layout has " + std::to_string(layout.prompt_len()));
    }
    const ScopeSet set = resolve_scope(scope, attn.layer_count(), attn.head_count());
    ModalityMass total;
    std::size_t rows = 0;
    for (const auto& [layer, head] : set.pairs()) {
        for (std::size_t q = 0; q < attn.query_count(); ++q) {
            const ModalityMass m = row_mass(attn.row(layer, head, q), layout);
            for (std::size_t k = 0; k < 3; ++k) {
                total.alpha[k] += m.alpha[k];
            }
            ++rows;
        }
    }
    if (rows == 0) {
        throw EmptyScope("scope selects no attention rows");
    }
    for (double& a : total.alpha) {
        a /= static_cast<double>(rows);
    }
    return total;
}

}  // namespace attnlab
