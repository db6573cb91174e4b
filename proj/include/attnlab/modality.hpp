#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>

namespace attnlab {

class AttentionTensor;
struct LayerScope;

// Template position order: everything before the image is System, the
// projected image tokens are Image, the user query is Text.
enum class Modality : int { System = 0, Image = 1, Text = 2 };

inline constexpr std::array<Modality, 3> all_modalities{Modality::System, Modality::Image,
                                                        Modality::Text};

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);

// Half-open token range [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const Span&) const = default;
};

// Contiguous system/image/text partition of a prompt. Construct through
// build_layout, which enforces non-empty spans.
class ModalityLayout {
public:
    ModalityLayout() = default;

    const Span& span(Modality m) const { return spans_[static_cast<std::size_t>(m)]; }
    std::size_t length(Modality m) const { return span(m).size(); }
    std::size_t prompt_len() const { return spans_[2].end; }

    bool operator==(const ModalityLayout&) const = default;

private:
    friend ModalityLayout build_layout(std::size_t, std::size_t, std::size_t);
    std::array<Span, 3> spans_{};
};

// Throws InvalidLayout when any length is zero.
ModalityLayout build_layout(std::size_t system_len, std::size_t image_len, std::size_t text_len);

// Throws IndexOutOfRange when token_index >= prompt_len.
Modality modality_of(const ModalityLayout& layout, std::size_t token_index);

// Attention fractions per modality (alpha_m), indexed by Modality.
struct ModalityMass {
    std::array<double, 3> alpha{};

    double operator[](Modality m) const { return alpha[static_cast<std::size_t>(m)]; }
    double& operator[](Modality m) { return alpha[static_cast<std::size_t>(m)]; }
    double total() const { return alpha[0] + alpha[1] + alpha[2]; }
};

// Per-modality sums of one attention row over its keys.
ModalityMass row_mass(std::span<const double> row, const ModalityLayout& layout);
ModalityMass row_mass(std::span<const float> row, const ModalityLayout& layout);

// Mean over all in-scope (layer, head, query) rows of each row's modality
// sums. Rows of queries inside the system or image span are included; the
// modalities their causal mask hides contribute zero.
// Throws EmptyScope when the scope selects no rows, ShapeError when the
// tensor's key count differs from the layout.
ModalityMass modality_mass(const AttentionTensor& attn, const ModalityLayout& layout,
                           const LayerScope& scope);

}  // namespace attnlab
