#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "attnlab/attention_tensor.hpp"
#include "attnlab/modality.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// Scoping
// ---------------------------------------------------------------------------

enum class LayerSelector { Global, Quarter, LayerRange };

// Which (layer, head) pairs an intervention touches. Quarter q covers the
// zero-based layers [(q-1)L/4, qL/4). LayerRange is [lo, hi). An empty head
// list means every head.
struct LayerScope {
    LayerSelector selector = LayerSelector::Global;
    int quarter = 0;
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::vector<std::size_t> heads;

    static LayerScope global() { return {}; }
    static LayerScope of_quarter(int q);
    static LayerScope of_layers(std::size_t lo, std::size_t hi);
    LayerScope with_heads(std::vector<std::size_t> head_list) const;

    bool operator==(const LayerScope&) const = default;
};

// Resolved scope: a dense (layer, head) membership table.
class ScopeSet {
public:
    ScopeSet(std::size_t layer_count, std::size_t head_count);

    bool contains(std::size_t layer, std::size_t head) const {
        return member_[layer * heads_ + head] != 0;
    }
    bool layer_touched(std::size_t layer) const;
    std::size_t layer_count() const { return layers_; }
    std::size_t head_count() const { return heads_; }
    bool empty() const;

    // Sorted (layer, head) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> pairs() const;

private:
    friend ScopeSet resolve_scope(const LayerScope&, std::size_t, std::size_t);
    std::size_t layers_;
    std::size_t heads_;
    std::vector<char> member_;
};

// Throws InvalidScope for a quarter of a layer count not divisible by 4, a
// quarter outside 1..4, a bad layer range, or a head index >= head_count.
ScopeSet resolve_scope(const LayerScope& scope, std::size_t layer_count, std::size_t head_count);

// ---------------------------------------------------------------------------
// Intervention specs
// ---------------------------------------------------------------------------

enum class InterventionKind {
    None,
    ProportionalRedistribution,
    PairwiseTransfer,
    Ablation,
    Scale,
    AdHH,
    PAI,
};

std::string_view to_string(InterventionKind kind);
InterventionKind parse_intervention_kind(std::string_view name);

struct InterventionSpec {
    InterventionKind kind = InterventionKind::None;
    // Modality whose attention is removed (redistribution, transfer, ablation).
    Modality source = Modality::System;
    // Single recipient of a PairwiseTransfer.
    Modality recipient = Modality::Text;
    // Modality multiplied by scale_factor under Scale.
    Modality target = Modality::Image;
    // Share of the source mass moved. 0 is accepted and is the identity.
    double fraction = 1.0;
    double scale_factor = 1.0;
    double adhh_threshold = 0.40;
    double pai_alpha = 0.5;
    double pai_image_scale = 1.5;
    // Carried for config parity with the reference PAI settings; unused.
    double pai_gamma = 1.1;
    LayerScope scope;

    static InterventionSpec none() { return {}; }
    static InterventionSpec proportional(Modality source, double fraction, LayerScope scope);
    static InterventionSpec pairwise(Modality source, Modality recipient, double fraction,
                                     LayerScope scope);
    static InterventionSpec ablation(Modality source, LayerScope scope);
    static InterventionSpec scale(Modality target, double k, LayerScope scope);
    static InterventionSpec adhh(double threshold, LayerScope scope);
    static InterventionSpec pai(double alpha, double image_scale, LayerScope scope);

    // Throws InvalidSpec on a violated field invariant.
    void validate() const;

    bool operator==(const InterventionSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Row rewrites
// ---------------------------------------------------------------------------

// Mass below this counts as zero for source/recipient checks.
inline constexpr double kZeroMass = 1e-12;

enum class RowOutcome { Unchanged, Modified, SkippedZeroRecipient, SkippedZeroSource };

struct RowRewriteStats {
    std::size_t rows_modified = 0;
    std::size_t rows_skipped_zero_recipient = 0;
    std::size_t rows_skipped_zero_source = 0;

    void record(RowOutcome outcome);
    RowRewriteStats& operator+=(const RowRewriteStats& other);
    bool operator==(const RowRewriteStats&) const = default;
};

// In-place forms used inside the decoder forward pass. Rows span the full
// prompt (keys hidden by the causal mask hold 0).
RowOutcome redistribute_proportional_inplace(std::span<double> row, const ModalityLayout& layout,
                                             Modality source, double fraction);
RowOutcome redistribute_pairwise_inplace(std::span<double> row, const ModalityLayout& layout,
                                         Modality source, Modality recipient, double fraction);
RowOutcome ablate_inplace(std::span<double> row, const ModalityLayout& layout, Modality source);
RowOutcome scale_inplace(std::span<double> row, const ModalityLayout& layout, Modality target,
                         double k);
RowOutcome adhh_inplace(std::span<double> row, const ModalityLayout& layout, double threshold);

// Dispatches on spec.kind. None and PAI leave post-softmax rows untouched.
RowOutcome rewrite_row(std::span<double> row, const ModalityLayout& layout,
                       const InterventionSpec& spec);

// Value-returning forms.
std::vector<double> redistribute_row_proportional(std::span<const double> row,
                                                  const ModalityLayout& layout, Modality source,
                                                  double fraction);
std::vector<double> redistribute_row_pairwise(std::span<const double> row,
                                              const ModalityLayout& layout, Modality source,
                                              Modality recipient, double fraction);
std::vector<double> ablate_row(std::span<const double> row, const ModalityLayout& layout,
                               Modality source);
std::vector<double> scale_row(std::span<const double> row, const ModalityLayout& layout,
                              Modality target, double k);
std::vector<double> adhh_row(std::span<const double> row, const ModalityLayout& layout,
                             double threshold);

// (1 + alpha) * multimodal - alpha * unimodal, elementwise.
// Throws ShapeError on a length mismatch.
std::vector<double> pai_logit_fusion(std::span<const double> logits_multimodal,
                                     std::span<const double> logits_unimodal, double alpha);

// Rewrites every in-scope row of a captured tensor (the offline analysis
// path). Out-of-scope rows are copied bit for bit. PAI is rejected here
// because it acts on pre-softmax scores.
std::pair<AttentionTensor, RowRewriteStats> apply_spec(const AttentionTensor& attn,
                                                       const ModalityLayout& layout,
                                                       const InterventionSpec& spec);

}  // namespace attnlab
