#include "attnlab/intervention.hpp"

#include <algorithm>
#include <string>

#include "attnlab/errors.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// Scope
// ---------------------------------------------------------------------------

LayerScope LayerScope::of_quarter(int q) {
    LayerScope s;
    s.selector = LayerSelector::Quarter;
    s.quarter = q;
    return s;
}

LayerScope LayerScope::of_layers(std::size_t lo, std::size_t hi) {
    LayerScope s;
    s.selector = LayerSelector::LayerRange;
    s.lo = lo;
    s.hi = hi;
    return s;
}

LayerScope LayerScope::with_heads(std::vector<std::size_t> head_list) const {
    LayerScope s = *this;
    s.heads = std::move(head_list);
    return s;
}

ScopeSet::ScopeSet(std::size_t layer_count, std::size_t head_count)
    : layers_(layer_count), heads_(head_count), member_(layer_count * head_count, 0) {}

bool ScopeSet::layer_touched(std::size_t layer) const {
    for (std::size_t h = 0; h < heads_; ++h) {
        if (contains(layer, h)) return true;
    }
    return false;
}

bool ScopeSet::empty() const {
    return std::none_of(member_.begin(), member_.end(), [](char c) { return c != 0; });
}

std::vector<std::pair<std::size_t, std::size_t>> ScopeSet::pairs() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t l = 0; l < layers_; ++l) {
        for (std::size_t h = 0; h < heads_; ++h) {
            if (contains(l, h)) out.emplace_back(l, h);
        }
    }
    return out;
}

ScopeSet resolve_scope(const LayerScope& scope, std::size_t layer_count, std::size_t head_count) {
    std::size_t lo = 0;
    std::size_t hi = layer_count;
    switch (scope.selector) {
        case LayerSelector::Global:
            break;
        case LayerSelector::Quarter:
            if (scope.quarter < 1 || scope.quarter > 4) {
                throw InvalidScope("quarter must be in 1..4, got " + std::to_string(scope.quarter));
            }
            if (layer_count % 4 != 0) {
                throw InvalidScope("layer count " + std::to_string(layer_count) +
                                   " is not divisible into quarters");
            }
            lo = static_cast<std::size_t>(scope.quarter - 1) * layer_count / 4;
            hi = static_cast<std::size_t>(scope.quarter) * layer_count / 4;
            break;
        case LayerSelector::LayerRange:
            if (!(scope.lo < scope.hi && scope.hi <= layer_count)) {
                throw InvalidScope("layer range [" + std::to_string(scope.lo) + ", " +
                                   std::to_string(scope.hi) + ") invalid for " +
                                   std::to_string(layer_count) + " layers");
            }
            lo = scope.lo;
            hi = scope.hi;
            break;
    }
    for (std::size_t h : scope.heads) {
        if (h >= head_count) {
            throw InvalidScope("head index " + std::to_string(h) + " >= head count " +
                               std::to_string(head_count));
        }
    }

    ScopeSet set(layer_count, head_count);
    for (std::size_t l = lo; l < hi; ++l) {
        if (scope.heads.empty()) {
            for (std::size_t h = 0; h < head_count; ++h) set.member_[l * head_count + h] = 1;
        } else {
            for (std::size_t h : scope.heads) set.member_[l * head_count + h] = 1;
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

std::string_view to_string(InterventionKind kind) {
    switch (kind) {
        case InterventionKind::None: return "none";
        case InterventionKind::ProportionalRedistribution: return "proportional";
        case InterventionKind::PairwiseTransfer: return "pairwise";
        case InterventionKind::Ablation: return "ablation";
        case InterventionKind::Scale: return "scale";
        case InterventionKind::AdHH: return "adhh";
        case InterventionKind::PAI: return "pai";
    }
    return "?";
}

InterventionKind parse_intervention_kind(std::string_view name) {
    for (auto k : {InterventionKind::None, InterventionKind::ProportionalRedistribution,
                   InterventionKind::PairwiseTransfer, InterventionKind::Ablation,
                   InterventionKind::Scale, InterventionKind::AdHH, InterventionKind::PAI}) {
        if (to_string(k) == name) return k;
    }
    throw InvalidSpec("unknown intervention kind '" + std::string(name) + "'");
}

InterventionSpec InterventionSpec::proportional(Modality source, double fraction,
                                                LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::ProportionalRedistribution;
    s.source = source;
    s.fraction = fraction;
    s.scope = std::move(scope);
    return s;
}

InterventionSpec InterventionSpec::pairwise(Modality source, Modality recipient, double fraction,
                                            LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::PairwiseTransfer;
    s.source = source;
    s.recipient = recipient;
    s.fraction = fraction;
    s.scope = std::move(scope);
    return s;
}

InterventionSpec InterventionSpec::ablation(Modality source, LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::Ablation;
    s.source = source;
    s.scope = std::move(scope);
    return s;
}

InterventionSpec InterventionSpec::scale(Modality target, double k, LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::Scale;
    s.target = target;
    s.scale_factor = k;
    s.scope = std::move(scope);
    return s;
}

InterventionSpec InterventionSpec::adhh(double threshold, LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::AdHH;
    s.adhh_threshold = threshold;
    s.scope = std::move(scope);
    return s;
}

InterventionSpec InterventionSpec::pai(double alpha, double image_scale, LayerScope scope) {
    InterventionSpec s;
    s.kind = InterventionKind::PAI;
    s.pai_alpha = alpha;
    s.pai_image_scale = image_scale;
    s.scope = std::move(scope);
    return s;
}

void InterventionSpec::validate() const {
    switch (kind) {
        case InterventionKind::None:
        case InterventionKind::Ablation:
            break;
        case InterventionKind::PairwiseTransfer:
            if (recipient == source) {
                throw InvalidSpec("pairwise transfer needs recipient != source");
            }
            [[fallthrough]];
        case InterventionKind::ProportionalRedistribution:
            if (!(fraction >= 0.0 && fraction <= 1.0)) {
                throw InvalidSpec("fraction must lie in [0, 1], got " + std::to_string(fraction));
            }
            break;
        case InterventionKind::Scale:
            if (!(scale_factor > 0.0)) {
                throw InvalidSpec("scale factor must be positive");
            }
            break;
        case InterventionKind::AdHH:
            if (!(adhh_threshold > 0.0 && adhh_threshold < 1.0)) {
                throw InvalidSpec("AD-HH threshold must lie in (0, 1)");
            }
            break;
        case InterventionKind::PAI:
            if (!(pai_alpha >= 0.0)) throw InvalidSpec("PAI alpha must be >= 0");
            if (!(pai_image_scale > 0.0)) throw InvalidSpec("PAI image scale must be positive");
            break;
    }
    if (scope.selector == LayerSelector::Quarter && (scope.quarter < 1 || scope.quarter > 4)) {
        throw InvalidSpec("quarter must be in 1..4");
    }
}

// ---------------------------------------------------------------------------
// Row rewrites
// ---------------------------------------------------------------------------

void RowRewriteStats::record(RowOutcome outcome) {
    switch (outcome) {
        case RowOutcome::Modified: ++rows_modified; break;
        case RowOutcome::SkippedZeroRecipient: ++rows_skipped_zero_recipient; break;
        case RowOutcome::SkippedZeroSource: ++rows_skipped_zero_source; break;
        case RowOutcome::Unchanged: break;
    }
}

RowRewriteStats& RowRewriteStats::operator+=(const RowRewriteStats& other) {
    rows_modified += other.rows_modified;
    rows_skipped_zero_recipient += other.rows_skipped_zero_recipient;
    rows_skipped_zero_source += other.rows_skipped_zero_source;
    return *this;
}

namespace {

void check_row(std::span<const double> row, const ModalityLayout& layout) {
    if (row.size() != layout.prompt_len()) {
        throw ShapeError("row has " + std::to_string(row.size()) + " keys, layout expects " +
                         std::to_string(layout.prompt_len()));
    }
}

double span_sum(std::span<const double> row, Span s) {
    double sum = 0.0;
    for (std::size_t i = s.begin; i < s.end; ++i) sum += row[i];
    return sum;
}

void scale_span(std::span<double> row, Span s, double factor) {
    for (std::size_t i = s.begin; i < s.end; ++i) row[i] *= factor;
}

void zero_span(std::span<double> row, Span s) {
    for (std::size_t i = s.begin; i < s.end; ++i) row[i] = 0.0;
}

// Source tokens keep (1 - fraction) of their weight; fraction 1 zeroes them.
void drain_source(std::span<double> row, Span s, double fraction) {
    if (fraction == 1.0) {
        zero_span(row, s);
    } else {
        scale_span(row, s, 1.0 - fraction);
    }
}

}  // namespace

RowOutcome redistribute_proportional_inplace(std::span<double> row, const ModalityLayout& layout,
                                             Modality source, double fraction) {
    check_row(row, layout);
    if (fraction == 0.0) return RowOutcome::Unchanged;

    double source_mass = 0.0;
    double recipient_mass = 0.0;
    for (Modality m : all_modalities) {
        const double mass = span_sum(row, layout.span(m));
        (m == source ? source_mass : recipient_mass) += mass;
    }
    if (recipient_mass < kZeroMass) return RowOutcome::SkippedZeroRecipient;
    if (source_mass < kZeroMass) return RowOutcome::SkippedZeroSource;

    // Each recipient modality r gains fraction * alpha_s * alpha_r / alpha_R,
    // spread over its tokens in proportion to their weight.
    const double gain = 1.0 + fraction * source_mass / recipient_mass;
    for (Modality m : all_modalities) {
        if (m != source) scale_span(row, layout.span(m), gain);
    }
    drain_source(row, layout.span(source), fraction);
    return RowOutcome::Modified;
}

RowOutcome redistribute_pairwise_inplace(std::span<double> row, const ModalityLayout& layout,
                                         Modality source, Modality recipient, double fraction) {
    check_row(row, layout);
    if (recipient == source) {
        throw InvalidSpec("pairwise transfer needs recipient != source");
    }
    if (fraction == 0.0) return RowOutcome::Unchanged;

    const double source_mass = span_sum(row, layout.span(source));
    const double recipient_mass = span_sum(row, layout.span(recipient));
    if (recipient_mass < kZeroMass) return RowOutcome::SkippedZeroRecipient;
    if (source_mass < kZeroMass) return RowOutcome::SkippedZeroSource;

    scale_span(row, layout.span(recipient), 1.0 + fraction * source_mass / recipient_mass);
    drain_source(row, layout.span(source), fraction);
    return RowOutcome::Modified;
}

RowOutcome ablate_inplace(std::span<double> row, const ModalityLayout& layout, Modality source) {
    check_row(row, layout);
    if (span_sum(row, layout.span(source)) < kZeroMass) return RowOutcome::SkippedZeroSource;
    zero_span(row, layout.span(source));
    return RowOutcome::Modified;
}

RowOutcome scale_inplace(std::span<double> row, const ModalityLayout& layout, Modality target,
                         double k) {
    check_row(row, layout);
    if (span_sum(row, layout.span(target)) < kZeroMass) return RowOutcome::SkippedZeroSource;
    scale_span(row, layout.span(target), k);
    return RowOutcome::Modified;
}

RowOutcome adhh_inplace(std::span<double> row, const ModalityLayout& layout, double threshold) {
    check_row(row, layout);
    const Span text = layout.span(Modality::Text);
    if (span_sum(row, text) > threshold) {
        zero_span(row, text);
        return RowOutcome::Modified;
    }
    return RowOutcome::Unchanged;
}

RowOutcome rewrite_row(std::span<double> row, const ModalityLayout& layout,
                       const InterventionSpec& spec) {
    switch (spec.kind) {
        case InterventionKind::None:
        case InterventionKind::PAI:
            return RowOutcome::Unchanged;
        case InterventionKind::ProportionalRedistribution:
            return redistribute_proportional_inplace(row, layout, spec.source, spec.fraction);
        case InterventionKind::PairwiseTransfer:
            return redistribute_pairwise_inplace(row, layout, spec.source, spec.recipient,
                                                 spec.fraction);
        case InterventionKind::Ablation:
            return ablate_inplace(row, layout, spec.source);
        case InterventionKind::Scale:
            return scale_inplace(row, layout, spec.target, spec.scale_factor);
        case InterventionKind::AdHH:
            return adhh_inplace(row, layout, spec.adhh_threshold);
    }
    return RowOutcome::Unchanged;
}

std::vector<double> redistribute_row_proportional(std::span<const double> row,
                                                  const ModalityLayout& layout, Modality source,
                                                  double fraction) {
    std::vector<double> out(row.begin(), row.end());
    redistribute_proportional_inplace(out, layout, source, fraction);
    return out;
}

std::vector<double> redistribute_row_pairwise(std::span<const double> row,
                                              const ModalityLayout& layout, Modality source,
                                              Modality recipient, double fraction) {
    std::vector<double> out(row.begin(), row.end());
    redistribute_pairwise_inplace(out, layout, source, recipient, fraction);
    return out;
}

std::vector<double> ablate_row(std::span<const double> row, const ModalityLayout& layout,
                               Modality source) {
    std::vector<double> out(row.begin(), row.end());
    ablate_inplace(out, layout, source);
    return out;
}

std::vector<double> scale_row(std::span<const double> row, const ModalityLayout& layout,
                              Modality target, double k) {
    std::vector<double> out(row.begin(), row.end());
    scale_inplace(out, layout, target, k);
    return out;
}

std::vector<double> adhh_row(std::span<const double> row, const ModalityLayout& layout,
                             double threshold) {
    std::vector<double> out(row.begin(), row.end());
    adhh_inplace(out, layout, threshold);
    return out;
}

std::vector<double> pai_logit_fusion(std::span<const double> logits_multimodal,
                                     std::span<const double> logits_unimodal, double alpha) {
    if (logits_multimodal.size() != logits_unimodal.size()) {
        throw ShapeError("PAI fusion needs logit vectors of equal length");
    }
    std::vector<double> out(logits_multimodal.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (1.0 + alpha) * logits_multimodal[i] - alpha * logits_unimodal[i];
    }
    return out;
}

std::pair<AttentionTensor, RowRewriteStats> apply_spec(const AttentionTensor& attn,
                                                       const ModalityLayout& layout,
                                                       const InterventionSpec& spec) {
    spec.validate();
    if (spec.kind == InterventionKind::PAI) {
        throw InvalidSpec("PAI rescales pre-softmax scores; run it through the decoder forward");
    }
    if (attn.key_count() != layout.prompt_len()) {
        throw ShapeError("attention tensor key count does not match layout");
    }
    AttentionTensor out = attn;
    RowRewriteStats stats;
    if (spec.kind == InterventionKind::None) return {std::move(out), stats};

    const ScopeSet set = resolve_scope(spec.scope, attn.layer_count(), attn.head_count());
    std::vector<double> buf(attn.key_count());
    for (const auto& [layer, head] : set.pairs()) {
        for (std::size_t q = 0; q < attn.query_count(); ++q) {
            auto row = out.row(layer, head, q);
            std::copy(row.begin(), row.end(), buf.begin());
            const RowOutcome outcome = rewrite_row(buf, layout, spec);
            stats.record(outcome);
            if (outcome == RowOutcome::Modified) {
                std::transform(buf.begin(), buf.end(), row.begin(),
                               [](double w) { return static_cast<float>(w); });
            }
        }
    }
    return {std::move(out), stats};
}

}  // namespace attnlab
