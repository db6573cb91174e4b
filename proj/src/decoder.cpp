#include "attnlab/decoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "attnlab/errors.hpp"

namespace attnlab {

void DecoderConfig::validate() const {
    // Quarter scopes additionally need a multiple of 4; resolve_scope checks that.
    if (layer_count == 0) throw ConfigError("layer_count must be positive");
    if (head_count == 0 || model_dim == 0 || model_dim % head_count != 0) {
        throw ConfigError("model_dim must be a positive multiple of head_count");
    }
    if (feedforward_dim == 0 || max_seq_len == 0) {
        throw ConfigError("feedforward_dim and max_seq_len must be positive");
    }
    if (yes_token_id == no_token_id || yes_token_id >= vocab_size || no_token_id >= vocab_size) {
        throw ConfigError("yes/no token ids must be distinct and below vocab_size");
    }
}

ParamLayout::ParamLayout(const DecoderConfig& c) {
    const std::size_t d = c.model_dim;
    const std::size_t f = c.feedforward_dim;
    std::size_t cursor = 0;
    auto take = [&cursor](std::size_t n) {
        const std::size_t at = cursor;
        cursor += n;
        return at;
    };
    token_embedding = take(c.vocab_size * d);
    position_embedding = take(c.max_seq_len * d);
    layers.resize(c.layer_count);
    for (auto& l : layers) {
        l.ln1_gain = take(d);
        l.ln1_bias = take(d);
        l.w_query = take(d * d);
        l.w_key = take(d * d);
        l.w_value = take(d * d);
        l.w_out = take(d * d);
        l.ln2_gain = take(d);
        l.ln2_bias = take(d);
        l.ff_in = take(d * f);
        l.ff_in_bias = take(f);
        l.ff_out = take(f * d);
        l.ff_out_bias = take(d);
    }
    final_gain = take(d);
    final_bias = take(d);
    output_head = take(d * c.vocab_size);
    total = cursor;
}

DecoderParams::DecoderParams(const DecoderConfig& config)
    : config_(config), layout_(config), values_(layout_.total, 0.0) {
    config_.validate();
}

void DecoderParams::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

bool DecoderParams::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void DecoderParams::round_to_float() {
    for (double& v : values_) v = static_cast<double>(static_cast<float>(v));
}

std::uint64_t DecoderParams::checksum() const {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (double v : values_) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int i = 0; i < 4; ++i) {
            hash ^= (bits >> (8 * i)) & 0xffu;
            hash *= 0x100000001b3ULL;
        }
    }
    return hash;
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

// c[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    MatrixView(c, mi, ni).noalias() = ConstMatrixView(a, mi, ki) * ConstMatrixView(b, ki, ni);
}

// dw[k x n] += a[m x k]^T * dc[m x n]
void add_at_b(const double* a, const double* dc, double* dw, std::size_t m, std::size_t k,
              std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    MatrixView(dw, ki, ni).noalias() +=
        ConstMatrixView(a, mi, ki).transpose() * ConstMatrixView(dc, mi, ni);
}

// da[m x k] += dc[m x n] * b[k x n]^T
void add_a_bt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
              std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    MatrixView(da, mi, ki).noalias() +=
        ConstMatrixView(dc, mi, ni) * ConstMatrixView(b, ki, ni).transpose();
}

void layer_norm(const double* x, const double* gain, const double* bias, double* out,
                double* mean_out, double* rstd_out, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        double* o = out + r * d;
        for (std::size_t i = 0; i < d; ++i) o[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        mean_out[r] = mean;
        rstd_out[r] = rstd;
    }
}

// Accumulates into dx, dgain, dbias.
void layer_norm_backward(const double* dout, const double* x, const double* mean,
                         const double* rstd, const double* gain, double* dx, double* dgain,
                         double* dbias, std::size_t rows, std::size_t d) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        const double* dr = dout + r * d;
        double m1 = 0.0;
        double m2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean[r]) * rstd[r];
            const double dxhat = dr[i] * gain[i];
            dgain[i] += dr[i] * xhat;
            dbias[i] += dr[i];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 *= inv_d;
        m2 *= inv_d;
        double* dxr = dx + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean[r]) * rstd[r];
            const double dxhat = dr[i] * gain[i];
            dxr[i] += rstd[r] * (dxhat - m1 - xhat * m2);
        }
    }
}

// Several sequences packed row-wise: sequence s occupies rows
// [starts[s], starts[s + 1]). Dense ops run on all rows at once; attention
// runs per sequence.
struct PackedBatch {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> starts{0};

    void add(std::span<const TokenId> seq) {
        tokens.insert(tokens.end(), seq.begin(), seq.end());
        starts.push_back(tokens.size());
    }
    std::size_t count() const { return starts.size() - 1; }
    std::size_t rows() const { return tokens.size(); }
    std::size_t length(std::size_t s) const { return starts[s + 1] - starts[s]; }
};

struct LayerActivations {
    std::vector<double> x_in, ln1_mean, ln1_rstd, h, q, k, v, mix;
    std::vector<double> x_mid, ln2_mean, ln2_rstd, h2, ff_pre, ff_tanh, ff_act;
    // Per sequence, [head][query][query] post-softmax (post-intervention).
    std::vector<std::vector<double>> probs;
};

struct Activations {
    std::vector<LayerActivations> layers;
    std::vector<double> x_final;       // residual after the last layer, all rows
    std::vector<double> final_mean;    // per sequence (last row)
    std::vector<double> final_rstd;
    std::vector<double> final_normed;  // [sequence][dim]
    std::vector<double> logits;        // [sequence][vocab]
};

// Intervention and capture plumbing for single-sequence forwards; all
// pointers optional.
struct ForwardHook {
    const ModalityLayout* layout = nullptr;
    const InterventionSpec* spec = nullptr;
    const ScopeSet* scope = nullptr;
    RowRewriteStats* stats = nullptr;
    AttentionTensor* capture = nullptr;
    std::vector<std::vector<double>>* hidden = nullptr;
};

void run_forward(const DecoderParams& params, const PackedBatch& batch, const ForwardHook& hook,
                 Activations& acts) {
    const DecoderConfig& c = params.config();
    const ParamLayout& pl = params.layout();
    const std::size_t rows = batch.rows();
    const std::size_t n_seq = batch.count();
    const std::size_t d = c.model_dim;
    const std::size_t ff = c.feedforward_dim;
    const std::size_t heads = c.head_count;
    const std::size_t hd = c.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::size_t max_len = 0;
    for (std::size_t s = 0; s < n_seq; ++s) {
        const std::size_t len = batch.length(s);
        if (len == 0 || len > c.max_seq_len) {
            throw ShapeError("sequence length " + std::to_string(len) + " outside 1.." +
                             std::to_string(c.max_seq_len));
        }
        max_len = std::max(max_len, len);
    }

    const bool rewrites = hook.spec != nullptr && hook.spec->kind != InterventionKind::None &&
                          hook.spec->kind != InterventionKind::PAI;
    const bool pai = hook.spec != nullptr && hook.spec->kind == InterventionKind::PAI;

    acts.layers.resize(c.layer_count);

    std::vector<double> x(rows * d);
    for (std::size_t s = 0; s < n_seq; ++s) {
        for (std::size_t r = batch.starts[s]; r < batch.starts[s + 1]; ++r) {
            const TokenId tok = batch.tokens[r];
            if (tok >= c.vocab_size) {
                throw ShapeError("token id " + std::to_string(tok) + " outside vocabulary");
            }
            const double* te = params.at(pl.token_embedding + tok * d);
            const double* pe = params.at(pl.position_embedding + (r - batch.starts[s]) * d);
            for (std::size_t i = 0; i < d; ++i) x[r * d + i] = te[i] + pe[i];
        }
    }

    std::vector<double> row(max_len);
    std::vector<double> tmp(rows * d);

    for (std::size_t l = 0; l < c.layer_count; ++l) {
        const LayerOffsets& o = pl.layers[l];
        LayerActivations& a = acts.layers[l];
        a.x_in = x;
        a.ln1_mean.resize(rows);
        a.ln1_rstd.resize(rows);
        a.h.resize(rows * d);
        layer_norm(x.data(), params.at(o.ln1_gain), params.at(o.ln1_bias), a.h.data(),
                   a.ln1_mean.data(), a.ln1_rstd.data(), rows, d);

        a.q.resize(rows * d);
        a.k.resize(rows * d);
        a.v.resize(rows * d);
        matmul(a.h.data(), params.at(o.w_query), a.q.data(), rows, d, d);
        matmul(a.h.data(), params.at(o.w_key), a.k.data(), rows, d, d);
        matmul(a.h.data(), params.at(o.w_value), a.v.data(), rows, d, d);

        a.mix.assign(rows * d, 0.0);
        a.probs.resize(n_seq);
        for (std::size_t s = 0; s < n_seq; ++s) {
            const std::size_t seq = batch.length(s);
            const std::size_t base = batch.starts[s];
            std::vector<double>& probs = a.probs[s];
            probs.assign(heads * seq * seq, 0.0);
            std::span<double> row_view(row.data(), seq);
            for (std::size_t h = 0; h < heads; ++h) {
                const bool in_scope = hook.scope != nullptr && hook.scope->contains(l, h);
                for (std::size_t qi = 0; qi < seq; ++qi) {
                    const double* qv = a.q.data() + (base + qi) * d + h * hd;
                    double max_score = -INFINITY;
                    for (std::size_t ki = 0; ki <= qi; ++ki) {
                        const double* kv = a.k.data() + (base + ki) * d + h * hd;
                        double sc = 0.0;
                        for (std::size_t j = 0; j < hd; ++j) sc += qv[j] * kv[j];
                        sc *= inv_sqrt_hd;
                        if (pai && in_scope && hook.layout->span(Modality::Image).contains(ki)) {
                            sc *= hook.spec->pai_image_scale;
                        }
                        row[ki] = sc;
                        max_score = std::max(max_score, sc);
                    }
                    double sum = 0.0;
                    for (std::size_t ki = 0; ki <= qi; ++ki) {
                        row[ki] = std::exp(row[ki] - max_score);
                        sum += row[ki];
                    }
                    for (std::size_t ki = 0; ki <= qi; ++ki) row[ki] /= sum;
                    for (std::size_t ki = qi + 1; ki < seq; ++ki) row[ki] = 0.0;

                    if (hook.capture != nullptr) {
                        auto dst = hook.capture->row(l, h, qi);
                        for (std::size_t ki = 0; ki < seq; ++ki) {
                            dst[ki] = static_cast<float>(row[ki]);
                        }
                    }
                    if (rewrites && in_scope) {
                        const RowOutcome outcome = rewrite_row(row_view, *hook.layout, *hook.spec);
                        if (hook.stats != nullptr) hook.stats->record(outcome);
                    }

                    double* prow = probs.data() + (h * seq + qi) * seq;
                    std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(seq), prow);
                    double* out = a.mix.data() + (base + qi) * d + h * hd;
                    for (std::size_t ki = 0; ki <= qi; ++ki) {
                        const double w = prow[ki];
                        const double* vv = a.v.data() + (base + ki) * d + h * hd;
                        for (std::size_t j = 0; j < hd; ++j) out[j] += w * vv[j];
                    }
                }
            }
        }

        matmul(a.mix.data(), params.at(o.w_out), tmp.data(), rows, d, d);
        for (std::size_t i = 0; i < rows * d; ++i) x[i] += tmp[i];
        a.x_mid = x;

        a.ln2_mean.resize(rows);
        a.ln2_rstd.resize(rows);
        a.h2.resize(rows * d);
        layer_norm(x.data(), params.at(o.ln2_gain), params.at(o.ln2_bias), a.h2.data(),
                   a.ln2_mean.data(), a.ln2_rstd.data(), rows, d);
        a.ff_pre.resize(rows * ff);
        a.ff_tanh.resize(rows * ff);
        a.ff_act.resize(rows * ff);
        matmul(a.h2.data(), params.at(o.ff_in), a.ff_pre.data(), rows, d, ff);
        const double* b1 = params.at(o.ff_in_bias);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < ff; ++i) {
                const std::size_t at = r * ff + i;
                const double u = a.ff_pre[at] + b1[i];
                a.ff_pre[at] = u;
                // tanh-approximated GELU
                const double t = std::tanh(kGeluScale * (u + kGeluCubic * u * u * u));
                a.ff_tanh[at] = t;
                a.ff_act[at] = 0.5 * u * (1.0 + t);
            }
        }
        matmul(a.ff_act.data(), params.at(o.ff_out), tmp.data(), rows, ff, d);
        const double* b2 = params.at(o.ff_out_bias);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) x[r * d + i] += tmp[r * d + i] + b2[i];
        }
        if (hook.hidden != nullptr) hook.hidden->push_back(x);
    }

    acts.x_final = std::move(x);
    acts.final_mean.resize(n_seq);
    acts.final_rstd.resize(n_seq);
    acts.final_normed.resize(n_seq * d);
    std::vector<double> last(n_seq * d);
    for (std::size_t s = 0; s < n_seq; ++s) {
        const double* src = acts.x_final.data() + (batch.starts[s + 1] - 1) * d;
        std::copy(src, src + d, last.data() + s * d);
    }
    layer_norm(last.data(), params.at(pl.final_gain), params.at(pl.final_bias),
               acts.final_normed.data(), acts.final_mean.data(), acts.final_rstd.data(), n_seq, d);
    acts.logits.resize(n_seq * c.vocab_size);
    matmul(acts.final_normed.data(), params.at(pl.output_head), acts.logits.data(), n_seq, d,
           c.vocab_size);
}

void check_finite(std::span<const double> logits) {
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericalError("non-finite logit in decoder output");
    }
}

// Softmax cross-entropy; writes the logit gradient when dlogits is non-null.
double cross_entropy(std::span<const double> logits, TokenId target, double* dlogits) {
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - max_logit);
    const double log_z = max_logit + std::log(sum);
    if (dlogits != nullptr) {
        for (std::size_t i = 0; i < logits.size(); ++i) {
            dlogits[i] = std::exp(logits[i] - log_z);
        }
        dlogits[target] -= 1.0;
    }
    return log_z - logits[target];
}

PackedBatch single(std::span<const TokenId> tokens) {
    PackedBatch b;
    b.add(tokens);
    return b;
}

// Sum of per-sequence losses; adds their gradient into grads.
double batch_backward(const DecoderParams& params, const PackedBatch& batch,
                      std::span<const TokenId> targets, DecoderParams& grads) {
    const DecoderConfig& c = params.config();
    const ParamLayout& pl = params.layout();
    const std::size_t d = c.model_dim;
    const std::size_t ff = c.feedforward_dim;
    const std::size_t heads = c.head_count;
    const std::size_t hd = c.head_dim();
    const std::size_t vocab = c.vocab_size;
    const std::size_t rows = batch.rows();
    const std::size_t n_seq = batch.count();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    Activations acts;
    run_forward(params, batch, ForwardHook{}, acts);

    std::vector<double> dlogits(n_seq * vocab);
    double loss = 0.0;
    for (std::size_t s = 0; s < n_seq; ++s) {
        loss += cross_entropy(std::span<const double>(acts.logits.data() + s * vocab, vocab),
                              targets[s], dlogits.data() + s * vocab);
    }
    if (!std::isfinite(loss)) throw NumericalError("non-finite loss");

    // Output head and final norm, last row of each sequence.
    add_at_b(acts.final_normed.data(), dlogits.data(), grads.at(pl.output_head), n_seq, d, vocab);
    std::vector<double> dnormed(n_seq * d, 0.0);
    add_a_bt(dlogits.data(), params.at(pl.output_head), dnormed.data(), n_seq, d, vocab);

    std::vector<double> dx(rows * d, 0.0);
    for (std::size_t s = 0; s < n_seq; ++s) {
        const std::size_t r = batch.starts[s + 1] - 1;
        layer_norm_backward(dnormed.data() + s * d, acts.x_final.data() + r * d,
                            &acts.final_mean[s], &acts.final_rstd[s], params.at(pl.final_gain),
                            dx.data() + r * d, grads.at(pl.final_gain), grads.at(pl.final_bias),
                            1, d);
    }

    std::vector<double> d_ff(rows * ff);
    std::vector<double> d_h(rows * d);
    std::vector<double> d_mix(rows * d);
    std::vector<double> dq(rows * d);
    std::vector<double> dk(rows * d);
    std::vector<double> dv(rows * d);
    std::vector<double> d_scores(c.max_seq_len);

    for (std::size_t li = c.layer_count; li-- > 0;) {
        const LayerOffsets& o = pl.layers[li];
        const LayerActivations& a = acts.layers[li];

        // Feed-forward block: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2.
        add_at_b(a.ff_act.data(), dx.data(), grads.at(o.ff_out), rows, ff, d);
        double* db2 = grads.at(o.ff_out_bias);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) db2[i] += dx[r * d + i];
        }
        std::fill(d_ff.begin(), d_ff.end(), 0.0);
        add_a_bt(dx.data(), params.at(o.ff_out), d_ff.data(), rows, ff, d);
        double* db1 = grads.at(o.ff_in_bias);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < ff; ++i) {
                const std::size_t at = r * ff + i;
                const double u = a.ff_pre[at];
                const double t = a.ff_tanh[at];
                const double grad = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluScale *
                                                          (1.0 + 3.0 * kGeluCubic * u * u);
                d_ff[at] *= grad;
                db1[i] += d_ff[at];
            }
        }
        add_at_b(a.h2.data(), d_ff.data(), grads.at(o.ff_in), rows, d, ff);
        std::fill(d_h.begin(), d_h.end(), 0.0);
        add_a_bt(d_ff.data(), params.at(o.ff_in), d_h.data(), rows, d, ff);
        layer_norm_backward(d_h.data(), a.x_mid.data(), a.ln2_mean.data(), a.ln2_rstd.data(),
                            params.at(o.ln2_gain), dx.data(), grads.at(o.ln2_gain),
                            grads.at(o.ln2_bias), rows, d);

        // Attention block: x_mid = x_in + mix W_o.
        add_at_b(a.mix.data(), dx.data(), grads.at(o.w_out), rows, d, d);
        std::fill(d_mix.begin(), d_mix.end(), 0.0);
        add_a_bt(dx.data(), params.at(o.w_out), d_mix.data(), rows, d, d);

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (std::size_t s = 0; s < n_seq; ++s) {
            const std::size_t seq = batch.length(s);
            const std::size_t base = batch.starts[s];
            const std::vector<double>& probs = a.probs[s];
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t qi = 0; qi < seq; ++qi) {
                    const double* prow = probs.data() + (h * seq + qi) * seq;
                    const double* dout = d_mix.data() + (base + qi) * d + h * hd;
                    double weighted = 0.0;
                    for (std::size_t ki = 0; ki <= qi; ++ki) {
                        const double* vv = a.v.data() + (base + ki) * d + h * hd;
                        double* dvv = dv.data() + (base + ki) * d + h * hd;
                        double dp = 0.0;
                        for (std::size_t j = 0; j < hd; ++j) {
                            dp += dout[j] * vv[j];
                            dvv[j] += prow[ki] * dout[j];
                        }
                        d_scores[ki] = dp;
                        weighted += prow[ki] * dp;
                    }
                    const double* qv = a.q.data() + (base + qi) * d + h * hd;
                    double* dqv = dq.data() + (base + qi) * d + h * hd;
                    for (std::size_t ki = 0; ki <= qi; ++ki) {
                        const double ds = prow[ki] * (d_scores[ki] - weighted) * inv_sqrt_hd;
                        const double* kv = a.k.data() + (base + ki) * d + h * hd;
                        double* dkv = dk.data() + (base + ki) * d + h * hd;
                        for (std::size_t j = 0; j < hd; ++j) {
                            dqv[j] += ds * kv[j];
                            dkv[j] += ds * qv[j];
                        }
                    }
                }
            }
        }
        add_at_b(a.h.data(), dq.data(), grads.at(o.w_query), rows, d, d);
        add_at_b(a.h.data(), dk.data(), grads.at(o.w_key), rows, d, d);
        add_at_b(a.h.data(), dv.data(), grads.at(o.w_value), rows, d, d);
        std::fill(d_h.begin(), d_h.end(), 0.0);
        add_a_bt(dq.data(), params.at(o.w_query), d_h.data(), rows, d, d);
        add_a_bt(dk.data(), params.at(o.w_key), d_h.data(), rows, d, d);
        add_a_bt(dv.data(), params.at(o.w_value), d_h.data(), rows, d, d);
        layer_norm_backward(d_h.data(), a.x_in.data(), a.ln1_mean.data(), a.ln1_rstd.data(),
                            params.at(o.ln1_gain), dx.data(), grads.at(o.ln1_gain),
                            grads.at(o.ln1_bias), rows, d);
    }

    for (std::size_t s = 0; s < n_seq; ++s) {
        for (std::size_t r = batch.starts[s]; r < batch.starts[s + 1]; ++r) {
            double* de = grads.at(pl.token_embedding + batch.tokens[r] * d);
            double* dp = grads.at(pl.position_embedding + (r - batch.starts[s]) * d);
            for (std::size_t i = 0; i < d; ++i) {
                de[i] += dx[r * d + i];
                dp[i] += dx[r * d + i];
            }
        }
    }
    return loss;
}

}  // namespace

ForwardOutput forward(const DecoderParams& params, std::span<const TokenId> tokens,
                      const ModalityLayout& layout, const InterventionSpec& spec,
                      ForwardOptions options) {
    const DecoderConfig& c = params.config();
    if (tokens.size() != layout.prompt_len()) {
        throw ShapeError("token count " + std::to_string(tokens.size()) +
                         " differs from layout length " + std::to_string(layout.prompt_len()));
    }
    spec.validate();

    ForwardOutput out;
    std::optional<ScopeSet> scope;
    if (spec.kind != InterventionKind::None) {
        scope = resolve_scope(spec.scope, c.layer_count, c.head_count);
    }
    if (options.capture_attention) {
        out.captured_attention.emplace(c.layer_count, c.head_count, tokens.size(), tokens.size());
    }

    ForwardHook hook;
    hook.layout = &layout;
    hook.spec = &spec;
    hook.scope = scope ? &*scope : nullptr;
    hook.stats = &out.rewrite_stats;
    hook.capture = out.captured_attention ? &*out.captured_attention : nullptr;
    hook.hidden = options.capture_hidden ? &out.layer_outputs : nullptr;

    Activations acts;
    run_forward(params, single(tokens), hook, acts);
    out.logits = std::move(acts.logits);

    if (spec.kind == InterventionKind::PAI) {
        // Image-free pass: system and text tokens only, renumbered from 0.
        std::vector<TokenId> unimodal;
        const Span image = layout.span(Modality::Image);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            if (!image.contains(t)) unimodal.push_back(tokens[t]);
        }
        Activations uni_acts;
        run_forward(params, single(unimodal), ForwardHook{}, uni_acts);
        out.logits = pai_logit_fusion(out.logits, uni_acts.logits, spec.pai_alpha);
    }
    check_finite(out.logits);
    return out;
}

Answer answer(std::span<const double> logits, const DecoderConfig& config) {
    return logits[config.yes_token_id] > logits[config.no_token_id] ? Answer::Yes : Answer::No;
}

Answer answer(const ForwardOutput& output, const DecoderConfig& config) {
    return answer(output.logits, config);
}

AttentionTensor capture_attention(const DecoderParams& params, std::span<const TokenId> tokens,
                                  const ModalityLayout& layout) {
    ForwardOptions options;
    options.capture_attention = true;
    ForwardOutput out = forward(params, tokens, layout, InterventionSpec::none(), options);
    return std::move(*out.captured_attention);
}

double answer_loss(const DecoderParams& params, std::span<const TokenId> tokens, TokenId target) {
    Activations acts;
    run_forward(params, single(tokens), ForwardHook{}, acts);
    return cross_entropy(acts.logits, target, nullptr);
}

double answer_loss_and_gradient(const DecoderParams& params, std::span<const TokenId> tokens,
                                TokenId target, DecoderParams& grads) {
    const TokenId targets[1] = {target};
    return batch_backward(params, single(tokens), targets, grads);
}

double batch_loss_and_gradient(const DecoderParams& params,
                               std::span<const std::span<const TokenId>> sequences,
                               std::span<const TokenId> targets, DecoderParams& grads) {
    if (sequences.size() != targets.size() || sequences.empty()) {
        throw ShapeError("batch needs one target per sequence");
    }
    PackedBatch batch;
    for (const auto& seq : sequences) batch.add(seq);
    return batch_backward(params, batch, targets, grads);
}

}  // namespace attnlab
