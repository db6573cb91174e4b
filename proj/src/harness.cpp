#include "attnlab/harness.hpp"

#include <exception>
#include <thread>

#include "attnlab/binary_io.hpp"
#include "attnlab/checkpoint.hpp"
#include "attnlab/errors.hpp"

namespace attnlab {

namespace {

// Runs fn(i) for i in [0, n). Worker w takes indices w, w + jobs, ...; the
// caller writes results into index-addressed slots, so the outcome does not
// depend on jobs. The exception of the lowest failing index is rethrown.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += jobs) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                    return;
                }
            }
        });
    }
    for (std::thread& t : workers) t.join();
    for (const std::exception_ptr& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// Per-prompt masses: quarters 1..4, then global.
using PromptMasses = std::array<ModalityMass, 5>;

PromptMasses prompt_masses(const AttentionTensor& attn, const ModalityLayout& layout) {
    PromptMasses out;
    for (int q = 1; q <= 4; ++q) out[q - 1] = modality_mass(attn, layout, LayerScope::of_quarter(q));
    out[4] = modality_mass(attn, layout, LayerScope::global());
    return out;
}

DatasetMasses mean_masses(std::string dataset, const std::vector<PromptMasses>& per_prompt) {
    DatasetMasses out;
    out.dataset = std::move(dataset);
    if (per_prompt.empty()) return out;
    for (const PromptMasses& p : per_prompt) {
        for (int q = 0; q < 4; ++q) {
            for (std::size_t m = 0; m < 3; ++m) out.quarter[q].alpha[m] += p[q].alpha[m];
        }
        for (std::size_t m = 0; m < 3; ++m) out.global.alpha[m] += p[4].alpha[m];
    }
    const double inv = 1.0 / static_cast<double>(per_prompt.size());
    for (int q = 0; q < 4; ++q) {
        for (double& a : out.quarter[q].alpha) a *= inv;
    }
    for (double& a : out.global.alpha) a *= inv;
    return out;
}

std::uint64_t training_data_seed(std::uint64_t seed) { return seed * 1000 + 1; }

}  // namespace

std::vector<Dataset> build_datasets(const ExperimentConfig& config) {
    const VocabSchema schema = VocabSchema::build(config.vocab);
    std::vector<Dataset> out;
    for (std::size_t i = 0; i < config.datasets.size(); ++i) {
        const DatasetSpec& d = config.datasets[i];
        if (d.path) {
            Dataset ds = load_dataset(*d.path);
            if (!(ds.schema == config.vocab)) {
                throw ConfigError("dataset '" + d.name + "' was generated with a different vocabulary");
            }
            for (const Prompt& p : ds.prompts) {
                if (p.tokens.size() > config.model.max_seq_len) {
                    throw ConfigError("dataset '" + d.name + "' has prompts longer than max_seq_len");
                }
            }
            out.push_back(std::move(ds));
        } else if (d.family == TaskFamily::Fine) {
            out.push_back(generate_fine_task(schema, d.pair_count, d.image_len, config.dataset_seed(i),
                                             FineTaskOptions{d.distractors}));
        } else {
            out.push_back(generate_coarse_task(schema, d.pair_count, d.image_len, config.dataset_seed(i)));
        }
    }
    return out;
}

ModelResult prepare_model(const ExperimentConfig& config) {
    config.validate();
    if (config.checkpoint) {
        DecoderParams params = load_checkpoint(*config.checkpoint);
        if (!(params.config() == config.model)) {
            throw ConfigError("checkpoint architecture differs from the model section");
        }
        return {std::move(params), std::nullopt};
    }
    const TrainingSpec& ts = *config.training;
    const VocabSchema schema = VocabSchema::build(config.vocab);
    const Dataset train_set = generate_training_set(schema, ts.size, ts.yes_fraction, ts.fine_fraction,
                                                    training_data_seed(config.seed), ts.options);
    TrainConfig tc = ts.train;
    tc.seed = config.seed;
    auto [params, report] = train(init_params(config.model, config.seed), train_set, tc);
    params.round_to_float();
    report.param_checksum = params.checksum();
    return {std::move(params), report};
}

EvalReport evaluate(const ExperimentConfig& config, const DecoderParams& params,
                    const std::vector<Dataset>& datasets,
                    const std::vector<NamedIntervention>& interventions, std::size_t jobs) {
    if (datasets.size() != config.datasets.size()) {
        throw ConfigError("dataset list does not match the config");
    }
    if (interventions.empty() || interventions.front().name != kBaselineName) {
        throw ConfigError("the intervention list must start with the baseline");
    }
    const DecoderConfig& dc = params.config();
    for (const NamedIntervention& n : interventions) {
        n.spec.validate();
        resolve_scope(n.spec.scope, dc.layer_count, dc.head_count);
    }

    EvalReport report;
    report.config_hash = config.hash();
    report.seed = config.seed;
    report.param_checksum = params.checksum();
    for (const NamedIntervention& n : interventions) {
        report.interventions.emplace_back(n.name, describe(n.spec));
    }

    for (std::size_t di = 0; di < datasets.size(); ++di) {
        const Dataset& ds = datasets[di];
        const std::string& name = config.datasets[di].name;
        report.dataset_seeds.emplace_back(name, ds.seed);
        if (ds.prompts.empty()) throw EmptyInput("dataset '" + name + "' is empty");

        // Baseline pass with capture: answers plus pre-intervention masses.
        const std::size_t n = ds.prompts.size();
        std::vector<PromptMasses> masses(n);
        std::vector<ResponseRecord> base_records(n);
        ForwardOptions capture;
        capture.capture_attention = true;
        parallel_for(n, jobs, [&](std::size_t i) {
            const Prompt& p = ds.prompts[i];
            const ForwardOutput out = forward(params, p.tokens, p.layout, InterventionSpec::none(), capture);
            masses[i] = prompt_masses(*out.captured_attention, p.layout);
            base_records[i] = {p.pair_id, p.prompt_id, p.label, answer(out, dc)};
        });
        report.masses.push_back(mean_masses(name, masses));

        for (const NamedIntervention& iv : interventions) {
            ReportCell cell;
            cell.dataset = name;
            cell.intervention = iv.name;
            if (iv.spec.kind == InterventionKind::None) {
                cell.metrics = compute_metrics(base_records);
            } else {
                std::vector<ResponseRecord> records(n);
                std::vector<RowRewriteStats> stats(n);
                parallel_for(n, jobs, [&](std::size_t i) {
                    const Prompt& p = ds.prompts[i];
                    const ForwardOutput out = forward(params, p.tokens, p.layout, iv.spec);
                    records[i] = {p.pair_id, p.prompt_id, p.label, answer(out, dc)};
                    stats[i] = out.rewrite_stats;
                });
                cell.metrics = compute_metrics(records);
                for (const RowRewriteStats& s : stats) cell.stats += s;
            }
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t jobs) {
    config.validate();
    ModelResult model = prepare_model(config);
    const std::vector<Dataset> datasets = build_datasets(config);
    EvalReport report = evaluate(config, model.params, datasets, config.expanded_interventions(), jobs);
    return {std::move(report), std::move(model)};
}

std::vector<NamedIntervention> expand_sweep(const SweepSpec& sweep) {
    if (sweep.scope_set || !(sweep.tmpl.scope == LayerScope::global())) {
        throw SpecError("sweep template must not carry a scope");
    }
    if (sweep.tmpl.kind == InterventionKind::None) {
        throw SpecError("sweep template needs an intervention kind");
    }
    std::vector<NamedIntervention> out;
    for (int q = 1; q <= 4; ++q) {
        InterventionSpec s = sweep.tmpl;
        s.scope = LayerScope::of_quarter(q);
        out.push_back({sweep.name + "@Q" + std::to_string(q), s});
    }
    if (sweep.global_graduated) {
        for (int tenth : {1, 2, 3}) {
            InterventionSpec s = sweep.tmpl;
            s.fraction = tenth / 10.0;
            out.push_back({sweep.name + "@global-0." + std::to_string(tenth), s});
        }
    }
    return out;
}

ExperimentResult sweep_quarters(const ExperimentConfig& config, const SweepSpec& sweep,
                                std::size_t jobs) {
    ExperimentConfig expanded = config;
    expanded.interventions = expand_sweep(sweep);
    expanded.sweep = sweep;
    return run_experiment(expanded, jobs);
}

std::vector<AttentionRecord> capture_dataset(const DecoderParams& params, const Dataset& dataset,
                                             std::size_t jobs) {
    std::vector<AttentionRecord> out(dataset.prompts.size());
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        const Prompt& p = dataset.prompts[i];
        out[i] = {p.prompt_id, p.layout, capture_attention(params, p.tokens, p.layout)};
    });
    return out;
}

std::string encode_attention(const std::vector<AttentionRecord>& records) {
    std::string out = "ATTN";
    binary::put_u32(out, 1);
    binary::put_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const AttentionRecord& r : records) {
        binary::put_u32(out, r.prompt_id);
        for (Modality m : all_modalities) {
            binary::put_u32(out, static_cast<std::uint32_t>(r.layout.length(m)));
        }
        const AttentionTensor& t = r.weights;
        for (std::size_t v : {t.layer_count(), t.head_count(), t.query_count(), t.key_count()}) {
            binary::put_u32(out, static_cast<std::uint32_t>(v));
        }
        for (float v : t.data()) binary::put_f32(out, v);
    }
    return out;
}

std::vector<AttentionRecord> decode_attention(const std::string& bytes) {
    binary::Reader in(bytes);
    in.expect_magic("ATTN");
    const std::uint32_t version = in.u32();
    if (version != 1) throw FormatError("unsupported attention dump version " + std::to_string(version));
    const std::uint32_t count = in.u32();
    std::vector<AttentionRecord> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        AttentionRecord r;
        r.prompt_id = in.u32();
        const std::uint32_t sys = in.u32();
        const std::uint32_t img = in.u32();
        const std::uint32_t txt = in.u32();
        try {
            r.layout = build_layout(sys, img, txt);
        } catch (const InvalidLayout& e) {
            throw FormatError(std::string("attention dump: ") + e.what());
        }
        const std::uint32_t layers = in.u32();
        const std::uint32_t heads = in.u32();
        const std::uint32_t queries = in.u32();
        const std::uint32_t keys = in.u32();
        if (queries != r.layout.prompt_len() || keys != r.layout.prompt_len()) {
            throw FormatError("attention dump: tensor dims disagree with the layout");
        }
        const std::uint64_t cells = std::uint64_t{layers} * heads * queries * keys;
        if (cells * 4 > bytes.size()) throw FormatError("attention dump: truncated tensor");
        r.weights = AttentionTensor(layers, heads, queries, keys);
        for (float& v : r.weights.data()) v = in.f32();
        out.push_back(std::move(r));
    }
    if (!in.at_end()) throw FormatError("attention dump: trailing bytes");
    return out;
}

void dump_attention(const DecoderParams& params, const Dataset& dataset,
                    const std::filesystem::path& path, std::size_t jobs) {
    binary::write_file(path, encode_attention(capture_dataset(params, dataset, jobs)));
}

std::vector<AttentionRecord> load_attention(const std::filesystem::path& path) {
    return decode_attention(binary::read_file(path));
}

DatasetMasses masses_from_records(std::string dataset, const std::vector<AttentionRecord>& records) {
    std::vector<PromptMasses> per_prompt;
    per_prompt.reserve(records.size());
    for (const AttentionRecord& r : records) per_prompt.push_back(prompt_masses(r.weights, r.layout));
    return mean_masses(std::move(dataset), per_prompt);
}

}  // namespace attnlab
