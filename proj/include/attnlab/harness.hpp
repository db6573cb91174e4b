#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attnlab/attention_tensor.hpp"
#include "attnlab/benchgen.hpp"
#include "attnlab/decoder.hpp"
#include "attnlab/intervention.hpp"
#include "attnlab/metrics.hpp"
#include "attnlab/modality.hpp"
#include "attnlab/trainer.hpp"

namespace attnlab {

inline constexpr std::string_view kToolVersion = "attnlab 0.1.0";
inline constexpr std::string_view kBaselineName = "baseline";

struct DatasetSpec {
    std::string name;
    // Generated when path is empty.
    std::optional<std::filesystem::path> path;
    TaskFamily family = TaskFamily::Fine;
    std::size_t pair_count = 200;
    std::size_t image_len = 6;
    std::optional<std::uint64_t> seed;  // defaults to a value derived from the global seed
    DistractorMode distractors = DistractorMode::SameCategory;
};

struct TrainingSpec {
    TrainConfig train;
    std::size_t size = 3000;
    double yes_fraction = 0.8;
    double fine_fraction = 1.0;
    TrainingSetOptions options;
};

struct NamedIntervention {
    std::string name;
    InterventionSpec spec;
};

struct SweepSpec {
    std::string name;
    InterventionSpec tmpl;
    // Set when the template names a scope of its own, which is rejected.
    bool scope_set = false;
    bool global_graduated = false;
};

struct OutputPaths {
    std::optional<std::filesystem::path> report;
    std::optional<std::filesystem::path> table;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> train_report;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DecoderConfig model;
    SchemaConfig vocab;
    // Exactly one of training / checkpoint is set.
    std::optional<TrainingSpec> training;
    std::optional<std::filesystem::path> checkpoint;
    std::vector<DatasetSpec> datasets;
    // User entries; the baseline is added by expanded_interventions().
    std::vector<NamedIntervention> interventions;
    std::optional<SweepSpec> sweep;
    OutputPaths output;

    // Throws ConfigError or SpecError.
    void validate() const;

    // "baseline" first, then the configured entries in order. None-kind
    // entries fold into the baseline. Throws ConfigError on a duplicate name.
    std::vector<NamedIntervention> expanded_interventions() const;

    // Seed actually used for a dataset entry.
    std::uint64_t dataset_seed(std::size_t index) const;

    // Stable textual rendering of every field, used for the config hash.
    std::string canonical() const;
    std::uint64_t hash() const;
};

// YAML config. Unknown keys, wrong types and missing required fields raise
// ConfigError naming the offending key. Relative paths resolve against
// base_dir.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// Mean of per-prompt modality masses over a dataset, pre-intervention.
struct DatasetMasses {
    std::string dataset;
    std::array<ModalityMass, 4> quarter{};
    ModalityMass global;
};

struct ReportCell {
    std::string dataset;
    std::string intervention;
    MetricBlock metrics;
    RowRewriteStats stats;
};

struct EvalReport {
    std::string tool_version{kToolVersion};
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::uint64_t param_checksum = 0;
    std::vector<std::pair<std::string, std::uint64_t>> dataset_seeds;
    // Intervention names in column order, with a one-line description each.
    std::vector<std::pair<std::string, std::string>> interventions;
    std::vector<DatasetMasses> masses;
    // Dataset-major, intervention order within a dataset.
    std::vector<ReportCell> cells;

    const ReportCell& cell(std::string_view dataset, std::string_view intervention) const;
};

// Comma-separated `dataset,intervention,metric,value` rows preceded by
// `#`-prefixed metadata lines. Values use round-trip precision.
std::string encode_report_csv(const EvalReport& report);
// Throws FormatError on malformed input or a missing cell.
EvalReport decode_report_csv(std::string_view text);

// Table-2-style rendering: percentages to two decimals, accuracies with the
// relative change against the baseline in brackets, the yes-rate with its
// relative deviation from the ground-truth yes fraction.
std::string render_table(const EvalReport& report);

// One-line human description of a spec, e.g. "proportional system p=1 Q4".
std::string describe(const InterventionSpec& spec);

// Datasets named in the config, generated or loaded, in config order.
std::vector<Dataset> build_datasets(const ExperimentConfig& config);

struct ModelResult {
    DecoderParams params;
    std::optional<TrainReport> train_report;
};

// Trains (parameters rounded to float32 afterwards, so the checkpoint
// reproduces the in-memory model) or loads the configured checkpoint.
ModelResult prepare_model(const ExperimentConfig& config);

// The forward pass of every prompt under every intervention. jobs > 1
// evaluates prompts on worker threads; results merge in prompt order, so
// the report does not depend on jobs.
EvalReport evaluate(const ExperimentConfig& config, const DecoderParams& params,
                    const std::vector<Dataset>& datasets,
                    const std::vector<NamedIntervention>& interventions, std::size_t jobs = 1);

struct ExperimentResult {
    EvalReport report;
    ModelResult model;
};

ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t jobs = 1);

// Template expanded over Q1..Q4, plus Global at fractions 0.1, 0.2, 0.3
// when global_graduated is set. Throws SpecError when the template already
// has a scope.
std::vector<NamedIntervention> expand_sweep(const SweepSpec& sweep);
ExperimentResult sweep_quarters(const ExperimentConfig& config, const SweepSpec& sweep,
                                std::size_t jobs = 1);

// Attention dump, little-endian:
//   "ATTN", uint32 version (1), uint32 record count
//   per record: uint32 prompt_id, 3 x uint32 span lengths (system, image,
//   text), 4 x uint32 dims (layers, heads, queries, keys), float32 weights
//   row-major [layer][head][query][key]
struct AttentionRecord {
    std::uint32_t prompt_id = 0;
    ModalityLayout layout;
    AttentionTensor weights;

    bool operator==(const AttentionRecord&) const = default;
};

std::vector<AttentionRecord> capture_dataset(const DecoderParams& params, const Dataset& dataset,
                                             std::size_t jobs = 1);
std::string encode_attention(const std::vector<AttentionRecord>& records);
// All or nothing: throws FormatError on bad magic, truncation or trailing
// bytes.
std::vector<AttentionRecord> decode_attention(const std::string& bytes);
void dump_attention(const DecoderParams& params, const Dataset& dataset,
                    const std::filesystem::path& path, std::size_t jobs = 1);
std::vector<AttentionRecord> load_attention(const std::filesystem::path& path);

// Mean of per-record masses, the same reduction evaluate() records.
DatasetMasses masses_from_records(std::string dataset, const std::vector<AttentionRecord>& records);

}  // namespace attnlab
