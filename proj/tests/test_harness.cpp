#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "attnlab/binary_io.hpp"
#include "attnlab/checkpoint.hpp"
#include "attnlab/errors.hpp"
#include "attnlab/harness.hpp"

using namespace attnlab;
namespace fs = std::filesystem;

namespace {

// Small enough to train in well under a second.
const std::string kConfig = R"(
seed: 3
vocab: {categories: 4, objects_per_category: 6, system_len: 4}
model: {layers: 4, heads: 2, dim: 16, ff_dim: 32, vocab_size: 40, max_seq_len: 16}
train: {size: 60, epochs: 1, yes_fraction: 0.8}
datasets:
  - {name: fine, pairs: 15}
  - {name: coarse, family: coarse, pairs: 10}
interventions:
  - {name: q4sys, kind: proportional, source: system, fraction: 1.0, scope: {quarter: 4}}
  - {name: ablate, kind: ablation, source: system, scope: global}
  - {name: img2, kind: scale, target: image, factor: 2, scope: {layers: [0, 2]}, heads: [1]}
  - {name: pai, kind: pai, alpha: 0.5, image_scale: 1.5, scope: {quarter: 2}}
)";

ExperimentConfig small() { return parse_config(kConfig); }

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("attnlab_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

const ExperimentResult& shared_run() {
    static const ExperimentResult r = run_experiment(small());
    return r;
}

std::string with(std::string text, const std::string& from, const std::string& to) {
    const auto at = text.find(from);
    REQUIRE(at != std::string::npos);
    return text.replace(at, from.size(), to);
}

}  // namespace

TEST_CASE("config parsing") {
    const ExperimentConfig c = small();
    CHECK(c.seed == 3);
    CHECK(c.model.layer_count == 4);
    CHECK(c.model.yes_token_id == 4);
    CHECK(c.vocab.category_count == 4);
    REQUIRE(c.training.has_value());
    CHECK(c.training->size == 60);
    CHECK(c.training->yes_fraction == 0.8);
    REQUIRE(c.datasets.size() == 2);
    CHECK(c.datasets[1].family == TaskFamily::Coarse);
    CHECK(c.datasets[1].image_len == 5);
    CHECK(c.datasets[0].image_len == 6);
    REQUIRE(c.interventions.size() == 4);
    CHECK(c.interventions[0].spec.scope == LayerScope::of_quarter(4));
    CHECK(c.interventions[2].spec.scale_factor == 2.0);
    CHECK(c.interventions[3].spec.pai_alpha == 0.5);
    CHECK(c.dataset_seed(0) == 3 * 1000 + 100);
    CHECK(c.dataset_seed(1) == 3 * 1000 + 101);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_config("seed: [1"), ConfigError);
    CHECK_THROWS_AS(parse_config(kConfig + "bogus: 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "epochs: 1", "epochs: 1, momentum: 2")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "pairs: 15", "pairs: 15, colour: red")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "kind: ablation", "kind: erase")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "quarter: 4", "quarter: 5")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "fraction: 1.0", "fraction: 1.5")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "layers: [0, 2]", "layers: [2, 9]")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "heads: [1]", "heads: [2]")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "name: img2", "name: q4sys")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "name: img2", "name: 'bad name'")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "vocab_size: 40", "vocab_size: 30")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "max_seq_len: 16", "max_seq_len: 12")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "family: coarse", "family: medium")), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "seed: 3", "seed: -3")), ConfigError);
    CHECK_THROWS_AS(parse_config(kConfig + "checkpoint: model.ckpt\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(with(kConfig, "train: {size: 60, epochs: 1, yes_fraction: 0.8}", "")),
                    ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/attnlab.yaml"), ConfigError);
}

TEST_CASE("baseline comes first and names stay unique") {
    const auto list = small().expanded_interventions();
    REQUIRE(list.size() == 5);
    CHECK(list[0].name == "baseline");
    CHECK(list[0].spec.kind == InterventionKind::None);
    CHECK(list[1].name == "q4sys");

    const std::string explicit_base = kConfig + "  - {name: baseline, kind: none}\n";
    CHECK(parse_config(explicit_base).expanded_interventions().size() == 5);
    CHECK_THROWS_AS(parse_config(kConfig + "  - {name: nothing, kind: none}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config(kConfig + "  - {name: baseline, kind: ablation, source: text}\n"),
                    ConfigError);
}

TEST_CASE("config hash is stable and sensitive") {
    CHECK(small().hash() == small().hash());
    CHECK(small().hash() != parse_config(with(kConfig, "seed: 3", "seed: 4")).hash());
    CHECK(small().hash() != parse_config(with(kConfig, "factor: 2", "factor: 3")).hash());
    // Formatting does not matter.
    CHECK(small().hash() == parse_config(with(kConfig, "seed: 3", "seed:    3  # comment")).hash());
}

TEST_CASE("sweep expansion") {
    SweepSpec s;
    s.name = "sys";
    s.tmpl = InterventionSpec::proportional(Modality::System, 1.0, LayerScope::global());
    auto list = expand_sweep(s);
    REQUIRE(list.size() == 4);
    for (int q = 0; q < 4; ++q) {
        CHECK(list[q].name == "sys@Q" + std::to_string(q + 1));
        CHECK(list[q].spec.scope == LayerScope::of_quarter(q + 1));
    }
    s.global_graduated = true;
    list = expand_sweep(s);
    REQUIRE(list.size() == 7);
    CHECK(list[4].spec.fraction == 0.1);
    CHECK(list[6].spec.fraction == doctest::Approx(0.3));
    CHECK(list[6].spec.scope == LayerScope::global());

    s.tmpl.scope = LayerScope::of_quarter(2);
    CHECK_THROWS_AS(expand_sweep(s), SpecError);
    s.tmpl = InterventionSpec::none();
    CHECK_THROWS_AS(expand_sweep(s), SpecError);

    const std::string swept = kConfig +
                              "sweep: {template: {name: sys, kind: proportional, source: system},"
                              " global_graduated: true}\n";
    const ExperimentConfig c = parse_config(swept);
    REQUIRE(c.sweep.has_value());
    CHECK(expand_sweep(*c.sweep).size() == 7);
    CHECK_THROWS(parse_config(kConfig + "sweep: {template: {kind: ablation, source: system,"
                                        " scope: {quarter: 1}}}\n"));
}

TEST_CASE("report CSV round trip and table") {
    const EvalReport& r = shared_run().report;
    CHECK(r.cells.size() == 2 * 5);
    CHECK(r.masses.size() == 2);
    CHECK(r.tool_version == kToolVersion);
    CHECK(r.param_checksum == shared_run().model.params.checksum());
    const std::string csv = encode_report_csv(r);
    const EvalReport back = decode_report_csv(csv);
    CHECK(encode_report_csv(back) == csv);
    CHECK(render_table(back) == render_table(r));
    CHECK(render_table(r).find("q4sys") != std::string::npos);

    CHECK_THROWS_AS(decode_report_csv("garbage"), FormatError);
    // Dropping any cell row makes the report incomplete.
    const auto row = csv.find("fine,ablate,yes_rate,");
    REQUIRE(row != std::string::npos);
    const auto end = csv.find('\n', row);
    CHECK_THROWS_AS(decode_report_csv(csv.substr(0, row) + csv.substr(end + 1)), FormatError);
    CHECK_THROWS_AS(r.cell("fine", "missing"), std::exception);
}

TEST_CASE("masses are stochastic per quarter") {
    for (const DatasetMasses& m : shared_run().report.masses) {
        for (const ModalityMass& q : m.quarter) CHECK(q.total() == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(m.global.total() == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("baseline cell equals direct evaluation") {
    const ExperimentConfig c = small();
    const ExperimentResult& run = shared_run();
    const auto datasets = build_datasets(c);
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        std::vector<ResponseRecord> records;
        for (const Prompt& p : datasets[d].prompts) {
            const ForwardOutput out = forward(run.model.params, p.tokens, p.layout, InterventionSpec::none());
            records.push_back({p.pair_id, p.prompt_id, p.label, answer(out, c.model)});
        }
        const MetricBlock direct = compute_metrics(records);
        const MetricBlock& cell = run.report.cell(c.datasets[d].name, "baseline").metrics;
        CHECK(cell.simple_accuracy == direct.simple_accuracy);
        CHECK(cell.paired_accuracy == direct.paired_accuracy);
        CHECK(cell.yes_rate == direct.yes_rate);
    }
}

TEST_CASE("rewrite statistics count every in-scope row") {
    const ExperimentConfig c = small();
    const auto datasets = build_datasets(c);
    const ReportCell& cell = shared_run().report.cell("fine", "q4sys");
    // One layer in Q4 of four, two heads, one row per query position.
    std::size_t rows = 0;
    for (const Prompt& p : datasets[0].prompts) rows += 1 * 2 * p.tokens.size();
    CHECK(cell.stats.rows_modified + cell.stats.rows_skipped_zero_recipient +
              cell.stats.rows_skipped_zero_source ==
          rows);
    CHECK(cell.stats.rows_modified > 0);
    const ReportCell& base = shared_run().report.cell("fine", "baseline");
    CHECK(base.stats == RowRewriteStats{});
}

TEST_CASE("results do not depend on worker count or on other interventions") {
    const ExperimentConfig c = small();
    const DecoderParams& p = shared_run().model.params;
    const auto datasets = build_datasets(c);
    const auto list = c.expanded_interventions();
    const std::string serial = encode_report_csv(evaluate(c, p, datasets, list, 1));
    CHECK(encode_report_csv(evaluate(c, p, datasets, list, 3)) == serial);
    CHECK(encode_report_csv(evaluate(c, p, datasets, list, 64)) == serial);
    CHECK(serial == encode_report_csv(shared_run().report));

    const EvalReport alone = evaluate(c, p, datasets, {list.front()}, 1);
    const EvalReport& all = shared_run().report;
    for (const auto& ds : c.datasets) {
        CHECK(alone.cell(ds.name, "baseline").metrics.yes_rate == all.cell(ds.name, "baseline").metrics.yes_rate);
        CHECK(alone.cell(ds.name, "baseline").metrics.simple_accuracy ==
              all.cell(ds.name, "baseline").metrics.simple_accuracy);
    }
    CHECK_THROWS_AS(evaluate(c, p, datasets, {list[1]}, 1), ConfigError);
}

TEST_CASE("reruns are byte-identical") {
    const ExperimentResult again = run_experiment(small());
    CHECK(encode_report_csv(again.report) == encode_report_csv(shared_run().report));
    CHECK(encode_checkpoint(again.model.params) == encode_checkpoint(shared_run().model.params));
    CHECK(encode_train_report(*again.model.train_report) ==
          encode_train_report(*shared_run().model.train_report));
}

TEST_CASE("a saved checkpoint reproduces the trained model") {
    const fs::path ckpt = scratch("model.ckpt");
    save_checkpoint(shared_run().model.params, ckpt);
    const std::string from_ckpt = with(kConfig, "train: {size: 60, epochs: 1, yes_fraction: 0.8}",
                                       "checkpoint: " + ckpt.string());
    const ExperimentResult r = run_experiment(parse_config(from_ckpt));
    CHECK_FALSE(r.model.train_report.has_value());
    CHECK(r.report.param_checksum == shared_run().report.param_checksum);
    // The config hash differs, the cells do not.
    for (const ReportCell& cell : shared_run().report.cells) {
        CHECK(r.report.cell(cell.dataset, cell.intervention).metrics.yes_rate == cell.metrics.yes_rate);
    }
    const std::string wrong = with(with(from_ckpt, "dim: 16", "dim: 8"), "ff_dim: 32", "ff_dim: 16");
    CHECK_THROWS_AS(prepare_model(parse_config(wrong)), ConfigError);
}

TEST_CASE("dataset files are accepted in place of generation") {
    const ExperimentConfig c = small();
    const auto datasets = build_datasets(c);
    const fs::path file = scratch("fine.txt");
    save_dataset(datasets[0], file);
    const ExperimentConfig loaded = parse_config(with(kConfig, "{name: fine, pairs: 15}",
                                                      "{name: fine, path: " + file.string() + "}"));
    CHECK(build_datasets(loaded)[0] == datasets[0]);
    CHECK_THROWS_AS(parse_config(with(kConfig, "{name: fine, pairs: 15}",
                                      "{name: fine, path: x.txt, pairs: 3}")),
                    ConfigError);
}

TEST_CASE("attention dump round trip and masses") {
    const ExperimentConfig c = small();
    const auto datasets = build_datasets(c);
    const DecoderParams& p = shared_run().model.params;
    const auto records = capture_dataset(p, datasets[0]);
    REQUIRE(records.size() == datasets[0].prompts.size());
    CHECK(capture_dataset(p, datasets[0], 4) == records);

    const std::string bytes = encode_attention(records);
    CHECK(decode_attention(bytes) == records);
    CHECK_THROWS_AS(decode_attention(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(decode_attention(bytes + "x"), FormatError);
    CHECK_THROWS_AS(decode_attention("ATTX" + bytes.substr(4)), FormatError);
    CHECK_THROWS_AS(decode_attention(""), FormatError);

    const fs::path file = scratch("fine.attn");
    dump_attention(p, datasets[0], file);
    CHECK(load_attention(file) == records);

    const DatasetMasses from_dump = masses_from_records("fine", records);
    const DatasetMasses& reported = shared_run().report.masses[0];
    for (std::size_t q = 0; q < 4; ++q) {
        for (std::size_t m = 0; m < 3; ++m) {
            CHECK(std::abs(from_dump.quarter[q].alpha[m] - reported.quarter[q].alpha[m]) <= 1e-9);
        }
    }
    for (std::size_t m = 0; m < 3; ++m) CHECK(std::abs(from_dump.global.alpha[m] - reported.global.alpha[m]) <= 1e-9);
}

#ifdef ATTNLAB_CLI_PATH
TEST_CASE("command-line exit codes") {
    const fs::path cfg = scratch("cli.yaml");
    binary::write_file(cfg, kConfig);
    const fs::path bad = scratch("bad.yaml");
    binary::write_file(bad, kConfig + "bogus: 1\n");
    const fs::path out = scratch("cli_out");
    const std::string cli = ATTNLAB_CLI_PATH;
    auto run = [&](const std::string& args) {
        const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(status);
    };
    CHECK(run("eval --config " + cfg.string() + " --out " + out.string() + " --jobs 2") == 0);
    CHECK(fs::exists(out / "report.csv"));
    CHECK(fs::exists(out / "model.ckpt"));
    CHECK(run("report " + (out / "report.csv").string()) == 0);
    CHECK(run("generate --config " + cfg.string() + " --out " + out.string()) == 0);
    CHECK(fs::exists(out / "fine.txt"));
    CHECK(run("eval --config " + bad.string()) == 1);
    CHECK(run("eval") == 1);
    CHECK(run("frobnicate") == 1);
    CHECK(run("sweep --config " + cfg.string()) == 1);  // no sweep section
    CHECK(run("report " + cfg.string()) == 2);          // not a report
}
#endif
