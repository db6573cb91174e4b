// attnlab command-line driver.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "attnlab/binary_io.hpp"
#include "attnlab/checkpoint.hpp"
#include "attnlab/errors.hpp"
#include "attnlab/harness.hpp"

namespace fs = std::filesystem;
using namespace attnlab;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs = 1;
    std::string input;  // report: CSV to re-render
};

ExperimentConfig load(const Options& opt) {
    if (opt.config.empty()) throw ConfigError("--config is required");
    ExperimentConfig c = load_config(opt.config);
    if (opt.seed) {
        c.seed = *opt.seed;
        c.validate();
    }
    return c;
}

// Output path: --out directory when given, else the config's path, else none.
std::optional<fs::path> output_path(const Options& opt, const std::optional<fs::path>& configured,
                                    const char* default_name) {
    if (!opt.out.empty()) {
        fs::create_directories(opt.out);
        return fs::path(opt.out) / default_name;
    }
    if (configured && configured->has_parent_path()) fs::create_directories(configured->parent_path());
    return configured;
}

void write_text(const fs::path& path, const std::string& text) {
    binary::write_file(path, text);
    std::fprintf(stderr, "wrote %s\n", path.string().c_str());
}

void write_model(const Options& opt, const ExperimentConfig& c, const ModelResult& m) {
    if (!m.train_report) return;
    if (auto p = output_path(opt, c.output.checkpoint, "model.ckpt")) {
        save_checkpoint(m.params, *p);
        std::fprintf(stderr, "wrote %s\n", p->string().c_str());
    }
    if (auto p = output_path(opt, c.output.train_report, "train_report.txt")) {
        write_text(*p, encode_train_report(*m.train_report));
    }
}

void write_report(const Options& opt, const ExperimentConfig& c, const EvalReport& r) {
    const std::string table = render_table(r);
    std::cout << table;
    if (auto p = output_path(opt, c.output.report, "report.csv")) write_text(*p, encode_report_csv(r));
    if (auto p = output_path(opt, c.output.table, "report.txt")) write_text(*p, table);
}

int cmd_generate(const Options& opt) {
    const ExperimentConfig c = load(opt);
    const fs::path dir = opt.out.empty() ? fs::path(".") : fs::path(opt.out);
    fs::create_directories(dir);
    const std::vector<Dataset> datasets = build_datasets(c);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        if (c.datasets[i].path) continue;
        const fs::path p = dir / (c.datasets[i].name + ".txt");
        save_dataset(datasets[i], p);
        std::fprintf(stderr, "wrote %s (%zu prompts)\n", p.string().c_str(), datasets[i].prompts.size());
    }
    if (c.training) {
        const TrainingSpec& t = *c.training;
        const Dataset ds = generate_training_set(VocabSchema::build(c.vocab), t.size, t.yes_fraction,
                                                 t.fine_fraction, c.seed * 1000 + 1, t.options);
        const fs::path p = dir / "train.txt";
        save_dataset(ds, p);
        std::fprintf(stderr, "wrote %s (%zu prompts)\n", p.string().c_str(), ds.prompts.size());
    }
    return 0;
}

int cmd_train(const Options& opt) {
    const ExperimentConfig c = load(opt);
    if (!c.training) throw ConfigError("train needs a 'train' section");
    const ModelResult m = prepare_model(c);
    std::cout << encode_train_report(*m.train_report);
    write_model(opt, c, m);
    return 0;
}

int cmd_eval(const Options& opt) {
    const ExperimentConfig c = load(opt);
    const ExperimentResult r = run_experiment(c, opt.jobs);
    write_model(opt, c, r.model);
    write_report(opt, c, r.report);
    return 0;
}

int cmd_sweep(const Options& opt) {
    const ExperimentConfig c = load(opt);
    if (!c.sweep) throw ConfigError("sweep needs a 'sweep' section");
    const ExperimentResult r = sweep_quarters(c, *c.sweep, opt.jobs);
    write_model(opt, c, r.model);
    write_report(opt, c, r.report);
    return 0;
}

int cmd_dump(const Options& opt) {
    const ExperimentConfig c = load(opt);
    const ModelResult m = prepare_model(c);
    write_model(opt, c, m);
    const fs::path dir = opt.out.empty() ? fs::path(".") : fs::path(opt.out);
    fs::create_directories(dir);
    const std::vector<Dataset> datasets = build_datasets(c);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        const fs::path p = dir / (c.datasets[i].name + ".attn");
        dump_attention(m.params, datasets[i], p, opt.jobs);
        std::fprintf(stderr, "wrote %s\n", p.string().c_str());
    }
    return 0;
}

int cmd_report(const Options& opt) {
    if (opt.input.empty()) throw ConfigError("report needs a report CSV");
    std::string text;
    try {
        text = binary::read_file(opt.input);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    const std::string table = render_table(decode_report_csv(text));
    if (opt.out.empty()) {
        std::cout << table;
    } else {
        write_text(opt.out, table);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-redistribution experiments on a toy multimodal decoder"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* cfg = sub->add_option("--config", opt.config, "experiment config (YAML)");
        if (needs_config) cfg->required();
        sub->add_option("--seed", opt.seed, "override the global seed");
        sub->add_option("--out", opt.out, "output directory");
        sub->add_option("--jobs", opt.jobs, "worker threads for prompt evaluation")
            ->check(CLI::PositiveNumber);
    };
    auto* gen = app.add_subcommand("generate", "write the configured datasets");
    auto* trn = app.add_subcommand("train", "train a model and write its checkpoint");
    auto* evl = app.add_subcommand("eval", "run every configured intervention");
    auto* swp = app.add_subcommand("sweep", "expand the sweep template over quarters");
    auto* dmp = app.add_subcommand("dump-attn", "write captured attention tensors");
    auto* rep = app.add_subcommand("report", "re-render a report CSV as a table");
    for (auto* s : {gen, trn, evl, swp, dmp}) add_common(s, true);
    rep->add_option("report", opt.input, "report CSV")->required();
    rep->add_option("--out", opt.out, "write the table here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen) return cmd_generate(opt);
        if (*trn) return cmd_train(opt);
        if (*evl) return cmd_eval(opt);
        if (*swp) return cmd_sweep(opt);
        if (*dmp) return cmd_dump(opt);
        if (*rep) return cmd_report(opt);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const SpecError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitRuntime;
}
