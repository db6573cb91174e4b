#include <cstdio>
#include <initializer_list>
#include <set>
#include <span>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "attnlab/binary_io.hpp"
#include "attnlab/errors.hpp"
#include "attnlab/harness.hpp"

namespace attnlab {

namespace {

using Keys = std::span<const std::string_view>;

void check_keys(const YAML::Node& node, const std::string& where, Keys allowed) {
    if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        bool known = false;
        for (std::string_view a : allowed) known = known || key == a;
        if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

void check_keys(const YAML::Node& node, const std::string& where,
                std::initializer_list<std::string_view> allowed) {
    check_keys(node, where, Keys(allowed.begin(), allowed.size()));
}

template <class T>
T scalar(const YAML::Node& node, const std::string& where) {
    if (!node.IsScalar()) throw ConfigError(where + ": expected a scalar");
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(where + ": cannot read '" + node.Scalar() + "'");
    }
}

template <class T>
void read(const YAML::Node& parent, const char* key, const std::string& where, T& out) {
    if (const YAML::Node n = parent[key]) out = scalar<T>(n, where + "." + key);
}

std::size_t read_count(const YAML::Node& parent, const char* key, const std::string& where,
                       std::size_t fallback) {
    const YAML::Node n = parent[key];
    if (!n) return fallback;
    const auto v = scalar<long long>(n, where + "." + key);
    if (v < 0) throw ConfigError(where + "." + key + ": must be non-negative");
    return static_cast<std::size_t>(v);
}

template <class Fn>
auto translate(const std::string& where, Fn fn) {
    try {
        return fn();
    } catch (const InvalidSpec& e) {
        throw ConfigError(where + ": " + e.what());
    } catch (const InvalidScope& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

LayerScope parse_scope(const YAML::Node& node, const std::string& where) {
    if (node.IsScalar()) {
        if (node.Scalar() == "global") return LayerScope::global();
        throw ConfigError(where + ": scope must be 'global', {quarter: q} or {layers: [lo, hi]}");
    }
    check_keys(node, where, {"quarter", "layers"});
    if (node["quarter"] && node["layers"]) {
        throw ConfigError(where + ": give either quarter or layers");
    }
    if (node["quarter"]) return LayerScope::of_quarter(scalar<int>(node["quarter"], where + ".quarter"));
    const YAML::Node layers = node["layers"];
    if (!layers || !layers.IsSequence() || layers.size() != 2) {
        throw ConfigError(where + ".layers: expected [lo, hi]");
    }
    return LayerScope::of_layers(scalar<std::size_t>(layers[0], where + ".layers"),
                                 scalar<std::size_t>(layers[1], where + ".layers"));
}

// Shared by intervention entries and the sweep template. Returns whether a
// scope was given.
bool parse_spec_fields(const YAML::Node& node, const std::string& where, InterventionSpec& spec) {
    const YAML::Node kind = node["kind"];
    if (!kind) throw ConfigError(where + ": missing 'kind'");
    spec.kind = translate(where, [&] {
        return parse_intervention_kind(scalar<std::string>(kind, where + ".kind"));
    });
    auto modality = [&](const char* key, Modality& out) {
        if (const YAML::Node n = node[key]) {
            out = translate(where, [&] { return parse_modality(scalar<std::string>(n, where + "." + key)); });
        }
    };
    modality("source", spec.source);
    modality("recipient", spec.recipient);
    modality("target", spec.target);
    read(node, "fraction", where, spec.fraction);
    read(node, "factor", where, spec.scale_factor);
    read(node, "threshold", where, spec.adhh_threshold);
    read(node, "alpha", where, spec.pai_alpha);
    read(node, "image_scale", where, spec.pai_image_scale);
    read(node, "gamma", where, spec.pai_gamma);
    bool scoped = false;
    if (const YAML::Node s = node["scope"]) {
        spec.scope = parse_scope(s, where + ".scope");
        scoped = true;
    }
    if (const YAML::Node h = node["heads"]) {
        if (!h.IsSequence()) throw ConfigError(where + ".heads: expected a list");
        std::vector<std::size_t> heads;
        for (const auto& e : h) heads.push_back(scalar<std::size_t>(e, where + ".heads"));
        spec.scope = spec.scope.with_heads(std::move(heads));
    }
    translate(where, [&] {
        spec.validate();
        return 0;
    });
    return scoped;
}

constexpr std::string_view kSpecKeys[] = {"name",  "kind",  "source",      "recipient", "target", "fraction",
                            "factor", "threshold", "alpha", "image_scale", "gamma", "scope",
                            "heads"};

DistractorMode parse_distractors(const YAML::Node& n, const std::string& where) {
    const auto s = scalar<std::string>(n, where);
    if (s == "same_category") return DistractorMode::SameCategory;
    if (s == "random") return DistractorMode::Random;
    throw ConfigError(where + ": expected same_category or random");
}

std::string_view distractor_name(DistractorMode m) {
    return m == DistractorMode::SameCategory ? "same_category" : "random";
}

bool valid_name(std::string_view name) {
    if (name.empty()) return false;
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '_' || c == '-' || c == '.' || c == '@' || c == '+';
        if (!ok) return false;
    }
    return true;
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string scope_text(const LayerScope& s) {
    std::string out;
    switch (s.selector) {
        case LayerSelector::Global: out = "global"; break;
        case LayerSelector::Quarter: out = "quarter " + std::to_string(s.quarter); break;
        case LayerSelector::LayerRange:
            out = "layers " + std::to_string(s.lo) + " " + std::to_string(s.hi);
            break;
    }
    for (std::size_t h : s.heads) out += " h" + std::to_string(h);
    return out;
}

std::string spec_text(const InterventionSpec& s) {
    std::ostringstream o;
    o << to_string(s.kind) << ' ' << to_string(s.source) << ' ' << to_string(s.recipient) << ' '
      << to_string(s.target) << ' ' << num(s.fraction) << ' ' << num(s.scale_factor) << ' '
      << num(s.adhh_threshold) << ' ' << num(s.pai_alpha) << ' ' << num(s.pai_image_scale) << ' '
      << num(s.pai_gamma) << " [" << scope_text(s.scope) << ']';
    return o.str();
}

}  // namespace

std::uint64_t ExperimentConfig::dataset_seed(std::size_t index) const {
    const DatasetSpec& d = datasets.at(index);
    return d.seed ? *d.seed : seed * 1000 + 100 + index;
}

std::vector<NamedIntervention> ExperimentConfig::expanded_interventions() const {
    std::vector<NamedIntervention> out{{std::string(kBaselineName), InterventionSpec::none()}};
    std::set<std::string> seen{std::string(kBaselineName)};
    for (const NamedIntervention& n : interventions) {
        if (n.spec.kind == InterventionKind::None) {
            if (n.name != kBaselineName) {
                throw ConfigError("intervention '" + n.name +
                                  "' has kind none; the baseline is added automatically");
            }
            continue;
        }
        if (!seen.insert(n.name).second) {
            throw ConfigError("duplicate intervention name '" + n.name + "'");
        }
        out.push_back(n);
    }
    return out;
}

void ExperimentConfig::validate() const {
    model.validate();
    VocabSchema schema;
    try {
        schema = VocabSchema::build(vocab);
    } catch (const SchemaError& e) {
        throw ConfigError(std::string("vocab: ") + e.what());
    }
    if (schema.vocab_size > model.vocab_size) {
        throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) +
                          " is smaller than the " + std::to_string(schema.vocab_size) +
                          " tokens the vocabulary needs");
    }
    if (model.yes_token_id != schema.yes_token || model.no_token_id != schema.no_token) {
        throw ConfigError("model answer token ids do not match the vocabulary");
    }
    if (training.has_value() == checkpoint.has_value()) {
        throw ConfigError("give exactly one of 'train' and 'checkpoint'");
    }
    auto check_len = [&](std::size_t image_len, const std::string& where) {
        const std::size_t len = vocab.system_len + image_len + 3;
        if (len > model.max_seq_len) {
            throw ConfigError(where + ": prompt length " + std::to_string(len) +
                              " exceeds model.max_seq_len " + std::to_string(model.max_seq_len));
        }
    };
    if (training) {
        training->train.validate();
        check_len(training->options.fine_image_len, "train.fine_image_len");
        check_len(training->options.coarse_image_len, "train.coarse_image_len");
    }
    if (datasets.empty()) throw ConfigError("at least one dataset is required");
    std::set<std::string> names;
    for (const DatasetSpec& d : datasets) {
        if (!valid_name(d.name)) throw ConfigError("invalid dataset name '" + d.name + "'");
        if (!names.insert(d.name).second) throw ConfigError("duplicate dataset name '" + d.name + "'");
        if (!d.path) check_len(d.image_len, "datasets." + d.name + ".image_len");
    }
    for (const NamedIntervention& n : interventions) {
        if (!valid_name(n.name)) throw ConfigError("invalid intervention name '" + n.name + "'");
        translate("interventions." + n.name, [&] {
            n.spec.validate();
            resolve_scope(n.spec.scope, model.layer_count, model.head_count);
            return 0;
        });
    }
    expanded_interventions();
    if (sweep) {
        if (!valid_name(sweep->name)) throw ConfigError("invalid sweep name '" + sweep->name + "'");
        expand_sweep(*sweep);
    }
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream o;
    o << "seed " << seed << '\n';
    o << "model " << model.layer_count << ' ' << model.head_count << ' ' << model.model_dim << ' '
      << model.feedforward_dim << ' ' << model.vocab_size << ' ' << model.max_seq_len << ' '
      << model.yes_token_id << ' ' << model.no_token_id << '\n';
    o << "vocab " << vocab.category_count << ' ' << vocab.objects_per_category << ' '
      << vocab.system_len << '\n';
    if (training) {
        const TrainConfig& t = training->train;
        o << "train " << (t.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << ' '
          << num(t.learning_rate) << ' ' << t.batch_size << ' ' << t.epoch_count << ' '
          << num(t.adam_beta1) << ' ' << num(t.adam_beta2) << ' ' << num(t.adam_epsilon) << ' '
          << (t.gradient_clip_norm ? num(*t.gradient_clip_norm) : "none") << ' ' << training->size
          << ' ' << num(training->yes_fraction) << ' ' << num(training->fine_fraction) << ' '
          << training->options.fine_image_len << ' ' << training->options.coarse_image_len << ' '
          << distractor_name(training->options.distractors) << '\n';
    }
    if (checkpoint) o << "checkpoint " << checkpoint->generic_string() << '\n';
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        const DatasetSpec& d = datasets[i];
        o << "dataset " << d.name << ' ';
        if (d.path) {
            o << "path " << d.path->generic_string();
        } else {
            o << to_string(d.family) << ' ' << d.pair_count << ' ' << d.image_len << ' '
              << dataset_seed(i) << ' ' << distractor_name(d.distractors);
        }
        o << '\n';
    }
    for (const NamedIntervention& n : interventions) {
        o << "intervention " << n.name << ' ' << spec_text(n.spec) << '\n';
    }
    if (sweep) {
        o << "sweep " << sweep->name << ' ' << spec_text(sweep->tmpl) << ' '
          << (sweep->global_graduated ? "graduated" : "quarters") << '\n';
    }
    return o.str();
}

std::uint64_t ExperimentConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : canonical()) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root || !root.IsMap()) throw ConfigError("config must be a YAML mapping");
    check_keys(root, "config",
               {"seed", "model", "vocab", "train", "checkpoint", "datasets", "interventions", "sweep",
                "output"});

    ExperimentConfig c;
    read(root, "seed", "seed", c.seed);

    if (const YAML::Node v = root["vocab"]) {
        check_keys(v, "vocab", {"categories", "objects_per_category", "system_len"});
        c.vocab.category_count = read_count(v, "categories", "vocab", c.vocab.category_count);
        c.vocab.objects_per_category =
            read_count(v, "objects_per_category", "vocab", c.vocab.objects_per_category);
        c.vocab.system_len = read_count(v, "system_len", "vocab", c.vocab.system_len);
    }
    try {
        const VocabSchema schema = VocabSchema::build(c.vocab);
        c.model.yes_token_id = schema.yes_token;
        c.model.no_token_id = schema.no_token;
    } catch (const SchemaError& e) {
        throw ConfigError(std::string("vocab: ") + e.what());
    }

    if (const YAML::Node m = root["model"]) {
        check_keys(m, "model", {"layers", "heads", "dim", "ff_dim", "vocab_size", "max_seq_len"});
        c.model.layer_count = read_count(m, "layers", "model", c.model.layer_count);
        c.model.head_count = read_count(m, "heads", "model", c.model.head_count);
        c.model.model_dim = read_count(m, "dim", "model", c.model.model_dim);
        c.model.feedforward_dim = read_count(m, "ff_dim", "model", c.model.feedforward_dim);
        c.model.vocab_size = read_count(m, "vocab_size", "model", c.model.vocab_size);
        c.model.max_seq_len = read_count(m, "max_seq_len", "model", c.model.max_seq_len);
    }

    if (const YAML::Node t = root["train"]) {
        check_keys(t, "train",
                   {"optimizer", "learning_rate", "batch_size", "epochs", "adam_beta1", "adam_beta2",
                    "adam_epsilon", "clip_norm", "size", "yes_fraction", "fine_fraction",
                    "fine_image_len", "coarse_image_len", "distractors"});
        TrainingSpec ts;
        TrainConfig& tc = ts.train;
        if (const YAML::Node o = t["optimizer"]) {
            const auto name = scalar<std::string>(o, "train.optimizer");
            if (name == "adam") {
                tc.optimizer = OptimizerKind::Adam;
            } else if (name == "sgd") {
                tc.optimizer = OptimizerKind::SGD;
            } else {
                throw ConfigError("train.optimizer: expected adam or sgd");
            }
        }
        read(t, "learning_rate", "train", tc.learning_rate);
        tc.batch_size = read_count(t, "batch_size", "train", tc.batch_size);
        tc.epoch_count = read_count(t, "epochs", "train", tc.epoch_count);
        read(t, "adam_beta1", "train", tc.adam_beta1);
        read(t, "adam_beta2", "train", tc.adam_beta2);
        read(t, "adam_epsilon", "train", tc.adam_epsilon);
        if (const YAML::Node n = t["clip_norm"]) {
            if (n.IsScalar() && n.Scalar() == "none") {
                tc.gradient_clip_norm.reset();
            } else {
                tc.gradient_clip_norm = scalar<double>(n, "train.clip_norm");
            }
        }
        ts.size = read_count(t, "size", "train", ts.size);
        read(t, "yes_fraction", "train", ts.yes_fraction);
        read(t, "fine_fraction", "train", ts.fine_fraction);
        ts.options.fine_image_len = read_count(t, "fine_image_len", "train", ts.options.fine_image_len);
        ts.options.coarse_image_len =
            read_count(t, "coarse_image_len", "train", ts.options.coarse_image_len);
        if (const YAML::Node n = t["distractors"]) {
            ts.options.distractors = parse_distractors(n, "train.distractors");
        }
        c.training = ts;
    }
    if (const YAML::Node ck = root["checkpoint"]) {
        c.checkpoint = resolve(base_dir, scalar<std::string>(ck, "checkpoint"));
    }

    const YAML::Node ds = root["datasets"];
    if (!ds || !ds.IsSequence()) throw ConfigError("datasets: expected a list");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const YAML::Node d = ds[i];
        const std::string where = "datasets[" + std::to_string(i) + "]";
        check_keys(d, where, {"name", "path", "family", "pairs", "image_len", "seed", "distractors"});
        DatasetSpec spec;
        if (!d["name"]) throw ConfigError(where + ": missing 'name'");
        spec.name = scalar<std::string>(d["name"], where + ".name");
        if (const YAML::Node p = d["path"]) {
            for (const char* k : {"family", "pairs", "image_len", "seed", "distractors"}) {
                if (d[k]) throw ConfigError(where + ": '" + k + "' does not apply to a dataset file");
            }
            spec.path = resolve(base_dir, scalar<std::string>(p, where + ".path"));
        } else {
            if (const YAML::Node f = d["family"]) {
                const auto fam = scalar<std::string>(f, where + ".family");
                if (fam != "fine" && fam != "coarse") {
                    throw ConfigError(where + ".family: expected fine or coarse");
                }
                spec.family = parse_task_family(fam);
            }
            spec.pair_count = read_count(d, "pairs", where, spec.pair_count);
            spec.image_len = read_count(d, "image_len", where,
                                        spec.family == TaskFamily::Fine ? 6 : 5);
            if (const YAML::Node s = d["seed"]) spec.seed = scalar<std::uint64_t>(s, where + ".seed");
            if (const YAML::Node m = d["distractors"]) {
                spec.distractors = parse_distractors(m, where + ".distractors");
            }
        }
        c.datasets.push_back(std::move(spec));
    }

    if (const YAML::Node iv = root["interventions"]) {
        if (!iv.IsSequence()) throw ConfigError("interventions: expected a list");
        for (std::size_t i = 0; i < iv.size(); ++i) {
            const YAML::Node n = iv[i];
            std::string where = "interventions[" + std::to_string(i) + "]";
            check_keys(n, where, kSpecKeys);
            if (!n["name"]) throw ConfigError(where + ": missing 'name'");
            NamedIntervention entry;
            entry.name = scalar<std::string>(n["name"], where + ".name");
            parse_spec_fields(n, where + " (" + entry.name + ")", entry.spec);
            c.interventions.push_back(std::move(entry));
        }
    }

    if (const YAML::Node sw = root["sweep"]) {
        check_keys(sw, "sweep", {"template", "global_graduated"});
        const YAML::Node t = sw["template"];
        if (!t) throw ConfigError("sweep: missing 'template'");
        check_keys(t, "sweep.template", kSpecKeys);
        SweepSpec s;
        s.name = t["name"] ? scalar<std::string>(t["name"], "sweep.template.name")
                           : std::string("sweep");
        s.scope_set = parse_spec_fields(t, "sweep.template", s.tmpl);
        read(sw, "global_graduated", "sweep", s.global_graduated);
        c.sweep = s;
    }

    if (const YAML::Node out = root["output"]) {
        check_keys(out, "output", {"report", "table", "checkpoint", "train_report"});
        auto path = [&](const char* key, std::optional<std::filesystem::path>& dst) {
            if (const YAML::Node n = out[key]) {
                dst = resolve(base_dir, scalar<std::string>(n, std::string("output.") + key));
            }
        };
        path("report", c.output.report);
        path("table", c.output.table);
        path("checkpoint", c.output.checkpoint);
        path("train_report", c.output.train_report);
    }

    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = binary::read_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text, path.parent_path());
}

}  // namespace attnlab
