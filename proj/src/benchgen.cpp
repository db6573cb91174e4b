#include "attnlab/benchgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "attnlab/binary_io.hpp"
#include "attnlab/errors.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

VocabSchema VocabSchema::build(const SchemaConfig& config) {
    if (config.category_count < 2) throw SchemaError("need at least 2 categories");
    if (config.objects_per_category < 2) throw SchemaError("need at least 2 objects per category");
    if (config.system_len < 1) throw SchemaError("system preamble needs at least one token");

    VocabSchema s;
    s.config = config;
    TokenId next = 0;
    for (std::size_t i = 0; i < config.system_len; ++i) s.system_tokens.push_back(next++);
    s.yes_token = next++;
    s.no_token = next++;
    s.ask_present = next++;
    s.ask_dominant = next++;
    s.question_mark = next++;
    for (std::size_t c = 0; c < config.category_count; ++c) s.category_tokens.push_back(next++);
    for (std::size_t i = 0; i < config.category_count * config.objects_per_category; ++i) {
        s.object_tokens.push_back(next++);
    }
    s.vocab_size = next;
    return s;
}

TokenId VocabSchema::object(std::size_t category, std::size_t index) const {
    return object_tokens[category * config.objects_per_category + index];
}

bool VocabSchema::is_object(TokenId token) const {
    return !object_tokens.empty() && token >= object_tokens.front() &&
           token <= object_tokens.back();
}

bool VocabSchema::is_category(TokenId token) const {
    return !category_tokens.empty() && token >= category_tokens.front() &&
           token <= category_tokens.back();
}

std::size_t VocabSchema::category_of(TokenId token) const {
    if (is_object(token)) return (token - object_tokens.front()) / config.objects_per_category;
    if (is_category(token)) return token - category_tokens.front();
    throw SchemaError("token " + std::to_string(token) + " has no category");
}

std::string_view to_string(TaskFamily family) {
    return family == TaskFamily::Fine ? "fine" : "coarse";
}

TaskFamily parse_task_family(std::string_view name) {
    if (name == "fine") return TaskFamily::Fine;
    if (name == "coarse") return TaskFamily::Coarse;
    throw ConfigError("unknown task family '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Dataset helpers
// ---------------------------------------------------------------------------

std::vector<PromptPair> Dataset::pairs() const {
    std::map<std::uint32_t, PromptPair> by_id;
    std::map<std::uint32_t, std::pair<int, int>> counts;  // (yes, no)
    for (const Prompt& p : prompts) {
        if (!p.pair_id) throw PairingError("prompt " + std::to_string(p.prompt_id) + " is unpaired");
        PromptPair& pair = by_id[*p.pair_id];
        pair.pair_id = *p.pair_id;
        pair.family = p.family;
        auto& [yes, no] = counts[*p.pair_id];
        if (p.label == Answer::Yes) {
            pair.prompt_yes = p;
            ++yes;
        } else {
            pair.prompt_no = p;
            ++no;
        }
    }
    std::vector<PromptPair> out;
    for (auto& [id, pair] : by_id) {
        if (counts[id] != std::pair{1, 1}) {
            throw PairingError("pair " + std::to_string(id) + " does not hold one yes and one no");
        }
        out.push_back(std::move(pair));
    }
    return out;
}

double Dataset::empirical_yes_fraction() const {
    if (prompts.empty()) return 0.0;
    const auto yes = std::count_if(prompts.begin(), prompts.end(),
                                   [](const Prompt& p) { return p.label == Answer::Yes; });
    return static_cast<double>(yes) / static_cast<double>(prompts.size());
}

namespace {

Prompt make_prompt(const VocabSchema& schema, std::uint32_t id, std::optional<std::uint32_t> pair,
                   TaskFamily family, Answer label, const std::vector<TokenId>& bag,
                   TokenId asked) {
    Prompt p;
    p.prompt_id = id;
    p.pair_id = pair;
    p.family = family;
    p.label = label;
    p.tokens = schema.system_tokens;
    p.tokens.insert(p.tokens.end(), bag.begin(), bag.end());
    p.tokens.push_back(family == TaskFamily::Fine ? schema.ask_present : schema.ask_dominant);
    p.tokens.push_back(asked);
    p.tokens.push_back(schema.question_mark);
    p.layout = build_layout(schema.system_tokens.size(), bag.size(), 3);
    return p;
}

struct FineItem {
    std::vector<TokenId> bag;
    TokenId present = 0;
    TokenId absent = 0;
};

void check_fine_feasible(const VocabSchema& schema, std::size_t image_len) {
    if (image_len < 2) throw SchemaError("fine task needs image_len >= 2");
    if (image_len >= schema.object_tokens.size()) {
        throw SchemaError("image bag would exhaust the object vocabulary");
    }
}

FineItem draw_fine(const VocabSchema& schema, std::size_t image_len, DistractorMode mode,
                   Rng& rng) {
    const std::size_t n_obj = schema.object_tokens.size();
    for (;;) {
        std::vector<TokenId> pool = schema.object_tokens;
        // Partial Fisher-Yates: the first image_len entries form the bag.
        for (std::size_t i = 0; i < image_len; ++i) {
            std::swap(pool[i], pool[i + static_cast<std::size_t>(rng.below(n_obj - i))]);
        }
        FineItem item;
        item.bag.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(image_len));
        item.present = item.bag[static_cast<std::size_t>(rng.below(image_len))];

        std::vector<TokenId> absent;
        const auto in_bag = [&](TokenId t) {
            return std::find(item.bag.begin(), item.bag.end(), t) != item.bag.end();
        };
        if (mode == DistractorMode::SameCategory) {
            const std::size_t cat = schema.category_of(item.present);
            for (std::size_t i = 0; i < schema.config.objects_per_category; ++i) {
                const TokenId t = schema.object(cat, i);
                if (!in_bag(t)) absent.push_back(t);
            }
            if (absent.empty()) {
                for (TokenId b : item.bag) {
                    const std::size_t c = schema.category_of(b);
                    for (std::size_t i = 0; i < schema.config.objects_per_category; ++i) {
                        const TokenId t = schema.object(c, i);
                        if (!in_bag(t) && std::find(absent.begin(), absent.end(), t) == absent.end()) {
                            absent.push_back(t);
                        }
                    }
                }
            }
        } else {
            for (TokenId t : schema.object_tokens) {
                if (!in_bag(t)) absent.push_back(t);
            }
        }
        if (absent.empty()) continue;
        item.absent = absent[static_cast<std::size_t>(rng.below(absent.size()))];
        return item;
    }
}

struct CoarseItem {
    std::vector<TokenId> bag;
    TokenId majority = 0;
    TokenId other = 0;
};

void check_coarse_feasible(const VocabSchema& schema, std::size_t image_len) {
    if (image_len < 1 || image_len % 2 == 0) {
        throw SchemaError("coarse task needs an odd image_len");
    }
    const std::size_t majority = image_len / 2 + 1;
    if (majority > schema.config.objects_per_category) {
        throw SchemaError("majority count exceeds objects per category");
    }
    if (image_len - majority > (schema.config.category_count - 1) *
                                   schema.config.objects_per_category) {
        throw SchemaError("not enough minority objects");
    }
}

CoarseItem draw_coarse(const VocabSchema& schema, std::size_t image_len, Rng& rng) {
    const std::size_t cats = schema.config.category_count;
    const std::size_t per = schema.config.objects_per_category;
    const std::size_t majority_count = image_len / 2 + 1;

    CoarseItem item;
    const std::size_t major = static_cast<std::size_t>(rng.below(cats));

    std::vector<std::size_t> idx(per);
    for (std::size_t i = 0; i < per; ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t i = 0; i < majority_count; ++i) item.bag.push_back(schema.object(major, idx[i]));

    std::vector<TokenId> minority_pool;
    for (std::size_t c = 0; c < cats; ++c) {
        if (c == major) continue;
        for (std::size_t i = 0; i < per; ++i) minority_pool.push_back(schema.object(c, i));
    }
    rng.shuffle(minority_pool);
    for (std::size_t i = 0; i < image_len - majority_count; ++i) item.bag.push_back(minority_pool[i]);
    rng.shuffle(item.bag);

    std::size_t other = static_cast<std::size_t>(rng.below(cats - 1));
    if (other >= major) ++other;
    item.majority = schema.category_tokens[major];
    item.other = schema.category_tokens[other];
    return item;
}

}  // namespace

Dataset generate_fine_task(const VocabSchema& schema, std::size_t pair_count,
                           std::size_t image_len, std::uint64_t seed, FineTaskOptions options) {
    check_fine_feasible(schema, image_len);
    Rng rng(seed);
    Dataset ds;
    ds.kind = DatasetKind::Paired;
    ds.schema = schema.config;
    ds.seed = seed;
    ds.yes_fraction = 0.5;
    for (std::uint32_t i = 0; i < pair_count; ++i) {
        const FineItem item = draw_fine(schema, image_len, options.distractors, rng);
        ds.prompts.push_back(make_prompt(schema, 2 * i, i, TaskFamily::Fine, Answer::Yes, item.bag,
                                         item.present));
        ds.prompts.push_back(make_prompt(schema, 2 * i + 1, i, TaskFamily::Fine, Answer::No,
                                         item.bag, item.absent));
    }
    return ds;
}

Dataset generate_coarse_task(const VocabSchema& schema, std::size_t pair_count,
                             std::size_t image_len, std::uint64_t seed) {
    check_coarse_feasible(schema, image_len);
    Rng rng(seed);
    Dataset ds;
    ds.kind = DatasetKind::Paired;
    ds.schema = schema.config;
    ds.seed = seed;
    ds.yes_fraction = 0.5;
    for (std::uint32_t i = 0; i < pair_count; ++i) {
        const CoarseItem item = draw_coarse(schema, image_len, rng);
        ds.prompts.push_back(make_prompt(schema, 2 * i, i, TaskFamily::Coarse, Answer::Yes,
                                         item.bag, item.majority));
        ds.prompts.push_back(make_prompt(schema, 2 * i + 1, i, TaskFamily::Coarse, Answer::No,
                                         item.bag, item.other));
    }
    return ds;
}

Dataset generate_training_set(const VocabSchema& schema, std::size_t size, double yes_fraction,
                              double fine_fraction, std::uint64_t seed,
                              TrainingSetOptions options) {
    if (!(yes_fraction > 0.0 && yes_fraction < 1.0)) {
        throw ConfigError("yes_fraction must lie in (0, 1)");
    }
    if (!(fine_fraction >= 0.0 && fine_fraction <= 1.0)) {
        throw ConfigError("fine_fraction must lie in [0, 1]");
    }
    if (size < 10) throw ConfigError("training set size must be at least 10");

    const auto n_yes = static_cast<std::size_t>(std::llround(static_cast<double>(size) * yes_fraction));
    const auto n_fine =
        static_cast<std::size_t>(std::llround(static_cast<double>(size) * fine_fraction));
    if (n_fine > 0) check_fine_feasible(schema, options.fine_image_len);
    if (n_fine < size) check_coarse_feasible(schema, options.coarse_image_len);

    Rng rng(seed);
    std::vector<Answer> labels(size, Answer::No);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_yes), Answer::Yes);
    std::vector<TaskFamily> families(size, TaskFamily::Coarse);
    std::fill(families.begin(), families.begin() + static_cast<std::ptrdiff_t>(n_fine),
              TaskFamily::Fine);
    rng.shuffle(labels);
    rng.shuffle(families);

    Dataset ds;
    ds.kind = DatasetKind::Training;
    ds.schema = schema.config;
    ds.seed = seed;
    ds.yes_fraction = yes_fraction;
    for (std::uint32_t i = 0; i < size; ++i) {
        const bool yes = labels[i] == Answer::Yes;
        if (families[i] == TaskFamily::Fine) {
            const FineItem item = draw_fine(schema, options.fine_image_len, options.distractors, rng);
            ds.prompts.push_back(make_prompt(schema, i, std::nullopt, TaskFamily::Fine, labels[i],
                                             item.bag, yes ? item.present : item.absent));
        } else {
            const CoarseItem item = draw_coarse(schema, options.coarse_image_len, rng);
            ds.prompts.push_back(make_prompt(schema, i, std::nullopt, TaskFamily::Coarse, labels[i],
                                             item.bag, yes ? item.majority : item.other));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_number(std::string_view s, std::string_view what) {
    T value{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw FormatError("malformed " + std::string(what) + ": '" + std::string(s) + "'");
    }
    return value;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

class LineReader {
public:
    explicit LineReader(std::string_view text) : text_(text) {}

    std::string_view next() {
        if (pos_ >= text_.size()) throw FormatError("unexpected end of dataset file");
        const std::size_t nl = text_.find('\n', pos_);
        const std::size_t end = nl == std::string_view::npos ? text_.size() : nl;
        std::string_view line = text_.substr(pos_, end - pos_);
        pos_ = end + 1;
        ++line_no_;
        return line;
    }

    // "key value" header line.
    std::string_view field(std::string_view key) {
        const std::string_view line = next();
        if (line.substr(0, key.size()) != key || line.size() <= key.size() ||
            line[key.size()] != ' ') {
            throw FormatError("line " + std::to_string(line_no_) + ": expected '" +
                              std::string(key) + "'");
        }
        return line.substr(key.size() + 1);
    }

    bool done() const { return pos_ >= text_.size(); }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t line_no_ = 0;
};

}  // namespace

std::string encode_dataset(const Dataset& ds) {
    std::ostringstream out;
    out << "attnlab-dataset 1\n";
    out << "kind " << (ds.kind == DatasetKind::Paired ? "paired" : "training") << '\n';
    out << "seed " << ds.seed << '\n';
    out << "yes_fraction " << format_double(ds.yes_fraction) << '\n';
    out << "schema " << ds.schema.category_count << ' ' << ds.schema.objects_per_category << ' '
        << ds.schema.system_len << '\n';
    out << "prompts " << ds.prompts.size() << '\n';
    for (const Prompt& p : ds.prompts) {
        out << p.prompt_id << '\t';
        if (p.pair_id) {
            out << *p.pair_id;
        } else {
            out << '-';
        }
        out << '\t' << to_string(p.family) << '\t' << (p.label == Answer::Yes ? "yes" : "no")
            << '\t' << p.layout.length(Modality::System) << ',' << p.layout.length(Modality::Image)
            << ',' << p.layout.length(Modality::Text) << '\t';
        for (std::size_t i = 0; i < p.tokens.size(); ++i) {
            if (i > 0) out << ' ';
            out << p.tokens[i];
        }
        out << '\n';
    }
    return out.str();
}

Dataset decode_dataset(std::string_view text) {
    LineReader in(text);
    if (in.next() != "attnlab-dataset 1") throw FormatError("not an attnlab dataset (bad magic)");
    Dataset ds;
    const std::string_view kind = in.field("kind");
    if (kind == "paired") {
        ds.kind = DatasetKind::Paired;
    } else if (kind == "training") {
        ds.kind = DatasetKind::Training;
    } else {
        throw FormatError("unknown dataset kind '" + std::string(kind) + "'");
    }
    ds.seed = parse_number<std::uint64_t>(in.field("seed"), "seed");
    ds.yes_fraction = parse_number<double>(in.field("yes_fraction"), "yes_fraction");
    const auto schema = split(in.field("schema"), ' ');
    if (schema.size() != 3) throw FormatError("schema line needs three integers");
    ds.schema.category_count = parse_number<std::size_t>(schema[0], "schema");
    ds.schema.objects_per_category = parse_number<std::size_t>(schema[1], "schema");
    ds.schema.system_len = parse_number<std::size_t>(schema[2], "schema");
    const auto count = parse_number<std::size_t>(in.field("prompts"), "prompt count");

    for (std::size_t i = 0; i < count; ++i) {
        const auto cols = split(in.next(), '\t');
        if (cols.size() != 6) throw FormatError("prompt record needs 6 tab-separated fields");
        Prompt p;
        p.prompt_id = parse_number<std::uint32_t>(cols[0], "prompt id");
        if (cols[1] != "-") p.pair_id = parse_number<std::uint32_t>(cols[1], "pair id");
        if (cols[2] == "fine") {
            p.family = TaskFamily::Fine;
        } else if (cols[2] == "coarse") {
            p.family = TaskFamily::Coarse;
        } else {
            throw FormatError("unknown task family '" + std::string(cols[2]) + "'");
        }
        if (cols[3] == "yes") {
            p.label = Answer::Yes;
        } else if (cols[3] == "no") {
            p.label = Answer::No;
        } else {
            throw FormatError("label must be yes or no");
        }
        const auto spans = split(cols[4], ',');
        if (spans.size() != 3) throw FormatError("span field needs three lengths");
        try {
            p.layout = build_layout(parse_number<std::size_t>(spans[0], "span"),
                                    parse_number<std::size_t>(spans[1], "span"),
                                    parse_number<std::size_t>(spans[2], "span"));
        } catch (const InvalidLayout& e) {
            throw FormatError(std::string("prompt layout: ") + e.what());
        }
        for (std::string_view tok : split(cols[5], ' ')) {
            p.tokens.push_back(parse_number<TokenId>(tok, "token id"));
        }
        if (p.tokens.size() != p.layout.prompt_len()) {
            throw FormatError("prompt " + std::to_string(p.prompt_id) +
                              ": token count disagrees with span lengths");
        }
        ds.prompts.push_back(std::move(p));
    }
    if (!in.done()) throw FormatError("trailing data after the declared prompt count");
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    binary::write_file(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) {
    return decode_dataset(binary::read_file(path));
}

}  // namespace attnlab
