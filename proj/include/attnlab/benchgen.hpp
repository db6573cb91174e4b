#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attnlab/decoder.hpp"
#include "attnlab/modality.hpp"

namespace attnlab {

struct SchemaConfig {
    std::size_t category_count = 8;
    std::size_t objects_per_category = 12;
    std::size_t system_len = 4;

    bool operator==(const SchemaConfig&) const = default;
};

// Token id assignment, in id order: system preamble (id 0 is BOS), yes, no,
// ask-present, ask-dominant, question mark, one token per category, then
// the object tokens grouped by category.
struct VocabSchema {
    SchemaConfig config;
    std::vector<TokenId> system_tokens;
    TokenId yes_token = 0;
    TokenId no_token = 0;
    TokenId ask_present = 0;
    TokenId ask_dominant = 0;
    TokenId question_mark = 0;
    std::vector<TokenId> category_tokens;
    std::vector<TokenId> object_tokens;
    std::size_t vocab_size = 0;

    // Throws SchemaError for fewer than 2 categories or objects per category.
    static VocabSchema build(const SchemaConfig& config);

    TokenId object(std::size_t category, std::size_t index) const;
    bool is_object(TokenId token) const;
    bool is_category(TokenId token) const;
    // Category index of an object token or of a category query token.
    std::size_t category_of(TokenId token) const;
};

enum class TaskFamily { Fine, Coarse };
enum class DistractorMode { SameCategory, Random };

std::string_view to_string(TaskFamily family);
TaskFamily parse_task_family(std::string_view name);

struct Prompt {
    std::uint32_t prompt_id = 0;
    std::optional<std::uint32_t> pair_id;
    TaskFamily family = TaskFamily::Fine;
    Answer label = Answer::No;
    std::vector<TokenId> tokens;
    ModalityLayout layout;

    bool operator==(const Prompt&) const = default;
};

struct PromptPair {
    std::uint32_t pair_id = 0;
    TaskFamily family = TaskFamily::Fine;
    Prompt prompt_yes;
    Prompt prompt_no;
};

enum class DatasetKind { Paired, Training };

struct Dataset {
    DatasetKind kind = DatasetKind::Paired;
    SchemaConfig schema;
    std::uint64_t seed = 0;
    double yes_fraction = 0.5;
    std::vector<Prompt> prompts;

    // Throws PairingError unless every pair id appears exactly once as yes
    // and once as no.
    std::vector<PromptPair> pairs() const;
    double empirical_yes_fraction() const;

    bool operator==(const Dataset&) const = default;
};

struct FineTaskOptions {
    DistractorMode distractors = DistractorMode::SameCategory;
};

// Pairs share an image bag of distinct objects; the yes prompt asks about a
// present object, the no prompt about an absent one. Pair members differ
// only in the queried-object slot.
Dataset generate_fine_task(const VocabSchema& schema, std::size_t pair_count,
                           std::size_t image_len, std::uint64_t seed,
                           FineTaskOptions options = {});

// The image bag has a strict majority category; the yes prompt asks about
// it, the no prompt about another category. image_len must be odd.
Dataset generate_coarse_task(const VocabSchema& schema, std::size_t pair_count,
                             std::size_t image_len, std::uint64_t seed);

struct TrainingSetOptions {
    std::size_t fine_image_len = 6;
    std::size_t coarse_image_len = 5;
    DistractorMode distractors = DistractorMode::SameCategory;
};

// Unpaired labelled prompts: exactly round(size * yes_fraction) yes labels
// and round(size * fine_fraction) fine-task prompts, in seeded order.
// Throws ConfigError for yes_fraction outside (0, 1), fine_fraction outside
// [0, 1], or size < 10.
Dataset generate_training_set(const VocabSchema& schema, std::size_t size, double yes_fraction,
                              double fine_fraction, std::uint64_t seed,
                              TrainingSetOptions options = {});

// Line-oriented text format:
//   attnlab-dataset 1
//   kind paired|training
//   seed <u64>
//   yes_fraction <double, round-trip precision>
//   schema <categories> <objects_per_category> <system_len>
//   prompts <count>
// then one tab-separated record per prompt:
//   prompt_id  pair_id|-  fine|coarse  yes|no  sys,img,txt  tok tok ...
std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view text);

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace attnlab
