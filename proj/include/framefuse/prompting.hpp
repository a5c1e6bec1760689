#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/common.hpp"

namespace ff::prompting {

inline constexpr int kMaxInputs = 5;   // images beyond this destabilize training
inline constexpr int kMaxOutputs = 3;

/// Input-image roles ("image prompt"). Outputs carry no role.
enum class Role { canvas = 0, asset = 1, control = 2 };

const char* role_name(Role r);
Role role_from_name(const std::string& name);

// closed context-tag vocabulary; static/dynamic are mutually exclusive
inline constexpr const char* kContextTags[] = {
    "realistic_style",  "synthetic_style",      "static_scenario",
    "dynamic_scenario", "with_reference_object", "perception_task",
};

bool is_context_tag(const std::string& tag);

/// Word-level vocabulary over the closed grammar. Referring words IMG1..IMG5
/// and RES1..RES3 are atomic special tokens; ids 0..13 form the reserved
/// special range, asserted on load.
struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kNull = 3;  // unconditional branch
    static constexpr int kUnk = 4;
    static constexpr int kImgBase = 5;   // IMG1..IMG5 -> 5..9
    static constexpr int kResBase = 10;  // RES1..RES3 -> 10..12
    static constexpr int kCtx = 13;      // "<ctx>" separator
    static constexpr int kSpecialEnd = 14;

    std::vector<std::string> id_to_word;
    std::unordered_map<std::string, int> word_to_id;

    static Vocabulary standard();

    int size() const { return int(id_to_word.size()); }
    int id(const std::string& word) const;               // kUnk when absent
    const std::string& word(int id) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);  // asserts special range
};

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

struct PromptBundle {
    std::string base_prompt;
    std::vector<std::string> context_tags;
    std::vector<Role> image_roles;
};

/// Canonical text form: base ++ " <ctx> " ++ sorted tags joined by ", ".
/// Image roles are embeddings, never text. Empty tag set leaves the base
/// prompt unchanged.
std::string assemble(const PromptBundle& bundle);

/// Binding of referring words to image slots. Entry k-1 of inputs gives the
/// slot of IMG<k>; words absent from the prompt keep their default slot k-1.
struct ReferenceMap {
    std::vector<int> inputs;    // size n_inputs
    std::vector<int> outputs;   // size n_outputs
    std::vector<bool> input_mentioned;
    std::vector<bool> output_mentioned;

    static ReferenceMap identity(int n_inputs, int n_outputs);
};

ReferenceMap resolve(const std::string& prompt, int n_inputs, int n_outputs);

}  // namespace ff::prompting
