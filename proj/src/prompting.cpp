#include "framefuse/prompting.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ff::prompting {

using nlohmann::json;

const char* role_name(Role r) {
    switch (r) {
        case Role::canvas: return "canvas";
        case Role::asset: return "asset";
        case Role::control: return "control";
    }
    return "canvas";
}

Role role_from_name(const std::string& name) {
    if (name == "canvas") return Role::canvas;
    if (name == "asset") return Role::asset;
    if (name == "control") return Role::control;
    throw VocabularyError("unknown image role: " + name);
}

bool is_context_tag(const std::string& tag) {
    for (const char* t : kContextTags)
        if (tag == t) return true;
    return false;
}

namespace {

// every non-special word the caption/instruction/prompt grammar can emit
const char* kGrammarWords[] = {
    // colors
    "black", "white", "green", "red", "blue", "yellow", "purple", "orange",
    // shapes
    "square", "circle", "triangle",
    // coarse positions
    "upper", "middle", "lower", "left", "center", "right",
    // connectives and verbs
    "a", "an", "the", "and", "in", "on", "to", "from", "of", "with",
    "empty", "background", "object", "scene",
    "turn", "remove", "add", "move", "make", "change", "enlarge", "shrink",
    "segment", "predict", "depth", "edge", "map",
    // punctuation
    ",", ".",
};

// split a whitespace word into grammar tokens, peeling trailing punctuation
void split_word(const std::string& w, std::vector<std::string>& out) {
    size_t end = w.size();
    std::vector<std::string> suffix;
    while (end > 0 && (w[end - 1] == ',' || w[end - 1] == '.')) {
        suffix.push_back(std::string(1, w[end - 1]));
        end--;
    }
    if (end > 0) out.push_back(w.substr(0, end));
    for (auto it = suffix.rbegin(); it != suffix.rend(); ++it) out.push_back(*it);
}

std::vector<std::string> grammar_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) split_word(w, words);
    return words;
}

}  // namespace

Vocabulary Vocabulary::standard() {
    Vocabulary v;
    auto push = [&](const std::string& w) {
        v.word_to_id.emplace(w, int(v.id_to_word.size()));
        v.id_to_word.push_back(w);
    };
    push("<pad>");
    push("<bos>");
    push("<eos>");
    push("<null>");
    push("<unk>");
    for (int k = 1; k <= kMaxInputs; k++) push("IMG" + std::to_string(k));
    for (int m = 1; m <= kMaxOutputs; m++) push("RES" + std::to_string(m));
    push("<ctx>");
    for (const char* t : kContextTags) push(t);
    for (const char* w : kGrammarWords) push(w);
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = word_to_id.find(word);
    return it == word_to_id.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw VocabularyError("token id out of range");
    return id_to_word[size_t(id)];
}

json Vocabulary::to_json() const {
    return {{"version", 1}, {"words", id_to_word}};
}

Vocabulary Vocabulary::from_json(const json& j) {
    Vocabulary v;
    for (const json& w : j.at("words")) {
        std::string word = w.get<std::string>();
        v.word_to_id.emplace(word, int(v.id_to_word.size()));
        v.id_to_word.push_back(word);
    }
    // reserved special range must be contiguous and in place
    Vocabulary expect = standard();
    if (v.size() < kSpecialEnd) throw VocabularyError("vocabulary missing special tokens");
    for (int i = 0; i < kSpecialEnd; i++)
        if (v.id_to_word[size_t(i)] != expect.id_to_word[size_t(i)])
            throw VocabularyError("special token range corrupted at id " + std::to_string(i));
    return v;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids{Vocabulary::kBos};
    for (const std::string& w : grammar_words(text)) ids.push_back(vocab.id(w));
    ids.push_back(Vocabulary::kEos);
    return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
        const std::string& w = vocab.word(id);
        bool punct = w == "," || w == ".";
        if (!out.empty() && !punct) out += " ";
        out += w;
    }
    return out;
}

std::string assemble(const PromptBundle& bundle) {
    std::vector<std::string> tags = bundle.context_tags;
    for (const std::string& t : tags)
        if (!is_context_tag(t)) throw VocabularyError("unknown context tag: " + t);
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    if (tags.empty()) return bundle.base_prompt;
    std::string out = bundle.base_prompt + " <ctx> ";
    for (size_t i = 0; i < tags.size(); i++) {
        if (i > 0) out += ", ";
        out += tags[i];
    }
    return out;
}

ReferenceMap ReferenceMap::identity(int n_inputs, int n_outputs) {
    ReferenceMap m;
    for (int i = 0; i < n_inputs; i++) m.inputs.push_back(i);
    for (int i = 0; i < n_outputs; i++) m.outputs.push_back(i);
    m.input_mentioned.assign(size_t(n_inputs), false);
    m.output_mentioned.assign(size_t(n_outputs), false);
    return m;
}

ReferenceMap resolve(const std::string& prompt, int n_inputs, int n_outputs) {
    if (n_inputs < 0 || n_inputs > kMaxInputs)
        throw CapacityError("input count outside [0, " + std::to_string(kMaxInputs) + "]");
    if (n_outputs < 1 || n_outputs > kMaxOutputs)
        throw CapacityError("output count outside [1, " + std::to_string(kMaxOutputs) + "]");
    ReferenceMap map = ReferenceMap::identity(n_inputs, n_outputs);
    for (const std::string& w : grammar_words(prompt)) {
        if (w.size() == 4 && w.compare(0, 3, "IMG") == 0 && w[3] >= '1' && w[3] <= '9') {
            int k = w[3] - '0';
            if (k > n_inputs)
                throw ReferenceError("dangling reference " + w + ": only " +
                                     std::to_string(n_inputs) + " input images");
            if (map.input_mentioned[size_t(k - 1)])
                throw ReferenceError("duplicate reference " + w);
            map.input_mentioned[size_t(k - 1)] = true;
        } else if (w.size() == 4 && w.compare(0, 3, "RES") == 0 && w[3] >= '1' && w[3] <= '9') {
            int m = w[3] - '0';
            if (m > n_outputs)
                throw ReferenceError("dangling reference " + w + ": only " +
                                     std::to_string(n_outputs) + " output images");
            if (map.output_mentioned[size_t(m - 1)])
                throw ReferenceError("duplicate reference " + w);
            map.output_mentioned[size_t(m - 1)] = true;
        }
    }
    return map;
}

}  // namespace ff::prompting
