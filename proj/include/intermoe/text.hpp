#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include "intermoe/autodiff.hpp"

namespace intermoe {

// Fixed 64-word vocabulary covering the synthetic interaction descriptors.
inline const std::array<std::string, 64>& vocabulary() {
    static const std::array<std::string, 64> words = {
        "two",     "people",   "persons",  "person",    "one",       "a",
        "the",     "and",      "while",    "other",     "each",      "walk",
        "walks",   "toward",   "meet",     "approach",  "advances",  "slowly",
        "quickly", "circles",  "circle",   "around",    "orbits",    "partner",
        "partners","clockwise","counterclockwise",      "dance",     "with",
        "mirrored","mirror",   "movements","sway",      "in",        "symmetric",
        "pushes",  "push",     "forward",  "retreats",  "retreat",   "shoves",
        "steps",   "back",     "away",     "apart",     "together",  "closer",
        "distance","close",    "far",      "spin",      "turn",      "face",
        "facing",  "arms",     "raised",   "side",      "by",        "gently",
        "firmly",  "pace",     "steady",   "moves",     "backward"};
    return words;
}

inline int vocab_id(const std::string& word) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return static_cast<int>(i);
    throw ConfigError("unknown vocabulary word: '" + word + "'");
}

inline std::vector<int> tokenize(const std::string& text) {
    std::istringstream is(text);
    std::vector<int> ids;
    std::string w;
    while (is >> w) ids.push_back(vocab_id(w));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocabulary().at(static_cast<size_t>(ids[i]));
    }
    return out;
}

// Token id sequence plus its pooled embedding.
struct TextCondition {
    std::vector<int> tokens;
    Tensor<float> embedding;  // {1, D_t}
};

// Learned token-embedding table with mean pooling. Trained jointly with the
// denoiser; empty token lists map to the zero vector.
template <typename T>
struct TextEncoder {
    int width;
    Var<T> table;  // {V, D_t}

    TextEncoder(int d_t, uint64_t seed) : width(d_t) {
        auto rng = make_rng(seed);
        Tensor<T> w = Tensor<T>::randn({static_cast<int>(vocabulary().size()), d_t}, rng);
        for (auto& v : w.data) v *= static_cast<T>(0.02);
        table = Var<T>::leaf(std::move(w), true);
    }

    Var<T> encode_var(const std::vector<int>& tokens) const {
        for (int t : tokens)
            if (t < 0 || t >= static_cast<int>(vocabulary().size()))
                throw ConfigError("token id " + std::to_string(t) + " outside vocabulary");
        if (tokens.empty()) return Var<T>::constant(Tensor<T>::zeros({1, width}));
        auto rows = take_rows(table, tokens);
        Tensor<T> pool({1, static_cast<int>(tokens.size())},
                       std::vector<T>(tokens.size(), T(1) / static_cast<T>(tokens.size())));
        return matmul(Var<T>::constant(std::move(pool)), rows);
    }

    Tensor<float> encode(const std::vector<int>& tokens) const {
        NoGradGuard ng;
        return encode_var(tokens).value().template cast<float>();
    }
};

}  // namespace intermoe
