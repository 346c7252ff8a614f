#pragma once

#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialoglm/errors.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/vocab.hpp"

namespace dialoglm {

enum class Speaker : char { A = 'A', B = 'B' };

struct Utterance {
    Speaker speaker = Speaker::A;
    std::string text;
};

// One training/eval unit. The response is spoken by A by convention.
struct DialogueSample {
    std::vector<Utterance> context;
    std::vector<std::string> knowledge;
    std::string response;
};

// One pre-training unit: the sample plus a randomly drawn negative
// response (labels are implicit: response -> 1, negative -> 0).
struct TrainingPair {
    const DialogueSample* sample = nullptr;
    std::vector<int> negative_response;
};

inline DialogueSample parse_sample(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw CorpusError(where + ": expected a JSON object");
    DialogueSample s;
    if (!j.contains("context") || !j["context"].is_array()) {
        throw CorpusError(where + ": missing 'context' array");
    }
    for (const auto& u : j["context"]) {
        if (!u.is_object() || !u.contains("speaker") || !u.contains("text")) {
            throw CorpusError(where + ": each context entry needs 'speaker' and 'text'");
        }
        const std::string sp = u["speaker"].get<std::string>();
        if (sp != "A" && sp != "B") {
            throw CorpusError(where + ": speaker must be 'A' or 'B', got '" + sp + "'");
        }
        s.context.push_back({sp == "A" ? Speaker::A : Speaker::B, u["text"].get<std::string>()});
    }
    if (j.contains("knowledge")) {
        if (!j["knowledge"].is_array()) throw CorpusError(where + ": 'knowledge' must be an array");
        for (const auto& k : j["knowledge"]) s.knowledge.push_back(k.get<std::string>());
    }
    if (!j.contains("response") || !j["response"].is_string()) {
        throw CorpusError(where + ": missing 'response' string");
    }
    s.response = j["response"].get<std::string>();
    return s;
}

inline nlohmann::json sample_to_json(const DialogueSample& s) {
    nlohmann::json j;
    j["context"] = nlohmann::json::array();
    for (const auto& u : s.context) {
        j["context"].push_back({{"speaker", std::string(1, static_cast<char>(u.speaker))},
                                {"text", u.text}});
    }
    if (!s.knowledge.empty()) j["knowledge"] = s.knowledge;
    j["response"] = s.response;
    return j;
}

// Line-delimited JSON, one sample per line. Blank lines are skipped.
inline std::vector<DialogueSample> load_corpus(std::istream& in, const std::string& name) {
    std::vector<DialogueSample> samples;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusError(name + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        samples.push_back(parse_sample(j, name + ":" + std::to_string(lineno)));
    }
    return samples;
}

inline std::vector<DialogueSample> load_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus file: " + path);
    return load_corpus(in, path);
}

// Requires non-empty context and response on every sample (evaluation
// corpora share the loader; trainers call this first).
inline void require_trainable(const std::vector<DialogueSample>& samples) {
    if (samples.empty()) throw CorpusError("corpus is empty");
    for (size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].context.empty()) {
            throw CorpusError("sample " + std::to_string(i) + " has an empty context");
        }
        if (samples[i].response.empty()) {
            throw CorpusError("sample " + std::to_string(i) + " has an empty response");
        }
    }
}

inline std::map<std::string, long> count_tokens(const std::vector<DialogueSample>& samples) {
    std::map<std::string, long> counts;
    auto tally = [&counts](const std::string& text) {
        for (const auto& tok : tokenize(text)) ++counts[tok];
    };
    for (const auto& s : samples) {
        for (const auto& u : s.context) tally(u.text);
        for (const auto& k : s.knowledge) tally(k);
        tally(s.response);
    }
    return counts;
}

inline Vocab build_vocab(const std::vector<DialogueSample>& samples, int latent_k,
                         int min_freq, int max_size) {
    if (samples.empty()) throw CorpusError("cannot build a vocab from an empty corpus");
    return Vocab::build(count_tokens(samples), latent_k, min_freq, max_size);
}

// Uniform draws over the corpus responses, rejecting token-identical
// matches with the excluded response.
class NegativeSampler {
public:
    NegativeSampler(const Vocab& vocab, const std::vector<DialogueSample>& samples) {
        for (const auto& s : samples) responses_.push_back(vocab.encode(s.response, false));
    }

    explicit NegativeSampler(std::vector<std::vector<int>> responses)
        : responses_(std::move(responses)) {}

    const std::vector<int>& sample(const std::vector<int>& exclude, Rng& rng) const {
        if (responses_.empty()) throw SamplingError("no responses to sample negatives from");
        for (int attempt = 0; attempt < 100; ++attempt) {
            const auto& cand = responses_[static_cast<size_t>(
                rng.uniform_int(static_cast<int>(responses_.size())))];
            if (cand != exclude) return cand;
        }
        throw SamplingError("could not draw a negative distinct from the response");
    }

    size_t size() const { return responses_.size(); }

private:
    std::vector<std::vector<int>> responses_;
};

}  // namespace dialoglm
