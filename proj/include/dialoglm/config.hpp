#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "dialoglm/errors.hpp"

namespace dialoglm {

// Model hyperparameters. Desk-scale defaults; the large-scale values
// (12 layers, 768 hidden, K=20, 256/50 sequence limits) remain reachable
// through the config file.
struct ModelConfig {
    int layers = 3;
    int hidden = 64;
    int heads = 4;
    int latent_k = 5;
    int vocab_size = 0;  // filled in once the vocab is built or loaded
    int max_context_len = 64;
    int max_response_len = 16;
    double dropout = 0.0;

    void validate() const {
        if (layers < 0) throw ConfigError("model.layers must be >= 0");
        if (hidden <= 0 || heads <= 0 || hidden % heads != 0) {
            throw ConfigError("model.hidden must be a positive multiple of model.heads");
        }
        if (latent_k < 2) throw ConfigError("model.latent_k must be >= 2");
        if (max_context_len <= 0 || max_response_len <= 0) {
            throw ConfigError("sequence limits must be positive");
        }
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0,1)");
    }

    // Longest composed sequence: latent/mask + context budget + BOU + response + EOU.
    int max_seq_len() const { return 1 + max_context_len + max_response_len + 2; }

    // Turn ids run 0..max_context_len; row 0 is the pinned empty row, so
    // turn id t lives at row t+1.
    int turn_rows() const { return max_context_len + 2; }

    // Positions reset per utterance; the longest utterance is bounded by the
    // context budget or the response incl. BOU/EOU.
    int pos_rows() const { return std::max(max_context_len, max_response_len + 2) + 1; }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](uint64_t v) {
            h ^= v;
            h *= 0x100000001b3ull;
            h ^= h >> 29;
        };
        mix(static_cast<uint64_t>(layers));
        mix(static_cast<uint64_t>(hidden));
        mix(static_cast<uint64_t>(heads));
        mix(static_cast<uint64_t>(latent_k));
        mix(static_cast<uint64_t>(vocab_size));
        mix(static_cast<uint64_t>(max_context_len));
        mix(static_cast<uint64_t>(max_response_len));
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(dropout));
        std::memcpy(&bits, &dropout, sizeof(bits));
        mix(bits);
        return h;
    }
};

struct TrainerConfig {
    int steps = 500;           // optimizer steps
    int batch_size = 8;        // pairs accumulated per optimizer step
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int checkpoint_every = 500;
    int log_every = 10;

    void validate() const {
        if (steps < 0) throw ConfigError("trainer.steps must be >= 0");
        if (batch_size <= 0) throw ConfigError("trainer.batch_size must be > 0");
        if (lr < 0.0) throw ConfigError("trainer.lr must be >= 0");
        if (checkpoint_every <= 0 || log_every <= 0) {
            throw ConfigError("trainer intervals must be > 0");
        }
    }
};

struct DecodeConfig {
    enum class Mode { Greedy, TopK };
    Mode mode = Mode::Greedy;
    int top_k = 5;
    double temperature = 1.0;

    void validate() const {
        if (top_k <= 0) throw ConfigError("decode.top_k must be > 0");
        if (temperature <= 0.0) throw ConfigError("decode.temperature must be > 0");
    }
};

// Everything a run needs, loadable from a flat `key = value` file
// (a TOML-compatible subset: dotted keys, `#` comments, quoted strings).
// Unknown keys are a hard error.
struct RunConfig {
    ModelConfig model;
    TrainerConfig trainer;
    DecodeConfig decode;
    uint64_t seed = 42;
    int vocab_min_freq = 1;
    int vocab_max_size = 8192;
    std::string stopwords_path;

    void validate() const {
        model.validate();
        trainer.validate();
        decode.validate();
        if (vocab_min_freq < 1) throw ConfigError("vocab.min_freq must be >= 1");
        if (vocab_max_size < 1) throw ConfigError("vocab.max_size must be >= 1");
    }

    void set(const std::string& key, const std::string& raw);

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        RunConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
            }
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
                value = value.substr(1, value.size() - 2);
            }
            try {
                cfg.set(key, value);
            } catch (const ConfigError& e) {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        cfg.validate();
        return cfg;
    }
};

namespace detail {

inline int to_int(const std::string& s) {
    size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw ConfigError("expected an integer, got '" + s + "'");
    return v;
}

inline double to_double(const std::string& s) {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ConfigError("expected a number, got '" + s + "'");
    return v;
}

inline uint64_t to_u64(const std::string& s) {
    size_t pos = 0;
    const uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw ConfigError("expected an unsigned integer, got '" + s + "'");
    return v;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
    using detail::to_double;
    using detail::to_int;
    using detail::to_u64;
    if (key == "model.layers") model.layers = to_int(raw);
    else if (key == "model.hidden") model.hidden = to_int(raw);
    else if (key == "model.heads") model.heads = to_int(raw);
    else if (key == "model.latent_k") model.latent_k = to_int(raw);
    else if (key == "model.max_context_len") model.max_context_len = to_int(raw);
    else if (key == "model.max_response_len") model.max_response_len = to_int(raw);
    else if (key == "model.dropout") model.dropout = to_double(raw);
    else if (key == "trainer.steps") trainer.steps = to_int(raw);
    else if (key == "trainer.batch_size") trainer.batch_size = to_int(raw);
    else if (key == "trainer.lr") trainer.lr = to_double(raw);
    else if (key == "trainer.beta1") trainer.beta1 = to_double(raw);
    else if (key == "trainer.beta2") trainer.beta2 = to_double(raw);
    else if (key == "trainer.eps") trainer.eps = to_double(raw);
    else if (key == "trainer.checkpoint_every") trainer.checkpoint_every = to_int(raw);
    else if (key == "trainer.log_every") trainer.log_every = to_int(raw);
    else if (key == "decode.mode") {
        if (raw == "greedy") decode.mode = DecodeConfig::Mode::Greedy;
        else if (raw == "top_k") decode.mode = DecodeConfig::Mode::TopK;
        else throw ConfigError("decode.mode must be 'greedy' or 'top_k'");
    } else if (key == "decode.top_k") decode.top_k = to_int(raw);
    else if (key == "decode.temperature") decode.temperature = to_double(raw);
    else if (key == "seed") seed = to_u64(raw);
    else if (key == "vocab.min_freq") vocab_min_freq = to_int(raw);
    else if (key == "vocab.max_size") vocab_max_size = to_int(raw);
    else if (key == "stopwords") stopwords_path = raw;
    else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace dialoglm
