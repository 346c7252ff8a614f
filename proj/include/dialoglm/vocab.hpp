#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dialoglm/errors.hpp"

namespace dialoglm {

// Whitespace-and-punctuation tokenizer: lowercases, splits on whitespace,
// and emits each punctuation character as its own token.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (const unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (c < 128 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

// Token <-> id map with fixed reserved ids, a contiguous block of K latent
// tokens right after them, then corpus tokens ordered by frequency.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBou = 2;
    static constexpr int kEou = 3;
    static constexpr int kMask = 4;
    static constexpr int kLatentBase = 5;

    Vocab() = default;

    // counts: token -> frequency over the corpus. max_size caps the total
    // vocab size; reserved and latent tokens are always kept.
    static Vocab build(const std::map<std::string, long>& counts, int latent_k,
                       int min_freq, int max_size) {
        if (counts.empty()) throw CorpusError("cannot build a vocab from an empty corpus");
        Vocab v;
        v.reserve_specials(latent_k);
        std::vector<std::pair<std::string, long>> kept;
        for (const auto& [tok, freq] : counts) {
            if (freq >= min_freq) kept.emplace_back(tok, freq);
        }
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        const size_t budget = max_size > static_cast<int>(v.tokens_.size())
                                  ? static_cast<size_t>(max_size) - v.tokens_.size()
                                  : 0;
        if (kept.size() > budget) kept.resize(budget);
        for (const auto& [tok, freq] : kept) v.push(tok);
        return v;
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw CorpusError("cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            v.push(line);
        }
        v.check_layout();
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw CorpusError("cannot write vocab file: " + path);
        for (const auto& t : tokens_) out << t << "\n";
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int latent_k() const { return latent_k_; }
    int latent_id(int k) const { return kLatentBase + k; }
    bool is_latent(int id) const { return id >= kLatentBase && id < kLatentBase + latent_k_; }
    bool is_special(int id) const { return id < kLatentBase + latent_k_; }

    int id(const std::string& token) const {
        const auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) > 0; }

    const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }

    std::vector<int> encode(const std::string& text, bool append_eou) const {
        std::vector<int> ids;
        for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
        if (append_eou) ids.push_back(kEou);
        return ids;
    }

    std::string decode(std::span<const int> ids, bool skip_special = true) const {
        std::string out;
        for (const int i : ids) {
            if (skip_special && is_special(i)) continue;
            if (!out.empty()) out.push_back(' ');
            out += token(i);
        }
        return out;
    }

private:
    void reserve_specials(int latent_k) {
        latent_k_ = latent_k;
        for (const char* t : {"[PAD]", "[UNK]", "[BOU]", "[EOU]", "[MASK]"}) push(t);
        for (int k = 0; k < latent_k; ++k) push("[Z_" + std::to_string(k) + "]");
    }

    void push(const std::string& token) {
        index_.emplace(token, static_cast<int>(tokens_.size()));
        tokens_.push_back(token);
    }

    void check_layout() {
        static const char* expected[] = {"[PAD]", "[UNK]", "[BOU]", "[EOU]", "[MASK]"};
        if (tokens_.size() < 5) throw CorpusError("vocab file too short");
        for (int i = 0; i < 5; ++i) {
            if (tokens_[i] != expected[i]) {
                throw CorpusError("vocab file: id " + std::to_string(i) + " must be " +
                                  expected[i]);
            }
        }
        latent_k_ = 0;
        for (size_t i = kLatentBase; i < tokens_.size(); ++i) {
            if (tokens_[i] == "[Z_" + std::to_string(latent_k_) + "]") ++latent_k_;
            else break;
        }
        if (latent_k_ == 0) throw CorpusError("vocab file has no latent tokens");
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int latent_k_ = 0;
};

}  // namespace dialoglm
