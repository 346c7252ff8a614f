#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/network.hpp"
#include "dialoglm/representation.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/vocab.hpp"

namespace dialoglm {

struct Candidate {
    int z = -1;
    std::vector<int> tokens;  // ends with [EOU] unless max length was hit
    std::string text;
    double coherence = 0.0;      // p(coherent | context, response), in (0,1)
    double log_likelihood = 0.0;  // sum of model log-probs of the emitted tokens
};

namespace detail {

inline double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Structural tokens never make sense as generated text; only [EOU] (the stop
// signal) and real words are eligible next tokens.
inline bool emittable(int id, const Vocab& v) {
    return id == Vocab::kEou || id >= Vocab::kLatentBase + v.latent_k();
}

struct NextToken {
    int id;
    double log_prob;  // under the full-vocabulary model distribution
};

inline NextToken pick_next(const std::vector<double>& logits, const Vocab& v,
                           const DecodeConfig& dc, Rng* rng) {
    const auto full = softmax_values(logits);
    int chosen = -1;
    if (dc.mode == DecodeConfig::Mode::Greedy) {
        for (int i = 0; i < static_cast<int>(logits.size()); ++i) {
            if (!emittable(i, v)) continue;
            if (chosen < 0 || logits[i] > logits[chosen]) chosen = i;
        }
    } else {
        if (rng == nullptr) throw ConfigError("top-k decoding needs an rng");
        std::vector<int> order;
        for (int i = 0; i < static_cast<int>(logits.size()); ++i) {
            if (emittable(i, v)) order.push_back(i);
        }
        const int k = std::min<int>(dc.top_k, static_cast<int>(order.size()));
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [&](int a, int b) { return logits[a] > logits[b]; });
        order.resize(static_cast<size_t>(k));
        std::vector<double> scaled(order.size());
        for (size_t i = 0; i < order.size(); ++i) scaled[i] = logits[order[i]] / dc.temperature;
        chosen = order[static_cast<size_t>(rng->categorical(softmax_values(scaled)))];
    }
    if (chosen < 0) throw SamplingError("no emittable token available");
    return {chosen, std::log(full[static_cast<size_t>(chosen)])};
}

}  // namespace detail

// Decode one response conditioned on latent value z: grow the response
// token by token under the generation mask, stopping at [EOU] or after
// max_response_len words.
inline Candidate decode_candidate(const Parameters& p, const Vocab& v,
                                  const DialogueSample& context, int z, const DecodeConfig& dc,
                                  Rng* rng = nullptr) {
    dc.validate();
    Candidate cand;
    cand.z = z;
    std::vector<int> words;
    for (int step = 0; step < p.config.max_response_len; ++step) {
        auto in = compose_generation_prefix(v, p.config, context, z, words);
        Tape tape;
        auto fo = forward(tape, p, in);
        auto last = slice_rows(tape, fo.hidden, in.length() - 1, in.length());
        auto logits = lm_logits(tape, p, last);
        auto next = detail::pick_next(logits->data, v, dc, rng);
        cand.log_likelihood += next.log_prob;
        if (next.id == Vocab::kEou) {
            cand.tokens.push_back(Vocab::kEou);
            break;
        }
        words.push_back(next.id);
        cand.tokens.push_back(next.id);
    }
    cand.text = v.decode(cand.tokens);
    return cand;
}

// Recognition pass over (context, candidate response) scored by the
// selection head.
inline double score_coherence(const Parameters& p, const Vocab& v, const DialogueSample& context,
                              std::vector<int> tokens) {
    if (!tokens.empty() && tokens.back() == Vocab::kEou) tokens.pop_back();
    auto in = compose_recognition_input(v, p.config, context, tokens);
    Tape tape;
    auto fo = forward(tape, p, in);
    auto logit = select_logit(tape, p, fo.h0);
    return detail::sigmoid_value(logit->data[0]);
}

// One scored candidate per latent value, in z order.
inline std::vector<Candidate> generate_candidates(const Parameters& p, const Vocab& v,
                                                  const DialogueSample& context,
                                                  const DecodeConfig& dc, Rng* rng = nullptr) {
    std::vector<Candidate> out;
    out.reserve(static_cast<size_t>(p.config.latent_k));
    for (int z = 0; z < p.config.latent_k; ++z) {
        auto cand = decode_candidate(p, v, context, z, dc, rng);
        cand.coherence = score_coherence(p, v, context, cand.tokens);
        out.push_back(std::move(cand));
    }
    return out;
}

// Argmax by an arbitrary score; ties go to the earliest candidate, which is
// the lowest z when the list is in generation order.
inline const Candidate& select_response_by(const std::vector<Candidate>& candidates,
                                           const std::function<double(const Candidate&)>& score) {
    if (candidates.empty()) throw SelectionError("no candidates to select from");
    size_t best = 0;
    double best_score = score(candidates[0]);
    for (size_t i = 1; i < candidates.size(); ++i) {
        const double s = score(candidates[i]);
        if (s > best_score) {
            best = i;
            best_score = s;
        }
    }
    return candidates[best];
}

inline const Candidate& select_response(const std::vector<Candidate>& candidates) {
    return select_response_by(candidates, [](const Candidate& c) { return c.coherence; });
}

// ---------------------------------------------------------------------------
// Interactive chat. The human speaks as B, the model as A; each model turn
// is generate -> score -> select over the rolling context. Lines starting
// with '#' are status output, so scripted sessions can filter them.
// ---------------------------------------------------------------------------

inline void chat_loop(const Parameters& p, const Vocab& v, const DecodeConfig& dc,
                      std::istream& in, std::ostream& out, bool debug = false,
                      Rng* rng = nullptr) {
    std::vector<Utterance> context;
    std::string line;
    while (std::getline(in, line)) {
        if (line == "/quit") break;
        if (line == "/reset") {
            context.clear();
            out << "# context cleared\n";
            continue;
        }
        if (line == "/debug") {
            debug = !debug;
            out << (debug ? "# debug on\n" : "# debug off\n");
            continue;
        }
        context.push_back({Speaker::B, line});
        DialogueSample sample;
        sample.context = context;
        std::vector<Candidate> candidates;
        try {
            candidates = generate_candidates(p, v, sample, dc, rng);
        } catch (const LengthError&) {
            out << "# input too long, ignored\n";
            context.pop_back();
            continue;
        }
        if (debug) {
            for (const auto& c : candidates) {
                out << "[z=" << c.z << "] coherence=" << c.coherence << " | " << c.text << "\n";
            }
        }
        const Candidate& chosen = select_response(candidates);
        out << chosen.text << "\n";
        out.flush();
        context.push_back({Speaker::A, chosen.text});
        // The composer trims to max_context_len on every turn; the stored
        // history just needs a cap so a long session cannot grow unboundedly.
        const size_t cap = static_cast<size_t>(2 * p.config.max_context_len);
        if (context.size() > cap) {
            context.erase(context.begin(), context.end() - static_cast<long>(cap));
        }
    }
}

}  // namespace dialoglm
