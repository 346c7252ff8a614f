#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/inference.hpp"
#include "dialoglm/network.hpp"
#include "dialoglm/vocab.hpp"

#include "json.hpp"

namespace dialoglm {

// ---------------------------------------------------------------------------
// Text metrics over whitespace token vectors.
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kBleuEps = 1e-9;

// n-grams joined on an unprintable separator so they can live in flat sets.
inline std::vector<std::string> ngrams(const std::vector<std::string>& toks, int n) {
    std::vector<std::string> out;
    if (static_cast<int>(toks.size()) < n) return out;
    for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i) {
        std::string g = toks[i];
        for (int j = 1; j < n; ++j) {
            g.push_back('\x1f');
            g += toks[i + static_cast<size_t>(j)];
        }
        out.push_back(std::move(g));
    }
    return out;
}

inline std::map<std::string, int> ngram_counts(const std::vector<std::string>& toks, int n) {
    std::map<std::string, int> c;
    for (auto& g : ngrams(toks, n)) ++c[g];
    return c;
}

}  // namespace detail

// Cumulative BLEU-n: geometric mean of clipped i-gram precisions for i <= n,
// times the brevity penalty. Orders where the hypothesis has no i-grams
// count as perfect when the reference has none either (so bleu(x,x)=1 for
// any non-empty x) and as epsilon otherwise; zero precisions are floored at
// epsilon instead of collapsing the whole score through log(0).
inline double bleu_n(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                     int n) {
    if (n < 1 || n > 2) throw MetricError("bleu_n supports n in {1,2}");
    if (hyp.empty()) return 0.0;
    double log_sum = 0.0;
    for (int i = 1; i <= n; ++i) {
        const auto hc = detail::ngram_counts(hyp, i);
        const auto rc = detail::ngram_counts(ref, i);
        int denom = 0, matched = 0;
        for (const auto& [g, c] : hc) {
            denom += c;
            auto it = rc.find(g);
            if (it != rc.end()) matched += std::min(c, it->second);
        }
        double p;
        if (denom == 0) {
            p = rc.empty() ? 1.0 : detail::kBleuEps;
        } else {
            p = static_cast<double>(matched) / denom;
            if (p == 0.0) p = detail::kBleuEps;
        }
        log_sum += std::log(p);
    }
    const double gm = std::exp(log_sum / n);
    const double bp = hyp.size() >= ref.size()
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref.size()) / hyp.size());
    return bp * gm;
}

// Unique n-grams pooled across all responses divided by the total generated
// word count (the denominator is words for both orders). A corpus that
// generated no words at all scores 0.
inline double distinct_n(const std::vector<std::vector<std::string>>& responses, int n) {
    if (n < 1 || n > 2) throw MetricError("distinct_n supports n in {1,2}");
    if (responses.empty()) throw MetricError("distinct_n over an empty corpus");
    std::set<std::string> unique;
    size_t words = 0;
    for (const auto& r : responses) {
        words += r.size();
        for (auto& g : detail::ngrams(r, n)) unique.insert(std::move(g));
    }
    if (words == 0) return 0.0;
    return static_cast<double>(unique.size()) / static_cast<double>(words);
}

struct KnowledgePRF {
    double recall = 0.0, precision = 0.0, f1 = 0.0;
};

// Overlap of non-stopword unigram sets; empty knowledge yields all zeros by
// convention.
inline KnowledgePRF knowledge_prf(const std::vector<std::string>& response_tokens,
                                  const std::vector<std::string>& knowledge_tokens,
                                  const std::set<std::string>& stopwords) {
    auto content_set = [&](const std::vector<std::string>& toks) {
        std::set<std::string> s;
        for (const auto& t : toks) {
            if (!stopwords.count(t)) s.insert(t);
        }
        return s;
    };
    const auto know = content_set(knowledge_tokens);
    if (know.empty()) return {};
    const auto resp = content_set(response_tokens);
    size_t inter = 0;
    for (const auto& w : resp) inter += know.count(w);
    KnowledgePRF out;
    out.recall = static_cast<double>(inter) / static_cast<double>(know.size());
    out.precision = resp.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(resp.size());
    // Harmonic mean of the two ratios, reduced to a single division of
    // integers so the result is the correctly rounded value of the exact
    // fraction 2i / (|know| + |resp|).
    if (inter > 0) {
        out.f1 = 2.0 * static_cast<double>(inter) /
                 static_cast<double>(know.size() + resp.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stopwords.
// ---------------------------------------------------------------------------

inline const std::set<std::string>& builtin_stopwords() {
    static const std::set<std::string> words = {
        "a",    "an",    "the",   "and",   "or",    "but",   "if",    "then",  "so",    "of",
        "at",   "by",    "for",   "with",  "about", "against", "to",  "from",  "in",    "out",
        "on",   "off",   "over",  "under", "i",     "me",    "my",    "we",    "our",   "you",
        "your", "he",    "him",   "his",   "she",   "her",   "it",    "its",   "they",  "them",
        "their", "what", "which", "who",   "this",  "that",  "these", "those", "is",    "are"};
    return words;
}

inline std::set<std::string> load_stopwords(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MetricError("cannot open stopword file: " + path);
    std::set<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) words.insert(line);
    }
    if (words.empty()) throw MetricError("stopword file is empty: " + path);
    return words;
}

// ---------------------------------------------------------------------------
// Perplexity under the latent model.
// ---------------------------------------------------------------------------

enum class ZPolicy { Argmax, Sampled, Marginalized };

inline ZPolicy parse_z_policy(const std::string& s) {
    if (s == "argmax") return ZPolicy::Argmax;
    if (s == "sampled") return ZPolicy::Sampled;
    if (s == "marginalized") return ZPolicy::Marginalized;
    throw ConfigError("unknown z policy: " + s + " (argmax|sampled|marginalized)");
}

namespace detail {

inline double generation_nll(const Parameters& p, const Vocab& v, const DialogueSample& s,
                             int z) {
    auto in = compose_generation_input(v, p.config, s, z);
    Tape tape;
    auto fo = forward(tape, p, in);
    return nll_from_forward(tape, p, in, fo)->data[0];
}

}  // namespace detail

// exp( sum NLL / sum predicted tokens ) over the corpus. The latent value
// per sample follows the policy: posterior argmax (default), a posterior
// sample, or a uniform mixture over all K values folded with log-sum-exp.
inline double corpus_perplexity(const Parameters& p, const Vocab& v,
                                const std::vector<DialogueSample>& samples,
                                ZPolicy policy = ZPolicy::Argmax, Rng* rng = nullptr) {
    if (samples.empty()) throw MetricError("perplexity over an empty corpus");
    if (policy == ZPolicy::Sampled && rng == nullptr) {
        throw ConfigError("sampled z policy needs an rng");
    }
    double total_nll = 0.0;
    int64_t total_tokens = 0;
    for (const auto& s : samples) {
        const auto resp = v.encode(s.response, false);
        total_tokens += static_cast<int64_t>(resp.size()) + 1;  // + terminal [EOU]
        if (policy == ZPolicy::Marginalized) {
            std::vector<double> ll(static_cast<size_t>(p.config.latent_k));
            for (int z = 0; z < p.config.latent_k; ++z) {
                ll[static_cast<size_t>(z)] = -detail::generation_nll(p, v, s, z);
            }
            const double m = *std::max_element(ll.begin(), ll.end());
            double acc = 0.0;
            for (double x : ll) acc += std::exp(x - m);
            total_nll -= m + std::log(acc) - std::log(static_cast<double>(p.config.latent_k));
        } else {
            auto rec_in = compose_recognition_input(v, p.config, s, resp);
            Tape tape;
            auto rec = forward(tape, p, rec_in);
            const auto post = posterior_distribution(tape, p, rec);
            const int z = policy == ZPolicy::Argmax
                              ? static_cast<int>(std::max_element(post.begin(), post.end()) -
                                                 post.begin())
                              : rng->categorical(post);
            total_nll += detail::generation_nll(p, v, s, z);
        }
    }
    if (!std::isfinite(total_nll)) throw MetricError("non-finite corpus NLL");
    return std::exp(total_nll / static_cast<double>(total_tokens));
}

// ---------------------------------------------------------------------------
// Corpus evaluation: generate, select, score.
// ---------------------------------------------------------------------------

struct EvalReport {
    double bleu1 = 0.0, bleu2 = 0.0;
    double distinct1 = 0.0, distinct2 = 0.0;
    double knowledge_recall = 0.0, knowledge_precision = 0.0, knowledge_f1 = 0.0;
    double perplexity = 0.0;
    int64_t samples = 0;

    nlohmann::json to_json() const {
        return {{"bleu1", bleu1},
                {"bleu2", bleu2},
                {"distinct1", distinct1},
                {"distinct2", distinct2},
                {"knowledge_recall", knowledge_recall},
                {"knowledge_precision", knowledge_precision},
                {"knowledge_f1", knowledge_f1},
                {"perplexity", perplexity},
                {"samples", samples}};
    }
};

// One generated hypothesis together with the sample it answers; the JSON
// form is the line format of a predictions file (the reference is the
// sample's response).
struct PredictionRecord {
    DialogueSample sample;
    std::string hypothesis;
};

inline nlohmann::json prediction_to_json(const PredictionRecord& r) {
    nlohmann::json j = sample_to_json(r.sample);
    j["reference"] = j["response"];
    j.erase("response");
    j["hypothesis"] = r.hypothesis;
    return j;
}

inline PredictionRecord parse_prediction(const nlohmann::json& j, const std::string& where) {
    nlohmann::json as_sample = j;
    if (!as_sample.contains("reference") || !as_sample["reference"].is_string()) {
        throw CorpusError(where + ": missing 'reference' string");
    }
    if (!as_sample.contains("hypothesis") || !as_sample["hypothesis"].is_string()) {
        throw CorpusError(where + ": missing 'hypothesis' string");
    }
    as_sample["response"] = as_sample["reference"];
    PredictionRecord r;
    r.hypothesis = as_sample["hypothesis"].get<std::string>();
    as_sample.erase("reference");
    as_sample.erase("hypothesis");
    r.sample = parse_sample(as_sample, where);
    return r;
}

inline std::vector<PredictionRecord> load_predictions(std::istream& is, const std::string& name) {
    std::vector<PredictionRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusError(name + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(parse_prediction(j, name + ":" + std::to_string(lineno)));
    }
    return out;
}

struct EvalOptions {
    DecodeConfig decode;
    ZPolicy z_policy = ZPolicy::Argmax;
    // Candidate ranking: the selection head's coherence score, or an oracle
    // that peeks at the reference and keeps the candidate with the best
    // BLEU-1 (an upper bound on selection quality).
    enum class Selection { Coherence, OracleBleu1 } selection = Selection::Coherence;
};

struct EvalResult {
    EvalReport report;
    std::vector<PredictionRecord> predictions;
};

// Score a set of finished predictions: sentence-BLEU averaged over samples,
// distinct over the pooled hypotheses, knowledge metrics averaged over the
// samples that carry knowledge, and model perplexity of the references.
inline EvalReport evaluate_predictions(const Parameters& p, const Vocab& v,
                                       const std::vector<PredictionRecord>& predictions,
                                       const std::set<std::string>& stopwords,
                                       ZPolicy z_policy = ZPolicy::Argmax, Rng* rng = nullptr) {
    if (predictions.empty()) throw MetricError("no predictions to evaluate");
    EvalReport report;
    double bleu1 = 0.0, bleu2 = 0.0;
    KnowledgePRF ksum;
    int64_t with_knowledge = 0;
    std::vector<std::vector<std::string>> hyp_corpus;
    std::vector<DialogueSample> samples;
    for (const auto& r : predictions) {
        const auto ref_tokens = tokenize(r.sample.response);
        auto hyp_tokens = tokenize(r.hypothesis);
        bleu1 += bleu_n(hyp_tokens, ref_tokens, 1);
        bleu2 += bleu_n(hyp_tokens, ref_tokens, 2);
        std::vector<std::string> know_tokens;
        for (const auto& k : r.sample.knowledge) {
            for (auto& t : tokenize(k)) know_tokens.push_back(std::move(t));
        }
        if (!know_tokens.empty()) {
            const auto prf = knowledge_prf(hyp_tokens, know_tokens, stopwords);
            ksum.recall += prf.recall;
            ksum.precision += prf.precision;
            ksum.f1 += prf.f1;
            ++with_knowledge;
        }
        hyp_corpus.push_back(std::move(hyp_tokens));
        samples.push_back(r.sample);
    }
    const double n = static_cast<double>(predictions.size());
    report.bleu1 = bleu1 / n;
    report.bleu2 = bleu2 / n;
    report.distinct1 = distinct_n(hyp_corpus, 1);
    report.distinct2 = distinct_n(hyp_corpus, 2);
    if (with_knowledge > 0) {
        const double kn = static_cast<double>(with_knowledge);
        report.knowledge_recall = ksum.recall / kn;
        report.knowledge_precision = ksum.precision / kn;
        report.knowledge_f1 = ksum.f1 / kn;
    }
    report.perplexity = corpus_perplexity(p, v, samples, z_policy, rng);
    report.samples = static_cast<int64_t>(predictions.size());
    return report;
}

// Generate a hypothesis per sample (generate -> select), keeping the chosen
// ranking mode, then score.
inline EvalResult evaluate(const Parameters& p, const Vocab& v,
                           const std::vector<DialogueSample>& samples,
                           const std::set<std::string>& stopwords, const EvalOptions& opt = {},
                           Rng* rng = nullptr) {
    if (samples.empty()) throw MetricError("evaluation corpus is empty");
    EvalResult out;
    for (const auto& s : samples) {
        auto candidates = generate_candidates(p, v, s, opt.decode, rng);
        const Candidate* chosen;
        if (opt.selection == EvalOptions::Selection::OracleBleu1) {
            const auto ref_tokens = tokenize(s.response);
            chosen = &select_response_by(candidates, [&](const Candidate& c) {
                return bleu_n(tokenize(c.text), ref_tokens, 1);
            });
        } else {
            chosen = &select_response(candidates);
        }
        out.predictions.push_back({s, chosen->text});
    }
    out.report = evaluate_predictions(p, v, out.predictions, stopwords, opt.z_policy, rng);
    return out;
}

}  // namespace dialoglm
