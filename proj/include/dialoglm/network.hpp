#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/representation.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/tensor.hpp"
#include "dialoglm/vocab.hpp"

namespace dialoglm {

// ---------------------------------------------------------------------------
// Model weights. Linear weights are stored [in, out] so that a forward
// application is a plain matmul of row-major activations. The token table
// doubles as the LM output projection (weight tying); rows 0 of the role,
// turn and position tables are the pinned-to-zero "empty" slots and never
// receive gradient.
// ---------------------------------------------------------------------------

struct BlockWeights {
    TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    TensorPtr ln1_gain, ln1_bias;
    TensorPtr ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    TensorPtr ln2_gain, ln2_bias;
};

struct Parameters {
    ModelConfig config;
    TensorPtr token_table;   // [V, D]
    TensorPtr latent_table;  // [K, D]
    TensorPtr role_table;    // [4, D] (empty, speaker A, speaker B, knowledge)
    TensorPtr turn_table;    // [turn_rows, D]
    TensorPtr pos_table;     // [pos_rows, D]
    std::vector<BlockWeights> blocks;
    TensorPtr post_w, post_b;  // [D, K], [K]: latent posterior head
    TensorPtr bow_w, bow_b;    // [D, V], [V]: bag-of-words head
    TensorPtr rs_w, rs_b;      // [D, 1], [1]: response-selection head

    // The latent table and the posterior head start wider than the rest so
    // the K latent slots are distinguishable from step one; everything else
    // follows the usual small-transformer init.
    static constexpr double kInitStd = 0.02;
    static constexpr double kLatentInitStd = 0.1;
    // The posterior head receives no gradient (the latent value is a
    // discrete sample), so its init scale permanently fixes how decisively
    // the recognition state is hashed into latent cells. A unit-scale
    // projection keeps the posterior sharp enough that distinct responses
    // land in distinct cells instead of blurring across all of them.
    static constexpr double kPosteriorInitStd = 1.0;

    static Parameters init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        if (cfg.vocab_size <= 0) throw ConfigError("vocab_size must be set before init");
        Parameters p;
        p.config = cfg;
        const int d = cfg.hidden;
        auto weight = [&](std::vector<int> shape, double std_dev) {
            auto t = Tensor::create(std::move(shape), true);
            t->fill_normal(rng, std_dev);
            return t;
        };
        auto zeros = [](std::vector<int> shape) { return Tensor::create(std::move(shape), true); };
        auto ones = [](std::vector<int> shape) {
            auto t = Tensor::create(std::move(shape), true);
            std::fill(t->data.begin(), t->data.end(), 1.0);
            return t;
        };
        auto pinned = [&](int rows) {
            auto t = weight({rows, d}, kInitStd);
            std::fill_n(t->data.begin(), d, 0.0);
            return t;
        };
        p.token_table = weight({cfg.vocab_size, d}, kInitStd);
        p.latent_table = weight({cfg.latent_k, d}, kLatentInitStd);
        p.role_table = pinned(4);
        p.turn_table = pinned(cfg.turn_rows());
        p.pos_table = pinned(cfg.pos_rows());
        for (int b = 0; b < cfg.layers; ++b) {
            BlockWeights bw;
            bw.wq = weight({d, d}, kInitStd);
            bw.bq = zeros({d});
            bw.wk = weight({d, d}, kInitStd);
            bw.bk = zeros({d});
            bw.wv = weight({d, d}, kInitStd);
            bw.bv = zeros({d});
            bw.wo = weight({d, d}, kInitStd);
            bw.bo = zeros({d});
            bw.ln1_gain = ones({d});
            bw.ln1_bias = zeros({d});
            bw.ffn_w1 = weight({d, 4 * d}, kInitStd);
            bw.ffn_b1 = zeros({4 * d});
            bw.ffn_w2 = weight({4 * d, d}, kInitStd);
            bw.ffn_b2 = zeros({d});
            bw.ln2_gain = ones({d});
            bw.ln2_bias = zeros({d});
            p.blocks.push_back(std::move(bw));
        }
        p.post_w = weight({d, cfg.latent_k}, kPosteriorInitStd);
        p.post_b = zeros({cfg.latent_k});
        p.bow_w = weight({d, cfg.vocab_size}, kInitStd);
        p.bow_b = zeros({cfg.vocab_size});
        p.rs_w = weight({d, 1}, kInitStd);
        p.rs_b = zeros({1});
        return p;
    }

    // Canonical (name, tensor) enumeration; checkpoint layout and optimizer
    // slot order both follow this.
    template <class F>
    void for_each(F&& f) const {
        f("embed.token", token_table);
        f("embed.latent", latent_table);
        f("embed.role", role_table);
        f("embed.turn", turn_table);
        f("embed.pos", pos_table);
        for (size_t b = 0; b < blocks.size(); ++b) {
            const auto& bw = blocks[b];
            const std::string pre = "block" + std::to_string(b) + ".";
            f(pre + "attn.wq", bw.wq);
            f(pre + "attn.bq", bw.bq);
            f(pre + "attn.wk", bw.wk);
            f(pre + "attn.bk", bw.bk);
            f(pre + "attn.wv", bw.wv);
            f(pre + "attn.bv", bw.bv);
            f(pre + "attn.wo", bw.wo);
            f(pre + "attn.bo", bw.bo);
            f(pre + "ln1.gain", bw.ln1_gain);
            f(pre + "ln1.bias", bw.ln1_bias);
            f(pre + "ffn.w1", bw.ffn_w1);
            f(pre + "ffn.b1", bw.ffn_b1);
            f(pre + "ffn.w2", bw.ffn_w2);
            f(pre + "ffn.b2", bw.ffn_b2);
            f(pre + "ln2.gain", bw.ln2_gain);
            f(pre + "ln2.bias", bw.ln2_bias);
        }
        f("head.posterior.w", post_w);
        f("head.posterior.b", post_b);
        f("head.bow.w", bow_w);
        f("head.bow.b", bow_b);
        f("head.select.w", rs_w);
        f("head.select.b", rs_b);
    }

    std::vector<std::pair<std::string, TensorPtr>> named() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for_each([&](const std::string& n, const TensorPtr& t) { out.emplace_back(n, t); });
        return out;
    }

    // Row 0 of the role/turn/position tables is the pinned "empty" slot.
    bool coordinate_trainable(const std::string& name, int64_t flat) const {
        if (name == "embed.role" || name == "embed.turn" || name == "embed.pos") {
            return flat >= config.hidden;
        }
        return true;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for_each([&](const std::string&, const TensorPtr& t) { n += t->numel(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

struct ForwardOutputs {
    TensorPtr hidden;  // [S, D] final-layer states
    TensorPtr h0;      // [1, D] final state of the first slot ([Z_z] or [MASK])
};

// Input vectors are the sum of token, role, turn and position embeddings.
// A latent first slot draws its token part from the latent table; role,
// turn and position ids are shifted by one so kEmptyId lands on the pinned
// row 0.
inline TensorPtr embed_input(Tape& tape, const Parameters& p, const ComposedInput& in) {
    const int s = in.length();
    if (s == 0) throw ShapeError("cannot embed an empty input");
    TensorPtr tok;
    if (in.segment[0] == Segment::Latent) {
        const int z = in.token_ids[0] - Vocab::kLatentBase;
        if (z < 0 || z >= p.config.latent_k) {
            throw LatentRangeError("latent token id " + std::to_string(in.token_ids[0]) +
                                   " outside the latent block");
        }
        auto head = embedding_rows(tape, p.latent_table, {z});
        if (s == 1) {
            tok = head;
        } else {
            std::vector<int> rest(in.token_ids.begin() + 1, in.token_ids.end());
            tok = concat_rows(tape, {head, embedding_rows(tape, p.token_table, std::move(rest))});
        }
    } else {
        tok = embedding_rows(tape, p.token_table, in.token_ids);
    }
    auto shifted = [](const std::vector<int>& ids) {
        std::vector<int> rows(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) rows[i] = ids[i] + 1;
        return rows;
    };
    auto role = embedding_rows(tape, p.role_table, shifted(in.role_ids), true);
    auto turn = embedding_rows(tape, p.turn_table, shifted(in.turn_ids), true);
    auto pos = embedding_rows(tape, p.pos_table, shifted(in.position_ids), true);
    return add(tape, add(tape, tok, role), add(tape, turn, pos));
}

namespace detail {

inline TensorPtr attention(Tape& tape, const BlockWeights& bw, const TensorPtr& x,
                           const TensorPtr& mask, int heads, double drop_rate, Rng* drop_rng) {
    const int d = x->cols();
    const int dh = d / heads;
    auto q = add_rowwise(tape, matmul(tape, x, bw.wq), bw.bq);
    auto k = add_rowwise(tape, matmul(tape, x, bw.wk), bw.bk);
    auto v = add_rowwise(tape, matmul(tape, x, bw.wv), bw.bv);
    std::vector<TensorPtr> merged;
    merged.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
        auto kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
        auto vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
        auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)),
                            1.0 / std::sqrt(static_cast<double>(dh)));
        auto probs = masked_softmax(tape, scores, mask);
        if (drop_rate > 0.0) probs = dropout(tape, probs, drop_rate, *drop_rng);
        merged.push_back(matmul(tape, probs, vh));
    }
    auto joined = heads == 1 ? merged[0] : concat_cols(tape, merged);
    return add_rowwise(tape, matmul(tape, joined, bw.wo), bw.bo);
}

}  // namespace detail

// Shared transformer body; the attention mask carried by the input is the
// only thing distinguishing the generation pass from the recognition pass.
inline ForwardOutputs forward(Tape& tape, const Parameters& p, const ComposedInput& in,
                              bool training = false, Rng* drop_rng = nullptr) {
    const int s = in.length();
    if (static_cast<int>(in.attn_mask.size()) != s * s) {
        throw MaskError("attention mask size does not match input length");
    }
    const double drop_rate = training ? p.config.dropout : 0.0;
    if (drop_rate > 0.0 && drop_rng == nullptr) {
        throw ConfigError("dropout requires a dropout rng in training mode");
    }
    std::vector<double> mvals(in.attn_mask.begin(), in.attn_mask.end());
    auto mask = Tensor::from({s, s}, std::move(mvals));
    auto x = embed_input(tape, p, in);
    for (const auto& bw : p.blocks) {
        auto a = detail::attention(tape, bw, x, mask, p.config.heads, drop_rate, drop_rng);
        if (drop_rate > 0.0) a = dropout(tape, a, drop_rate, *drop_rng);
        x = layer_norm(tape, add(tape, x, a), bw.ln1_gain, bw.ln1_bias);
        auto f = add_rowwise(tape, matmul(tape, x, bw.ffn_w1), bw.ffn_b1);
        f = gelu(tape, f);
        f = add_rowwise(tape, matmul(tape, f, bw.ffn_w2), bw.ffn_b2);
        if (drop_rate > 0.0) f = dropout(tape, f, drop_rate, *drop_rng);
        x = layer_norm(tape, add(tape, x, f), bw.ln2_gain, bw.ln2_bias);
    }
    return {x, slice_rows(tape, x, 0, 1)};
}

// ---------------------------------------------------------------------------
// Heads.
// ---------------------------------------------------------------------------

// Next-token logits over the full vocabulary, tied to the token table.
inline TensorPtr lm_logits(Tape& tape, const Parameters& p, const TensorPtr& rows) {
    return matmul(tape, rows, transpose(tape, p.token_table));
}

inline TensorPtr posterior_logits(Tape& tape, const Parameters& p, const TensorPtr& h0) {
    return add_rowwise(tape, matmul(tape, h0, p.post_w), p.post_b);
}

inline TensorPtr bow_logits(Tape& tape, const Parameters& p, const TensorPtr& h0) {
    return add_rowwise(tape, matmul(tape, h0, p.bow_w), p.bow_b);
}

inline TensorPtr select_logit(Tape& tape, const Parameters& p, const TensorPtr& h0) {
    return add_rowwise(tape, matmul(tape, h0, p.rs_w), p.rs_b);
}

inline std::vector<double> softmax_values(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("softmax of an empty vector");
    double maxv = logits[0];
    for (double v : logits) maxv = std::max(maxv, v);
    std::vector<double> out(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - maxv);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

// Posterior p(z | context, response) evaluated on a finished recognition pass.
inline std::vector<double> posterior_distribution(Tape& tape, const Parameters& p,
                                                  const ForwardOutputs& rec) {
    auto logits = posterior_logits(tape, p, rec.h0);
    return softmax_values(logits->data);
}

// ---------------------------------------------------------------------------
// Losses. All return shape-{1} tensors on the tape.
// ---------------------------------------------------------------------------

// Teacher-forced token NLL on a generation pass: the state at [BOU] predicts
// the first response token and the last response token's state predicts the
// terminal [EOU].
inline TensorPtr nll_from_forward(Tape& tape, const Parameters& p, const ComposedInput& in,
                                  const ForwardOutputs& fo) {
    if (in.response_start < 0) throw ShapeError("generation input has no response segment");
    auto targets = in.lm_targets();
    if (targets.empty()) throw LengthError("no response tokens to predict");
    auto rows = slice_rows(tape, fo.hidden, in.response_start, in.length() - 1);
    return cross_entropy_sum(tape, lm_logits(tape, p, rows), std::move(targets));
}

// Order-free bag-of-words loss from the latent slot's final state; covers
// every response word occurrence, not the terminal [EOU].
inline TensorPtr bow_from_forward(Tape& tape, const Parameters& p, const ComposedInput& in,
                                  const ForwardOutputs& fo) {
    if (in.response_start < 0) throw ShapeError("generation input has no response segment");
    std::vector<int> words(in.token_ids.begin() + in.response_start + 1,
                           in.token_ids.end() - 1);
    if (words.empty()) return Tensor::scalar(0.0);
    // The loss is a sum over an unordered multiset of words; sorting makes it
    // bitwise independent of the original token order.
    std::sort(words.begin(), words.end());
    auto logits = bow_logits(tape, p, fo.h0);
    auto stacked = repeat_rows(tape, logits, static_cast<int>(words.size()));
    return cross_entropy_sum(tape, stacked, std::move(words));
}

// Binary selection loss over one positive and one negative recognition pass.
inline TensorPtr rs_from_forwards(Tape& tape, const Parameters& p, const ForwardOutputs& pos,
                                  const ForwardOutputs& neg) {
    auto lp = bce_with_logits(tape, select_logit(tape, p, pos.h0), 1.0);
    auto ln = bce_with_logits(tape, select_logit(tape, p, neg.h0), 0.0);
    return add(tape, lp, ln);
}

// ---------------------------------------------------------------------------
// Full per-pair training objective: recognition pass over the true response
// -> posterior -> sampled z -> generation pass -> NLL + BOW, plus the
// selection loss against a negative recognition pass. The sampled z enters
// only as an embedding index; no gradient flows through the sampling.
// ---------------------------------------------------------------------------

struct LossGraph {
    TensorPtr nll, bow, rs, total;
    std::vector<double> posterior;
    int z = -1;
};

inline LossGraph build_losses(Tape& tape, const Parameters& p, const Vocab& v,
                              const TrainingPair& pair, Rng& z_rng, bool training = true,
                              Rng* drop_rng = nullptr) {
    const DialogueSample& sample = *pair.sample;
    LossGraph g;

    auto rec_in = compose_recognition_input(v, p.config, sample, v.encode(sample.response, false));
    auto rec = forward(tape, p, rec_in, training, drop_rng);
    g.posterior = posterior_distribution(tape, p, rec);
    g.z = training ? z_rng.categorical(g.posterior)
                   : static_cast<int>(std::max_element(g.posterior.begin(), g.posterior.end()) -
                                      g.posterior.begin());

    auto neg_in = compose_recognition_input(v, p.config, sample, pair.negative_response);
    auto neg = forward(tape, p, neg_in, training, drop_rng);
    g.rs = rs_from_forwards(tape, p, rec, neg);

    auto gen_in = compose_generation_input(v, p.config, sample, g.z);
    auto gen = forward(tape, p, gen_in, training, drop_rng);
    g.nll = nll_from_forward(tape, p, gen_in, gen);
    g.bow = bow_from_forward(tape, p, gen_in, gen);

    g.total = add(tape, add(tape, g.nll, g.bow), g.rs);
    return g;
}

}  // namespace dialoglm
