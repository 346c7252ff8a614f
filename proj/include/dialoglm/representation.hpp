#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/vocab.hpp"

namespace dialoglm {

enum class Segment : uint8_t { Latent, Mask, Context, Knowledge, Response };

// Role ids as stored in ComposedInput. kEmptyId marks the slots whose
// role/turn/position embeddings are the pinned all-zero rows (the latent
// and mask positions, and the turn slot of knowledge segments).
constexpr int kEmptyId = -1;
constexpr int kRoleA = 0;
constexpr int kRoleB = 1;
constexpr int kRoleKnowledge = 2;

// One fully laid-out pass input: parallel id lists of length S plus the
// S x S attention mask. role/turn/position use kEmptyId for empty slots;
// embedding lookup maps value v to table row v+1 and kEmptyId to row 0.
struct ComposedInput {
    std::vector<int> token_ids;
    std::vector<int> role_ids;
    std::vector<int> turn_ids;
    std::vector<int> position_ids;
    std::vector<Segment> segment;
    std::vector<uint8_t> attn_mask;  // S*S row-major, 1 = may attend
    int response_start = -1;         // index of [BOU], -1 if no response segment

    int length() const { return static_cast<int>(token_ids.size()); }

    // Prediction targets for the generation pass: the tokens after [BOU],
    // including the terminal [EOU]. Position p predicts token_ids[p+1] for
    // p in [response_start, length()-2].
    std::vector<int> lm_targets() const {
        std::vector<int> t;
        for (int p = response_start + 1; p < length(); ++p) t.push_back(token_ids[p]);
        return t;
    }
};

// Bi-directional among {latent, knowledge, context}; those rows never see
// the response. Response rows see all non-response positions plus response
// positions up to and including themselves.
inline std::vector<uint8_t> build_generation_mask(const std::vector<Segment>& segments) {
    const int s = static_cast<int>(segments.size());
    std::vector<uint8_t> mask(static_cast<size_t>(s) * s, 0);
    for (int i = 0; i < s; ++i) {
        const bool row_resp = segments[i] == Segment::Response;
        for (int j = 0; j < s; ++j) {
            const bool col_resp = segments[j] == Segment::Response;
            uint8_t allow = 0;
            if (!col_resp) allow = 1;
            else if (row_resp && j <= i) allow = 1;
            mask[static_cast<size_t>(i) * s + j] = allow;
        }
    }
    return mask;
}

// Full bi-directional attention for the recognition pass.
inline std::vector<uint8_t> build_recognition_mask(const std::vector<Segment>& segments) {
    const int s = static_cast<int>(segments.size());
    return std::vector<uint8_t>(static_cast<size_t>(s) * s, 1);
}

namespace detail {

struct EncodedUtterance {
    std::vector<int> tokens;  // includes the trailing [EOU]
    int role;
    int turn;  // kEmptyId for knowledge
    Segment segment;
};

// Encodes knowledge and context, dropping oldest context utterances whole
// until the non-response part fits the context budget.
inline std::vector<EncodedUtterance> encode_history(const Vocab& v, const ModelConfig& cfg,
                                                    const DialogueSample& sample) {
    std::vector<EncodedUtterance> know;
    for (const auto& k : sample.knowledge) {
        know.push_back({v.encode(k, true), kRoleKnowledge, kEmptyId, Segment::Knowledge});
    }
    std::vector<EncodedUtterance> ctx;
    const int n = static_cast<int>(sample.context.size());
    for (int i = 0; i < n; ++i) {
        const auto& u = sample.context[static_cast<size_t>(i)];
        ctx.push_back({v.encode(u.text, true),
                       u.speaker == Speaker::A ? kRoleA : kRoleB,
                       n - i,  // last utterance -> 1, older ones increase
                       Segment::Context});
    }
    auto total_len = [&] {
        int len = 0;
        for (const auto& e : know) len += static_cast<int>(e.tokens.size());
        for (const auto& e : ctx) len += static_cast<int>(e.tokens.size());
        return len;
    };
    while (total_len() > cfg.max_context_len && ctx.size() > 1) {
        ctx.erase(ctx.begin());
    }
    if (total_len() > cfg.max_context_len) {
        throw LengthError("context/knowledge exceed max_context_len even after truncation");
    }
    // Re-base turns after truncation so the newest utterance is still 1.
    const int kept = static_cast<int>(ctx.size());
    for (int i = 0; i < kept; ++i) ctx[static_cast<size_t>(i)].turn = kept - i;

    std::vector<EncodedUtterance> out = std::move(know);
    out.insert(out.end(), ctx.begin(), ctx.end());
    return out;
}

inline ComposedInput assemble(const Vocab& v, const ModelConfig& cfg,
                              const DialogueSample& sample, int first_token,
                              Segment first_segment,
                              const std::vector<int>& response_tokens,
                              bool close_response) {
    ComposedInput in;
    auto push = [&in](int tok, int role, int turn, int pos, Segment seg) {
        in.token_ids.push_back(tok);
        in.role_ids.push_back(role);
        in.turn_ids.push_back(turn);
        in.position_ids.push_back(pos);
        in.segment.push_back(seg);
    };
    push(first_token, kEmptyId, kEmptyId, kEmptyId, first_segment);
    for (const auto& u : encode_history(v, cfg, sample)) {
        int pos = 0;
        for (const int tok : u.tokens) push(tok, u.role, u.turn, pos++, u.segment);
    }
    if (static_cast<int>(response_tokens.size()) > cfg.max_response_len) {
        throw LengthError("response length " + std::to_string(response_tokens.size()) +
                          " exceeds max_response_len " + std::to_string(cfg.max_response_len));
    }
    in.response_start = in.length();
    int pos = 0;
    push(Vocab::kBou, kRoleA, 0, pos++, Segment::Response);
    for (const int tok : response_tokens) push(tok, kRoleA, 0, pos++, Segment::Response);
    if (close_response) push(Vocab::kEou, kRoleA, 0, pos++, Segment::Response);
    return in;
}

}  // namespace detail

// Layout: [Z_z] ++ knowledge ++ context ++ [BOU] ++ response ++ [EOU],
// under the uni-directional response mask.
inline ComposedInput compose_generation_input(const Vocab& v, const ModelConfig& cfg,
                                              const DialogueSample& sample, int z) {
    if (z < 0 || z >= v.latent_k()) {
        throw LatentRangeError("latent value " + std::to_string(z) + " outside [0," +
                               std::to_string(v.latent_k()) + ")");
    }
    auto in = detail::assemble(v, cfg, sample, v.latent_id(z), Segment::Latent,
                               v.encode(sample.response, false), true);
    in.attn_mask = build_generation_mask(in.segment);
    return in;
}

// Decode-time layout: like the generation input but with an explicit,
// possibly partial response and no closing [EOU].
inline ComposedInput compose_generation_prefix(const Vocab& v, const ModelConfig& cfg,
                                               const DialogueSample& sample, int z,
                                               const std::vector<int>& partial_response) {
    if (z < 0 || z >= v.latent_k()) {
        throw LatentRangeError("latent value " + std::to_string(z) + " outside [0," +
                               std::to_string(v.latent_k()) + ")");
    }
    auto in = detail::assemble(v, cfg, sample, v.latent_id(z), Segment::Latent,
                               partial_response, false);
    in.attn_mask = build_generation_mask(in.segment);
    return in;
}

// Layout: [MASK] ++ knowledge ++ context ++ [BOU] ++ response ++ [EOU],
// under full bi-directional attention.
inline ComposedInput compose_recognition_input(const Vocab& v, const ModelConfig& cfg,
                                               const DialogueSample& sample,
                                               const std::vector<int>& response_tokens) {
    auto in = detail::assemble(v, cfg, sample, Vocab::kMask, Segment::Mask,
                               response_tokens, true);
    in.attn_mask = build_recognition_mask(in.segment);
    return in;
}

}  // namespace dialoglm
