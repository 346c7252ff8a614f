#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "dialoglm/corpus.hpp"
#include "dialoglm/inference.hpp"

using namespace dialoglm;

namespace {

std::vector<DialogueSample> chat_corpus() {
    auto mk = [](const std::string& c, const std::string& r) {
        DialogueSample s;
        s.context.push_back({Speaker::B, c});
        s.response = r;
        return s;
    };
    return {
        mk("hello there", "hi friend"),
        mk("how are you", "i am fine"),
        mk("what is new", "not much today"),
    };
}

struct InferFixture {
    std::vector<DialogueSample> samples = chat_corpus();
    Vocab vocab = build_vocab(samples, 3, 1, 8192);
    ModelConfig cfg;
    Parameters params;

    InferFixture() {
        cfg.layers = 1;
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.latent_k = 3;
        cfg.vocab_size = vocab.size();
        cfg.max_context_len = 12;
        cfg.max_response_len = 6;
        cfg.dropout = 0.0;
        Rng rng(101);
        params = Parameters::init(cfg, rng);
    }

    DialogueSample context_only(const std::string& text) const {
        DialogueSample s;
        s.context.push_back({Speaker::B, text});
        return s;
    }
};

Candidate fake(int z, double coherence) {
    Candidate c;
    c.z = z;
    c.coherence = coherence;
    c.text = "cand " + std::to_string(z);
    return c;
}

std::vector<std::string> run_chat(const Parameters& p, const Vocab& v, const DecodeConfig& dc,
                                  const std::string& script) {
    std::istringstream in(script);
    std::ostringstream out;
    chat_loop(p, v, dc, in, out);
    std::vector<std::string> lines;
    std::string line;
    std::istringstream parse(out.str());
    while (std::getline(parse, line)) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("one scored candidate per latent value, in order") {
    InferFixture fx;
    DecodeConfig dc;
    auto sample = fx.context_only("hello there");
    auto cands = generate_candidates(fx.params, fx.vocab, sample, dc);
    REQUIRE(cands.size() == static_cast<size_t>(fx.cfg.latent_k));
    for (int z = 0; z < fx.cfg.latent_k; ++z) {
        const auto& c = cands[static_cast<size_t>(z)];
        CHECK(c.z == z);
        CHECK(c.coherence > 0.0);
        CHECK(c.coherence < 1.0);
        CHECK(c.log_likelihood <= 0.0);
        REQUIRE_FALSE(c.tokens.empty());
        // Either closed by the end marker or cut at the length cap.
        if (c.tokens.back() == Vocab::kEou) {
            CHECK(static_cast<int>(c.tokens.size()) <= fx.cfg.max_response_len + 1);
        } else {
            CHECK(static_cast<int>(c.tokens.size()) == fx.cfg.max_response_len);
        }
        // Nothing structural ever gets emitted as text.
        for (int tok : c.tokens) {
            const bool word = tok >= Vocab::kLatentBase + fx.vocab.latent_k();
            CHECK((tok == Vocab::kEou || word));
        }
    }
}

TEST_CASE("greedy decoding is deterministic") {
    InferFixture fx;
    DecodeConfig dc;
    auto sample = fx.context_only("how are you");
    auto a = decode_candidate(fx.params, fx.vocab, sample, 1, dc);
    auto b = decode_candidate(fx.params, fx.vocab, sample, 1, dc);
    CHECK(a.tokens == b.tokens);
    CHECK(a.text == b.text);
    CHECK(a.log_likelihood == b.log_likelihood);

    auto c1 = generate_candidates(fx.params, fx.vocab, sample, dc);
    auto c2 = generate_candidates(fx.params, fx.vocab, sample, dc);
    REQUIRE(c1.size() == c2.size());
    for (size_t i = 0; i < c1.size(); ++i) {
        CHECK(c1[i].tokens == c2[i].tokens);
        CHECK(c1[i].coherence == c2[i].coherence);
    }
}

TEST_CASE("top-k sampling stays on emittable tokens and needs an rng") {
    InferFixture fx;
    DecodeConfig dc;
    dc.mode = DecodeConfig::Mode::TopK;
    dc.top_k = 3;
    dc.temperature = 0.8;
    auto sample = fx.context_only("what is new");

    CHECK_THROWS_AS(decode_candidate(fx.params, fx.vocab, sample, 0, dc), ConfigError);

    Rng r1(77);
    auto a = decode_candidate(fx.params, fx.vocab, sample, 0, dc, &r1);
    for (int tok : a.tokens) {
        CHECK((tok == Vocab::kEou || tok >= Vocab::kLatentBase + fx.vocab.latent_k()));
    }
    Rng r2(77);
    auto b = decode_candidate(fx.params, fx.vocab, sample, 0, dc, &r2);
    CHECK(a.tokens == b.tokens);  // same stream, same draw
}

TEST_CASE("a zeroed selection head is maximally unsure") {
    InferFixture fx;
    std::fill(fx.params.rs_w->data.begin(), fx.params.rs_w->data.end(), 0.0);
    std::fill(fx.params.rs_b->data.begin(), fx.params.rs_b->data.end(), 0.0);
    auto sample = fx.context_only("hello there");
    const double s = score_coherence(fx.params, fx.vocab, sample,
                                     fx.vocab.encode("hi friend", false));
    CHECK(s == 0.5);
}

TEST_CASE("selection picks the best coherence, earliest on ties") {
    std::vector<Candidate> three = {fake(0, 0.1), fake(1, 0.9), fake(2, 0.4)};
    CHECK(select_response(three).z == 1);

    std::vector<Candidate> tie = {fake(0, 0.5), fake(1, 0.5)};
    CHECK(select_response(tie).z == 0);

    std::vector<Candidate> one = {fake(0, 0.01)};
    CHECK(select_response(one).z == 0);

    std::vector<Candidate> none;
    CHECK_THROWS_AS(select_response(none), SelectionError);
}

TEST_CASE("selection is invariant under monotone transforms of the score") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Candidate> cands;
        for (int z = 0; z < 5; ++z) {
            cands.push_back(fake(z, 0.05 + 0.9 * rng.uniform01()));
        }
        const int base = select_response(cands).z;
        auto by = [&](const std::function<double(double)>& f) {
            return select_response_by(cands, [&](const Candidate& c) {
                       return f(c.coherence);
                   }).z;
        };
        CHECK(by([](double x) { return 3.0 * x + 7.0; }) == base);
        CHECK(by([](double x) { return std::log(x); }) == base);
        CHECK(by([](double x) { return std::exp(2.0 * x); }) == base);
        CHECK(by([](double x) { return -1.0 / x; }) == base);
    }
}

TEST_CASE("chat replies once per user line and quits on command") {
    InferFixture fx;
    DecodeConfig dc;
    auto lines = run_chat(fx.params, fx.vocab, dc, "hello there\nhow are you\n/quit\n");
    std::vector<std::string> replies;
    for (const auto& l : lines) {
        if (l.rfind("#", 0) != 0) replies.push_back(l);
    }
    CHECK(replies.size() == 2);
}

TEST_CASE("chat reset restores a fresh conversation") {
    InferFixture fx;
    DecodeConfig dc;
    auto fresh = run_chat(fx.params, fx.vocab, dc, "hello there\n/quit\n");
    REQUIRE(fresh.size() == 1);
    const std::string first_reply = fresh[0];

    auto reset = run_chat(fx.params, fx.vocab, dc,
                          "how are you\nwhat is new\n/reset\nhello there\n/quit\n");
    REQUIRE(!reset.empty());
    CHECK(reset.back() == first_reply);
    CHECK(std::count(reset.begin(), reset.end(), std::string("# context cleared")) == 1);
}

TEST_CASE("chat debug mode prints every candidate") {
    InferFixture fx;
    DecodeConfig dc;
    auto fresh = run_chat(fx.params, fx.vocab, dc, "hello there\n/quit\n");
    REQUIRE(fresh.size() == 1);

    auto dbg = run_chat(fx.params, fx.vocab, dc, "/debug\nhello there\n/quit\n");
    REQUIRE(!dbg.empty());
    CHECK(dbg.front() == "# debug on");
    int zlines = 0;
    for (const auto& l : dbg) {
        if (l.rfind("[z=", 0) == 0) ++zlines;
    }
    CHECK(zlines == fx.cfg.latent_k);
    CHECK(dbg.back() == fresh[0]);

    auto toggled = run_chat(fx.params, fx.vocab, dc, "/debug\n/debug\nhello there\n/quit\n");
    REQUIRE(toggled.size() >= 3);
    CHECK(toggled[0] == "# debug on");
    CHECK(toggled[1] == "# debug off");
    for (const auto& l : toggled) CHECK(l.rfind("[z=", 0) != 0);
    CHECK(toggled.back() == fresh[0]);
}

TEST_CASE("chat shrugs off input that cannot fit the context window") {
    InferFixture fx;
    DecodeConfig dc;
    auto fresh = run_chat(fx.params, fx.vocab, dc, "hello there\n/quit\n");
    REQUIRE(fresh.size() == 1);

    std::string longline;
    for (int i = 0; i < 3 * fx.cfg.max_context_len; ++i) longline += "you ";
    auto lines = run_chat(fx.params, fx.vocab, dc, longline + "\nhello there\n/quit\n");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "# input too long, ignored");
    // The oversized line left no trace in the context.
    CHECK(lines[1] == fresh[0]);
}
