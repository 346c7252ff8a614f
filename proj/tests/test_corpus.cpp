#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dialoglm/corpus.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/vocab.hpp"

using namespace dialoglm;

namespace {

std::vector<DialogueSample> two_line_corpus() {
    std::istringstream in(
        R"({"context":[{"speaker":"B","text":"hi there"}],"response":"hi you"})"
        "\n");
    return load_corpus(in, "toy");
}

}  // namespace

TEST_CASE("tokenize lowercases and splits punctuation into single tokens") {
    CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
    CHECK(tokenize("  spaced\tout \n") == std::vector<std::string>{"spaced", "out"});
    CHECK(tokenize("don't") == std::vector<std::string>{"don", "'", "t"});
    CHECK(tokenize("").empty());
}

TEST_CASE("vocab enumeration follows reserved + latent + frequency/lex order") {
    const auto samples = two_line_corpus();
    Vocab v = build_vocab(samples, /*latent_k=*/2, /*min_freq=*/1, /*max_size=*/8192);
    CHECK(v.size() == 10);
    const std::vector<std::string> expected{"[PAD]", "[UNK]", "[BOU]", "[EOU]", "[MASK]",
                                            "[Z_0]", "[Z_1]", "hi",    "there", "you"};
    for (int i = 0; i < 10; ++i) CHECK(v.token(i) == expected[static_cast<size_t>(i)]);
    CHECK(v.id("hi") == 7);
    CHECK(v.latent_id(0) == Vocab::kLatentBase);
    CHECK(v.latent_k() == 2);
}

TEST_CASE("min_freq filters and max_size caps the total entry count") {
    const auto samples = two_line_corpus();
    Vocab strict = build_vocab(samples, 2, /*min_freq=*/2, 8192);
    CHECK(strict.size() == 8);  // 7 reserved/latent + "hi"
    CHECK(strict.token(7) == "hi");

    Vocab capped = build_vocab(samples, 2, 1, /*max_size=*/8);
    CHECK(capped.size() == 8);
    CHECK(capped.token(7) == "hi");  // most frequent corpus token survives
}

TEST_CASE("empty utterances contribute no tokens") {
    std::istringstream in(
        R"({"context":[{"speaker":"A","text":""}],"response":"hi"})"
        "\n");
    auto samples = load_corpus(in, "toy");
    Vocab v = build_vocab(samples, 1, 1, 8192);
    CHECK(v.size() == 7);  // 6 reserved + [Z_0] + "hi"
    CHECK(v.token(6) == "hi");
}

TEST_CASE("encode handles lookup, OOV and the empty string") {
    const auto samples = two_line_corpus();
    Vocab v = build_vocab(samples, 2, 1, 8192);
    CHECK(v.encode("hi there", true) == std::vector<int>{7, 8, Vocab::kEou});
    CHECK(v.encode("xyzzy", true) == std::vector<int>{Vocab::kUnk, Vocab::kEou});
    CHECK(v.encode("", true) == std::vector<int>{Vocab::kEou});
    CHECK(v.encode("hi you", false) == std::vector<int>{7, 9});
}

TEST_CASE("encode/decode round-trips in-vocab text modulo case") {
    const auto samples = two_line_corpus();
    Vocab v = build_vocab(samples, 2, 1, 8192);
    const std::string text = "Hi THERE you";
    CHECK(v.decode(v.encode(text, true)) == "hi there you");
}

TEST_CASE("vocab ids are stable across save/load") {
    const auto samples = two_line_corpus();
    Vocab v = build_vocab(samples, 2, 1, 8192);
    const auto path = (std::filesystem::temp_directory_path() / "dlg_vocab_test.txt").string();
    v.save(path);
    Vocab loaded = Vocab::load(path);
    CHECK(loaded.size() == v.size());
    CHECK(loaded.latent_k() == 2);
    for (int i = 0; i < v.size(); ++i) CHECK(loaded.token(i) == v.token(i));
    std::remove(path.c_str());
}

TEST_CASE("corpus parsing is strict about structure") {
    auto parse_one = [](const std::string& line) {
        std::istringstream in(line + "\n");
        return load_corpus(in, "toy");
    };
    CHECK_THROWS_AS(parse_one(R"({"context":[{"speaker":"A","text":"x"}]})"), CorpusError);
    CHECK_THROWS_AS(parse_one(R"({"context":[{"speaker":"Q","text":"x"}],"response":"y"})"),
                    CorpusError);
    CHECK_THROWS_AS(parse_one(R"({"context":"oops","response":"y"})"), CorpusError);
    CHECK_THROWS_AS(parse_one(R"(not json)"), CorpusError);

    auto with_knowledge = parse_one(
        R"({"context":[{"speaker":"B","text":"x"}],"knowledge":["k1","k2"],"response":"y"})");
    CHECK(with_knowledge[0].knowledge == std::vector<std::string>{"k1", "k2"});

    std::istringstream blanks(
        "\n"
        R"({"context":[{"speaker":"A","text":"x"}],"response":"y"})"
        "\n\n");
    CHECK(load_corpus(blanks, "toy").size() == 1);
}

TEST_CASE("require_trainable rejects empty contexts and responses") {
    std::istringstream in(R"({"context":[],"response":"y"})"
                          "\n");
    auto samples = load_corpus(in, "toy");
    CHECK_THROWS_AS(require_trainable(samples), CorpusError);

    std::istringstream in2(R"({"context":[{"speaker":"A","text":"x"}],"response":""})"
                           "\n");
    auto samples2 = load_corpus(in2, "toy");
    CHECK_THROWS_AS(require_trainable(samples2), CorpusError);
}

TEST_CASE("negative sampling: forced choice, impossible case, uniformity") {
    NegativeSampler forced({{1, 2}, {3, 4}});
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        CHECK(forced.sample({1, 2}, rng) == std::vector<int>{3, 4});
    }

    NegativeSampler impossible({{1, 2}});
    CHECK_THROWS_AS(impossible.sample({1, 2}, rng), SamplingError);

    NegativeSampler three({{1}, {2}, {3}});
    int c2 = 0, c3 = 0;
    Rng stat(77);
    for (int i = 0; i < 10000; ++i) {
        const auto& s = three.sample({1}, stat);
        if (s == std::vector<int>{2}) ++c2;
        else ++c3;
    }
    CHECK(std::abs(c2 - c3) < 500);  // within 5% of 10k draws
}

TEST_CASE("negative sampling never returns the excluded response") {
    NegativeSampler sampler({{1, 2}, {1, 2}, {9}});
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        CHECK(sampler.sample({1, 2}, rng) == std::vector<int>{9});
    }
}
