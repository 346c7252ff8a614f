#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dialoglm/corpus.hpp"
#include "dialoglm/metrics.hpp"
#include "dialoglm/trainer.hpp"
#include "dialoglm/vocab.hpp"

using namespace dialoglm;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Run the installed binary with shell-level stdio redirection so each
// invocation is a full out-of-process round trip.
RunResult run_cli(const std::string& args, const std::string& stdin_text = "") {
    static int counter = 0;
    const auto base =
        std::filesystem::temp_directory_path() / ("dialoglm_cli_io_" + std::to_string(++counter));
    const std::string out_path = base.string() + ".out";
    const std::string err_path = base.string() + ".err";
    const std::string in_path = base.string() + ".in";
    std::ofstream(in_path, std::ios::binary) << stdin_text;
    const std::string cmd = std::string(CLI_BINARY_PATH) + " " + args + " < " + in_path + " > " +
                            out_path + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    std::filesystem::remove(out_path);
    std::filesystem::remove(err_path);
    std::filesystem::remove(in_path);
    return r;
}

// One shared scratch workspace: a four-sample corpus and a config file for a
// model small enough that every CLI run finishes in milliseconds.
struct Workspace {
    std::filesystem::path dir;

    Workspace() {
        dir = std::filesystem::temp_directory_path() / "dialoglm_test_cli_ws";
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
        std::ofstream corpus(path("corpus.jsonl"));
        corpus << R"({"context":[{"speaker":"B","text":"hi there"}],"response":"hello friend"})"
               << "\n"
               << R"({"context":[{"speaker":"B","text":"how are you"}],"response":"i am fine"})"
               << "\n"
               << R"({"context":[{"speaker":"A","text":"do you cook"},{"speaker":"B","text":"yes often"}],"response":"i cook pasta"})"
               << "\n"
               << R"({"context":[{"speaker":"B","text":"see you"}],"response":"bye now"})"
               << "\n";
        std::ofstream cfg(path("tiny.cfg"));
        cfg << "# desk-size-but-smaller settings for fast CLI runs\n"
            << "model.layers = 1\n"
            << "model.hidden = 8\n"
            << "model.heads = 2\n"
            << "model.latent_k = 2\n"
            << "model.max_context_len = 16\n"
            << "model.max_response_len = 8\n"
            << "trainer.steps = 2\n"
            << "trainer.batch_size = 2\n"
            << "trainer.lr = 0.001\n"
            << "trainer.log_every = 1\n"
            << "decode.mode = greedy\n";
    }
    ~Workspace() { std::filesystem::remove_all(dir); }

    std::string path(const std::string& name) const { return (dir / name).string(); }
};

const Workspace& ws() {
    static Workspace w;
    return w;
}

std::string cfg_flag() { return "--config " + ws().path("tiny.cfg") + " "; }

// Train once and share the artifacts across cases (the flag overrides the
// config file's step count, which doubles as the precedence check).
const std::string& trained_dir() {
    static const std::string dir = [] {
        const std::string out = ws().path("model");
        auto r = run_cli(cfg_flag() + "train --corpus " + ws().path("corpus.jsonl") + " --out " +
                         out + " --steps 4 --seed 11");
        REQUIRE(r.code == 0);
        REQUIRE(r.out.find("trained 4 steps") != std::string::npos);
        return out;
    }();
    return dir;
}

std::string trained_ckpt() { return trained_dir() + "/ckpt-final.bin"; }

}  // namespace

TEST_CASE("cli training writes vocab, checkpoint, and a step log") {
    const std::string dir = trained_dir();
    CHECK(std::filesystem::exists(dir + "/vocab.txt"));
    CHECK(std::filesystem::exists(dir + "/ckpt-final.bin"));
    CHECK(std::filesystem::exists(dir + "/log.jsonl"));

    auto vocab = Vocab::load(dir + "/vocab.txt");
    CHECK(vocab.latent_k() == 2);
    CHECK(vocab.id("pasta") != Vocab::kUnk);

    // log_every=1 and the flag-overridden 4 steps give exactly four entries.
    const auto log_lines = lines_of(slurp(dir + "/log.jsonl"));
    REQUIRE(log_lines.size() == 4);
    for (size_t i = 0; i < log_lines.size(); ++i) {
        auto j = nlohmann::json::parse(log_lines[i]);
        CHECK(j["step"].get<int>() == static_cast<int>(i) + 1);
        const double total = j["total"].get<double>();
        CHECK(total == doctest::Approx(j["nll"].get<double>() + j["bow"].get<double>() +
                                       j["rs"].get<double>())
                           .epsilon(1e-9));
        CHECK(total > 0.0);
    }

    const TrainState st = load_checkpoint(dir + "/ckpt-final.bin");
    CHECK(st.global_step == 4);
    CHECK(st.params.config.vocab_size == vocab.size());
}

TEST_CASE("cli zero-step run checkpoints the untouched initialization") {
    auto r = run_cli(cfg_flag() + "train --corpus " + ws().path("corpus.jsonl") + " --out " +
                     ws().path("zero") + " --steps 0 --seed 11");
    REQUIRE(r.code == 0);

    // Rebuild the identical state in-process and compare checkpoints byte
    // for byte: the whole pipeline (vocab build, init, serialization) must
    // be a pure function of corpus + config + seed.
    auto samples = load_corpus_file(ws().path("corpus.jsonl"));
    Vocab vocab = build_vocab(samples, 2, 1, 8192);
    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 8;
    mc.heads = 2;
    mc.latent_k = 2;
    mc.vocab_size = vocab.size();
    mc.max_context_len = 16;
    mc.max_response_len = 8;
    TrainerConfig tc;
    tc.steps = 2;
    tc.batch_size = 2;
    tc.lr = 0.001;
    tc.log_every = 1;
    TrainState st = TrainState::init(mc, tc, 11);
    save_checkpoint(st, ws().path("expected.bin"));

    CHECK(slurp(ws().path("zero") + "/ckpt-final.bin") == slurp(ws().path("expected.bin")));
    CHECK(slurp(ws().path("zero") + "/vocab.txt") != "");

    Vocab reloaded = Vocab::load(ws().path("zero") + "/vocab.txt");
    CHECK(reloaded.size() == vocab.size());
}

TEST_CASE("cli same seed reproduces the checkpoint byte for byte") {
    auto a = run_cli(cfg_flag() + "train --corpus " + ws().path("corpus.jsonl") + " --out " +
                     ws().path("rep_a") + " --steps 3 --seed 21");
    auto b = run_cli(cfg_flag() + "train --corpus " + ws().path("corpus.jsonl") + " --out " +
                     ws().path("rep_b") + " --steps 3 --seed 21");
    auto c = run_cli(cfg_flag() + "train --corpus " + ws().path("corpus.jsonl") + " --out " +
                     ws().path("rep_c") + " --steps 3 --seed 22");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    REQUIRE(c.code == 0);
    const std::string bytes_a = slurp(ws().path("rep_a") + "/ckpt-final.bin");
    CHECK(bytes_a == slurp(ws().path("rep_b") + "/ckpt-final.bin"));
    CHECK(bytes_a != slurp(ws().path("rep_c") + "/ckpt-final.bin"));
}

TEST_CASE("cli errors map to distinct exit codes") {
    // Usage problems (parser or config) exit 1.
    CHECK(run_cli("").code == 1);
    CHECK(run_cli("train --corpus x --out y --frobnicate").code == 1);
    CHECK(run_cli("eval --checkpoint " + trained_ckpt()).code == 1);
    CHECK(run_cli("eval --checkpoint " + trained_ckpt() + " --corpus " +
                  ws().path("corpus.jsonl") + " --predictions also.jsonl")
              .code == 1);
    CHECK(run_cli("eval --checkpoint " + trained_ckpt() + " --corpus " +
                  ws().path("corpus.jsonl") + " --z-policy bogus")
              .code == 1);

    std::ofstream(ws().path("bad.cfg")) << "bogus.key = 3\n";
    CHECK(run_cli("--config " + ws().path("bad.cfg") + " train --corpus " +
                  ws().path("corpus.jsonl") + " --out " + ws().path("bad_out"))
              .code == 1);

    // Environment problems (missing files, bad checkpoints) exit 2.
    CHECK(run_cli(cfg_flag() + "train --corpus /nonexistent.jsonl --out " + ws().path("nope"))
              .code == 2);
    CHECK(run_cli("generate --checkpoint /nonexistent.bin --input " + ws().path("corpus.jsonl"))
              .code == 2);

    auto help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("train") != std::string::npos);
}

TEST_CASE("cli generate lists every candidate ranked by coherence") {
    std::ofstream(ws().path("context.jsonl"))
        << R"({"context":[{"speaker":"B","text":"hi there"}],"response":""})" << "\n";

    auto chosen = run_cli("generate --checkpoint " + trained_ckpt() + " --input " +
                          ws().path("context.jsonl"));
    REQUIRE(chosen.code == 0);
    const auto chosen_lines = lines_of(chosen.out);
    REQUIRE(chosen_lines.size() == 1);

    auto all = run_cli("generate --checkpoint " + trained_ckpt() + " --input " +
                       ws().path("context.jsonl") + " --all-candidates --format json");
    REQUIRE(all.code == 0);
    const auto rows = lines_of(all.out);
    REQUIRE(rows.size() == 2);  // one per latent value
    std::set<int> zs;
    double prev = 2.0;
    for (const auto& row : rows) {
        auto j = nlohmann::json::parse(row);
        REQUIRE(j.contains("z"));
        REQUIRE(j.contains("text"));
        REQUIRE(j.contains("coherence"));
        zs.insert(j["z"].get<int>());
        const double coh = j["coherence"].get<double>();
        CHECK(coh <= prev);
        CHECK(coh >= 0.0);
        CHECK(coh <= 1.0);
        prev = coh;
    }
    CHECK(zs == std::set<int>{0, 1});
    // The ranking's top candidate is exactly what the plain mode prints.
    CHECK(nlohmann::json::parse(rows[0])["text"].get<std::string>() == chosen_lines[0]);

    auto text_mode = run_cli("generate --checkpoint " + trained_ckpt() + " --input " +
                             ws().path("context.jsonl") + " --all-candidates");
    REQUIRE(text_mode.code == 0);
    const auto text_rows = lines_of(text_mode.out);
    REQUIRE(text_rows.size() == 2);
    CHECK(text_rows[0].find("[z=") == 0);
    CHECK(text_rows[0].find("coherence=") != std::string::npos);
}

TEST_CASE("cli generated predictions feed back into evaluation") {
    auto gen = run_cli("generate --checkpoint " + trained_ckpt() + " --input " +
                       ws().path("corpus.jsonl") + " --format json");
    REQUIRE(gen.code == 0);
    const auto rows = lines_of(gen.out);
    REQUIRE(rows.size() == 4);
    for (const auto& row : rows) {
        auto j = nlohmann::json::parse(row);
        CHECK(j.contains("reference"));
        CHECK(j.contains("hypothesis"));
        CHECK(j.contains("context"));
    }
    std::ofstream(ws().path("preds.jsonl")) << gen.out;

    auto eval = run_cli("eval --checkpoint " + trained_ckpt() + " --predictions " +
                        ws().path("preds.jsonl"));
    REQUIRE(eval.code == 0);
    auto report = nlohmann::json::parse(eval.out);
    CHECK(report.size() == 9);
    CHECK(report["samples"].get<int>() == 4);
    CHECK(report["perplexity"].get<double>() > 0.0);
    CHECK(report["bleu1"].get<double>() >= 0.0);
    CHECK(report["bleu1"].get<double>() <= 1.0);
}

TEST_CASE("cli corpus evaluation reports and dumps predictions") {
    auto r = run_cli("eval --checkpoint " + trained_ckpt() + " --corpus " +
                     ws().path("corpus.jsonl") + " --dump-predictions " + ws().path("dump.jsonl") +
                     " --selection oracle-bleu1 --z-policy marginalized");
    REQUIRE(r.code == 0);
    auto report = nlohmann::json::parse(r.out);
    CHECK(report.size() == 9);
    CHECK(report["samples"].get<int>() == 4);

    std::ifstream dumped(ws().path("dump.jsonl"));
    auto preds = load_predictions(dumped, "dump.jsonl");
    REQUIRE(preds.size() == 4);
    CHECK(preds[2].sample.response == "i cook pasta");
}

TEST_CASE("cli chat answers over a pipe") {
    auto r = run_cli("chat --checkpoint " + trained_ckpt(), "hi there\n/quit\n");
    REQUIRE(r.code == 0);
    const auto out_lines = lines_of(r.out);
    int replies = 0;
    for (const auto& line : out_lines) {
        if (line.empty() || line[0] != '#') ++replies;
    }
    CHECK(replies >= 1);

    auto dbg = run_cli("chat --checkpoint " + trained_ckpt() + " --debug", "hi there\n/quit\n");
    REQUIRE(dbg.code == 0);
    int zlines = 0;
    for (const auto& line : lines_of(dbg.out)) {
        if (line.find("[z=") != std::string::npos) ++zlines;
    }
    CHECK(zlines == 2);  // one scored candidate per latent value
}
