#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/inference.hpp"
#include "dialoglm/metrics.hpp"
#include "dialoglm/network.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/trainer.hpp"
#include "dialoglm/vocab.hpp"

namespace fs = std::filesystem;
using namespace dialoglm;

namespace {

// The vocab written next to a checkpoint is its default companion.
std::string vocab_path_for(const std::string& explicit_path, const std::string& checkpoint) {
    if (!explicit_path.empty()) return explicit_path;
    return (fs::path(checkpoint).parent_path() / "vocab.txt").string();
}

std::set<std::string> stopwords_for(const RunConfig& rc) {
    if (rc.stopwords_path.empty()) return builtin_stopwords();
    return load_stopwords(rc.stopwords_path);
}

struct LoadedModel {
    TrainState state;
    Vocab vocab;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& vocab_flag) {
    LoadedModel m{load_checkpoint(checkpoint), Vocab::load(vocab_path_for(vocab_flag, checkpoint))};
    if (m.vocab.size() != m.state.params.config.vocab_size) {
        throw CheckpointError("vocab size " + std::to_string(m.vocab.size()) +
                              " does not match checkpoint vocab_size " +
                              std::to_string(m.state.params.config.vocab_size));
    }
    if (m.vocab.latent_k() != m.state.params.config.latent_k) {
        throw CheckpointError("vocab latent block does not match checkpoint latent_k");
    }
    return m;
}

int cmd_train(RunConfig rc, const std::string& corpus_path, const std::string& out_dir,
              const std::string& vocab_flag) {
    auto samples = load_corpus_file(corpus_path);
    require_trainable(samples);
    Vocab vocab = vocab_flag.empty()
                      ? build_vocab(samples, rc.model.latent_k, rc.vocab_min_freq, rc.vocab_max_size)
                      : Vocab::load(vocab_flag);
    rc.model.vocab_size = vocab.size();
    rc.model.validate();
    rc.trainer.validate();

    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    vocab.save((out / "vocab.txt").string());

    TrainState st = TrainState::init(rc.model, rc.trainer, rc.seed);
    NegativeSampler sampler(vocab, samples);
    DataOrder order(static_cast<int64_t>(samples.size()), rc.seed);
    std::ofstream log((out / "log.jsonl").string(), std::ios::trunc);
    if (!log) throw CorpusError("cannot write log file in " + out_dir);

    for (int step = 1; step <= rc.trainer.steps; ++step) {
        auto lb = run_training_step(st, vocab, samples, sampler, order, rc.trainer.batch_size);
        if (step % rc.trainer.log_every == 0 || step == rc.trainer.steps) {
            nlohmann::json j{{"step", step},
                             {"nll", lb.nll},
                             {"bow", lb.bow},
                             {"rs", lb.rs},
                             {"total", lb.total}};
            log << j.dump() << "\n";
            log.flush();
        }
        if (rc.trainer.checkpoint_every > 0 && step % rc.trainer.checkpoint_every == 0 &&
            step != rc.trainer.steps) {
            save_checkpoint(st, (out / ("ckpt-" + std::to_string(step) + ".bin")).string());
        }
    }
    save_checkpoint(st, (out / "ckpt-final.bin").string());
    std::cout << "trained " << rc.trainer.steps << " steps on " << samples.size()
              << " samples; artifacts in " << out_dir << "\n";
    return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& checkpoint, const std::string& corpus_path,
             const std::string& predictions_path, const std::string& vocab_flag,
             const std::string& dump_predictions, const std::string& z_policy_name,
             const std::string& selection_name) {
    if (corpus_path.empty() == predictions_path.empty()) {
        throw ConfigError("eval needs exactly one of --corpus or --predictions");
    }
    auto m = load_model(checkpoint, vocab_flag);
    const auto stopwords = stopwords_for(rc);
    const ZPolicy zp = parse_z_policy(z_policy_name);
    Rng rng = Rng(rc.seed).stream("eval");

    EvalReport report;
    if (!predictions_path.empty()) {
        std::ifstream is(predictions_path);
        if (!is) throw CorpusError("cannot open predictions file: " + predictions_path);
        auto records = load_predictions(is, predictions_path);
        report = evaluate_predictions(m.state.params, m.vocab, records, stopwords, zp, &rng);
    } else {
        auto samples = load_corpus_file(corpus_path);
        EvalOptions opt;
        opt.decode = rc.decode;
        opt.z_policy = zp;
        if (selection_name == "coherence") {
            opt.selection = EvalOptions::Selection::Coherence;
        } else if (selection_name == "oracle-bleu1") {
            opt.selection = EvalOptions::Selection::OracleBleu1;
        } else {
            throw ConfigError("unknown --selection: " + selection_name +
                              " (coherence|oracle-bleu1)");
        }
        auto result = evaluate(m.state.params, m.vocab, samples, stopwords, opt, &rng);
        if (!dump_predictions.empty()) {
            std::ofstream os(dump_predictions, std::ios::trunc);
            if (!os) throw CorpusError("cannot write predictions file: " + dump_predictions);
            for (const auto& r : result.predictions) os << prediction_to_json(r).dump() << "\n";
        }
        report = result.report;
    }
    std::cout << report.to_json().dump() << "\n";
    return 0;
}

int cmd_generate(const RunConfig& rc, const std::string& checkpoint, const std::string& input,
                 const std::string& vocab_flag, bool all_candidates, const std::string& format) {
    if (format != "text" && format != "json") {
        throw ConfigError("unknown --format: " + format + " (text|json)");
    }
    auto m = load_model(checkpoint, vocab_flag);
    auto samples = load_corpus_file(input);
    Rng rng = Rng(rc.seed).stream("decode");
    for (const auto& s : samples) {
        auto candidates = generate_candidates(m.state.params, m.vocab, s, rc.decode, &rng);
        if (all_candidates) {
            std::stable_sort(candidates.begin(), candidates.end(),
                             [](const Candidate& a, const Candidate& b) {
                                 return a.coherence > b.coherence;
                             });
            for (const auto& c : candidates) {
                if (format == "json") {
                    nlohmann::json j{{"z", c.z}, {"text", c.text}, {"coherence", c.coherence}};
                    std::cout << j.dump() << "\n";
                } else {
                    std::cout << "[z=" << c.z << "] coherence=" << c.coherence << " | " << c.text
                              << "\n";
                }
            }
        } else {
            const Candidate& chosen = select_response(candidates);
            if (format == "json") {
                std::cout << prediction_to_json({s, chosen.text}).dump() << "\n";
            } else {
                std::cout << chosen.text << "\n";
            }
        }
    }
    return 0;
}

int cmd_chat(const RunConfig& rc, const std::string& checkpoint, const std::string& vocab_flag,
             bool debug) {
    auto m = load_model(checkpoint, vocab_flag);
    Rng rng = Rng(rc.seed).stream("decode");
    chat_loop(m.state.params, m.vocab, rc.decode, std::cin, std::cout, debug, &rng);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dialogue generation with a discrete latent act variable"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "Key-value config file (flags win over file values)");

    // train
    auto* train = app.add_subcommand("train", "Train a model from a JSONL corpus");
    std::string t_corpus, t_out, t_vocab;
    int t_steps = 0, t_batch = 0;
    double t_lr = 0.0;
    uint64_t t_seed = 0;
    train->add_option("--corpus", t_corpus, "Training corpus (JSONL)")->required();
    train->add_option("--out", t_out, "Output directory")->required();
    train->add_option("--vocab", t_vocab, "Reuse an existing vocab file instead of building one");
    train->add_option("--steps", t_steps, "Total optimizer steps");
    train->add_option("--batch-size", t_batch, "Samples per optimizer step");
    train->add_option("--lr", t_lr, "Adam learning rate");
    train->add_option("--seed", t_seed, "Master random seed");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
    std::string e_ckpt, e_corpus, e_preds, e_vocab, e_dump;
    std::string e_zpolicy = "argmax", e_selection = "coherence";
    uint64_t e_seed = 0;
    eval->add_option("--checkpoint", e_ckpt, "Model checkpoint")->required();
    eval->add_option("--corpus", e_corpus, "Evaluation corpus (JSONL)");
    eval->add_option("--predictions", e_preds, "Score an existing predictions file instead");
    eval->add_option("--vocab", e_vocab, "Vocab file (default: vocab.txt beside the checkpoint)");
    eval->add_option("--dump-predictions", e_dump, "Write the generated predictions (JSONL)");
    eval->add_option("--z-policy", e_zpolicy, "Perplexity latent policy: argmax|sampled|marginalized");
    eval->add_option("--selection", e_selection, "Candidate ranking: coherence|oracle-bleu1");
    eval->add_option("--seed", e_seed, "Master random seed");

    // generate
    auto* gen = app.add_subcommand("generate", "Generate responses for contexts in a JSONL file");
    std::string g_ckpt, g_input, g_vocab, g_format = "text";
    bool g_all = false;
    uint64_t g_seed = 0;
    gen->add_option("--checkpoint", g_ckpt, "Model checkpoint")->required();
    gen->add_option("--input", g_input, "Context file (corpus JSONL; response may be empty)")
        ->required();
    gen->add_option("--vocab", g_vocab, "Vocab file (default: vocab.txt beside the checkpoint)");
    gen->add_flag("--all-candidates", g_all, "Print every candidate, sorted by coherence");
    gen->add_option("--format", g_format, "Output format: text|json");
    gen->add_option("--seed", g_seed, "Master random seed");

    // chat
    auto* chat = app.add_subcommand("chat", "Interactive chat on stdin/stdout");
    std::string c_ckpt, c_vocab;
    bool c_debug = false;
    uint64_t c_seed = 0;
    chat->add_option("--checkpoint", c_ckpt, "Model checkpoint")->required();
    chat->add_option("--vocab", c_vocab, "Vocab file (default: vocab.txt beside the checkpoint)");
    chat->add_flag("--debug", c_debug, "Print all scored candidates each turn");
    chat->add_option("--seed", c_seed, "Master random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        RunConfig rc;
        if (!config_path.empty()) rc = RunConfig::from_file(config_path);
        if (train->parsed()) {
            if (train->count("--steps")) rc.trainer.steps = t_steps;
            if (train->count("--batch-size")) rc.trainer.batch_size = t_batch;
            if (train->count("--lr")) rc.trainer.lr = t_lr;
            if (train->count("--seed")) rc.seed = t_seed;
            return cmd_train(rc, t_corpus, t_out, t_vocab);
        }
        if (eval->parsed()) {
            if (eval->count("--seed")) rc.seed = e_seed;
            return cmd_eval(rc, e_ckpt, e_corpus, e_preds, e_vocab, e_dump, e_zpolicy,
                            e_selection);
        }
        if (gen->parsed()) {
            if (gen->count("--seed")) rc.seed = g_seed;
            return cmd_generate(rc, g_ckpt, g_input, g_vocab, g_all, g_format);
        }
        if (chat->parsed()) {
            if (chat->count("--seed")) rc.seed = c_seed;
            return cmd_chat(rc, c_ckpt, c_vocab, c_debug);
        }
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << " (nll=" << e.nll << ", bow=" << e.bow
                  << ", rs=" << e.rs << ")\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
