#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dialoglm/config.hpp"
#include "dialoglm/corpus.hpp"
#include "dialoglm/errors.hpp"
#include "dialoglm/network.hpp"
#include "dialoglm/rng.hpp"
#include "dialoglm/vocab.hpp"

namespace dialoglm {

struct LossBreakdown {
    double nll = 0.0, bow = 0.0, rs = 0.0, total = 0.0;

    bool finite() const {
        return std::isfinite(nll) && std::isfinite(bow) && std::isfinite(rs) &&
               std::isfinite(total);
    }
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

// Standard bias-corrected update, in place:
//   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
//   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
inline void adam_update(std::span<double> param, std::span<const double> grad,
                        std::span<double> m, std::span<double> v, int64_t t, double lr,
                        double b1, double b2, double eps) {
    if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
        throw ShapeError("adam_update buffer sizes disagree");
    }
    if (t < 1) throw NumericError("adam_update needs step count t >= 1");
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
}

struct AdamSlots {
    std::vector<double> m, v;
};

struct OptimizerState {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, AdamSlots> slots;

    static OptimizerState init(const Parameters& p, const TrainerConfig& tc) {
        OptimizerState o;
        o.lr = tc.lr;
        o.beta1 = tc.beta1;
        o.beta2 = tc.beta2;
        o.eps = tc.eps;
        p.for_each([&](const std::string& name, const TensorPtr& t) {
            auto& s = o.slots[name];
            s.m.assign(static_cast<size_t>(t->numel()), 0.0);
            s.v.assign(static_cast<size_t>(t->numel()), 0.0);
        });
        return o;
    }
};

// ---------------------------------------------------------------------------
// Train state and the step itself.
// ---------------------------------------------------------------------------

struct TrainState {
    Parameters params;
    OptimizerState opt;
    int64_t epoch = 0;
    int64_t epoch_pos = 0;    // samples consumed within the current epoch
    int64_t global_step = 0;  // optimizer steps taken
    uint64_t seed = 0;

    static TrainState init(const ModelConfig& mc, const TrainerConfig& tc, uint64_t seed) {
        TrainState st;
        Rng init_rng = Rng(seed).stream("init");
        st.params = Parameters::init(mc, init_rng);
        st.opt = OptimizerState::init(st.params, tc);
        st.seed = seed;
        return st;
    }
};

inline void zero_all_grads(const Parameters& p) {
    p.for_each([](const std::string&, const TensorPtr& t) {
        t->ensure_grad();
        t->zero_grad();
    });
}

inline void scale_all_grads(const Parameters& p, double c) {
    p.for_each([&](const std::string&, const TensorPtr& t) {
        t->ensure_grad();
        for (double& g : t->grad) g *= c;
    });
}

// One optimizer application over whatever is currently in the grad buffers.
inline void apply_adam(TrainState& st) {
    st.opt.t += 1;
    st.params.for_each([&](const std::string& name, const TensorPtr& t) {
        t->ensure_grad();
        auto& s = st.opt.slots.at(name);
        adam_update(t->data, t->grad, s.m, s.v, st.opt.t, st.opt.lr, st.opt.beta1, st.opt.beta2,
                    st.opt.eps);
    });
}

namespace detail {

inline LossBreakdown backward_pair(TrainState& st, const Vocab& v, const TrainingPair& pair,
                                   Rng& z_rng, Rng* drop_rng) {
    Tape tape;
    auto g = build_losses(tape, st.params, v, pair, z_rng, true, drop_rng);
    LossBreakdown lb{g.nll->data[0], g.bow->data[0], g.rs->data[0], g.total->data[0]};
    if (!lb.finite()) {
        throw DivergenceError("non-finite training loss at step " +
                                  std::to_string(st.global_step),
                              lb.nll, lb.bow, lb.rs);
    }
    tape.backward(g.total);
    return lb;
}

}  // namespace detail

// Single-pair step: both passes, backward, one Adam update.
inline LossBreakdown train_step(TrainState& st, const Vocab& v, const TrainingPair& pair,
                                Rng& z_rng, Rng* drop_rng = nullptr) {
    zero_all_grads(st.params);
    auto lb = detail::backward_pair(st, v, pair, z_rng, drop_rng);
    apply_adam(st);
    st.global_step += 1;
    return lb;
}

// Batch step: gradients accumulate over the pairs (mean), then one Adam
// update. Returns the mean loss breakdown.
inline LossBreakdown train_batch(TrainState& st, const Vocab& v,
                                 std::span<const TrainingPair> pairs, Rng& z_rng,
                                 Rng* drop_rng = nullptr) {
    if (pairs.empty()) throw ConfigError("training batch is empty");
    zero_all_grads(st.params);
    LossBreakdown sum;
    for (const auto& pair : pairs) {
        auto lb = detail::backward_pair(st, v, pair, z_rng, drop_rng);
        sum.nll += lb.nll;
        sum.bow += lb.bow;
        sum.rs += lb.rs;
        sum.total += lb.total;
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    scale_all_grads(st.params, inv);
    apply_adam(st);
    st.global_step += 1;
    return {sum.nll * inv, sum.bow * inv, sum.rs * inv, sum.total * inv};
}

// ---------------------------------------------------------------------------
// Deterministic, resumable shuffled order over sample indices. The
// permutation for epoch e depends only on (seed, e), so (epoch, pos) is the
// complete iteration state.
// ---------------------------------------------------------------------------

class DataOrder {
   public:
    DataOrder(int64_t n, uint64_t seed, int64_t epoch = 0, int64_t pos = 0)
        : n_(n), seed_(seed), epoch_(epoch), pos_(pos) {
        if (n <= 0) throw CorpusError("cannot iterate an empty corpus");
        if (pos < 0 || pos >= n) throw CorpusError("data order position out of range");
        regen();
    }

    int next() {
        const int idx = perm_[static_cast<size_t>(pos_)];
        if (++pos_ == n_) {
            pos_ = 0;
            ++epoch_;
            regen();
        }
        return idx;
    }

    int64_t epoch() const { return epoch_; }
    int64_t pos() const { return pos_; }

   private:
    void regen() {
        perm_.resize(static_cast<size_t>(n_));
        std::iota(perm_.begin(), perm_.end(), 0);
        Rng r = Rng(seed_).stream("order").stream(static_cast<uint64_t>(epoch_));
        r.shuffle(perm_);
    }

    int64_t n_;
    uint64_t seed_;
    int64_t epoch_ = 0;
    int64_t pos_ = 0;
    std::vector<int> perm_;
};

// One full training step over a fresh batch: draws the batch from the data
// order, draws negatives, and keys every random stream by (seed, purpose,
// step index). Resuming from (epoch, epoch_pos, global_step) therefore
// replays the exact same stream a straight run would have used.
inline LossBreakdown run_training_step(TrainState& st, const Vocab& v,
                                       const std::vector<DialogueSample>& samples,
                                       const NegativeSampler& sampler, DataOrder& order,
                                       int batch_size) {
    const auto step_index = static_cast<uint64_t>(st.global_step + 1);
    Rng neg_rng = Rng(st.seed).stream("neg").stream(step_index);
    Rng z_rng = Rng(st.seed).stream("z").stream(step_index);
    Rng drop_rng = Rng(st.seed).stream("drop").stream(step_index);
    std::vector<TrainingPair> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        const int idx = order.next();
        TrainingPair pair;
        pair.sample = &samples[static_cast<size_t>(idx)];
        pair.negative_response = sampler.sample(v.encode(pair.sample->response, false), neg_rng);
        batch.push_back(std::move(pair));
    }
    auto lb = train_batch(st, v, batch, z_rng,
                          st.params.config.dropout > 0.0 ? &drop_rng : nullptr);
    st.epoch = order.epoch();
    st.epoch_pos = order.pos();
    return lb;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, format version, config hash, config fields, optimizer
// hyperparameters, counters, then every tensor in canonical order as
// length-prefixed named little-endian f64 arrays (data, Adam m, Adam v).
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'D', 'L', 'G', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCheckpointVersion = 1;

inline void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}
inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}
inline void put_i64(std::ostream& os, int64_t v) { put_u64(os, static_cast<uint64_t>(v)); }
inline void put_i32(std::ostream& os, int32_t v) { put_u32(os, static_cast<uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<uint64_t>(v)); }
inline void put_f64s(std::ostream& os, std::span<const double> v) {
    for (double x : v) put_f64(os, x);
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint64_t get_u64(std::istream& is) {
    char b[8];
    if (!is.read(b, 8)) throw CheckpointError("truncated checkpoint");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(b[i])) << (8 * i);
    return v;
}
inline uint32_t get_u32(std::istream& is) {
    char b[4];
    if (!is.read(b, 4)) throw CheckpointError("truncated checkpoint");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
    return v;
}
inline int64_t get_i64(std::istream& is) { return static_cast<int64_t>(get_u64(is)); }
inline int32_t get_i32(std::istream& is) { return static_cast<int32_t>(get_u32(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }
inline void get_f64s(std::istream& is, std::span<double> out) {
    for (double& x : out) x = get_f64(is);
}
inline std::string get_str(std::istream& is) {
    const uint32_t n = get_u32(is);
    if (n > (1u << 20)) throw CheckpointError("implausible name length in checkpoint");
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) throw CheckpointError("truncated checkpoint");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const TrainState& st, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
    using namespace detail;
    os.write(kCheckpointMagic, 8);
    put_u32(os, kCheckpointVersion);
    const ModelConfig& mc = st.params.config;
    put_u64(os, mc.hash());
    put_i32(os, mc.layers);
    put_i32(os, mc.hidden);
    put_i32(os, mc.heads);
    put_i32(os, mc.latent_k);
    put_i32(os, mc.vocab_size);
    put_i32(os, mc.max_context_len);
    put_i32(os, mc.max_response_len);
    put_f64(os, mc.dropout);
    put_f64(os, st.opt.lr);
    put_f64(os, st.opt.beta1);
    put_f64(os, st.opt.beta2);
    put_f64(os, st.opt.eps);
    put_i64(os, st.opt.t);
    put_i64(os, st.epoch);
    put_i64(os, st.epoch_pos);
    put_i64(os, st.global_step);
    put_u64(os, st.seed);
    auto named = st.params.named();
    put_u32(os, static_cast<uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        put_str(os, name);
        put_u32(os, static_cast<uint32_t>(t->shape.size()));
        for (int d : t->shape) put_i32(os, d);
        put_f64s(os, t->data);
        const auto& s = st.opt.slots.at(name);
        put_f64s(os, s.m);
        put_f64s(os, s.v);
    }
    if (!os) throw CheckpointError("failed writing checkpoint: " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    using namespace detail;
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw CheckpointError("bad checkpoint magic: " + path);
    }
    const uint32_t version = get_u32(is);
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const uint64_t stored_hash = get_u64(is);
    ModelConfig mc;
    mc.layers = get_i32(is);
    mc.hidden = get_i32(is);
    mc.heads = get_i32(is);
    mc.latent_k = get_i32(is);
    mc.vocab_size = get_i32(is);
    mc.max_context_len = get_i32(is);
    mc.max_response_len = get_i32(is);
    mc.dropout = get_f64(is);
    if (mc.hash() != stored_hash) {
        throw CheckpointError("checkpoint config hash mismatch (corrupt or edited file)");
    }
    mc.validate();
    TrainState st;
    Rng scratch(0);
    st.params = Parameters::init(mc, scratch);
    TrainerConfig tc;
    tc.lr = get_f64(is);
    tc.beta1 = get_f64(is);
    tc.beta2 = get_f64(is);
    tc.eps = get_f64(is);
    st.opt = OptimizerState::init(st.params, tc);
    st.opt.t = get_i64(is);
    st.epoch = get_i64(is);
    st.epoch_pos = get_i64(is);
    st.global_step = get_i64(is);
    st.seed = get_u64(is);
    const uint32_t count = get_u32(is);
    auto named = st.params.named();
    if (count != named.size()) {
        throw CheckpointError("checkpoint tensor count " + std::to_string(count) +
                              " does not match model (" + std::to_string(named.size()) + ")");
    }
    for (const auto& [name, t] : named) {
        const std::string stored = get_str(is);
        if (stored != name) {
            throw CheckpointError("checkpoint tensor order mismatch: expected " + name +
                                  ", found " + stored);
        }
        const uint32_t ndim = get_u32(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = get_i32(is);
        if (shape != t->shape) {
            throw CheckpointError("checkpoint shape mismatch for " + name);
        }
        get_f64s(is, t->data);
        auto& s = st.opt.slots.at(name);
        get_f64s(is, s.m);
        get_f64s(is, s.v);
    }
    return st;
}

// Guard for commands that were handed an explicit model config: the
// checkpoint must agree with it.
inline TrainState load_checkpoint(const std::string& path, const ModelConfig& expected) {
    TrainState st = load_checkpoint(path);
    if (st.params.config.hash() != expected.hash()) {
        throw CheckpointError("checkpoint was written with a different model config");
    }
    return st;
}

}  // namespace dialoglm
