#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dialoglm/errors.hpp"
#include "dialoglm/rng.hpp"

namespace dialoglm {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of 64-bit floats. Rank 1 or 2 is all the model
// needs. Gradients live alongside the data and are allocated lazily on
// the first accumulation.
class Tensor {
public:
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until ensure_grad()
    bool requires_grad = false;

    static TensorPtr create(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor>();
        t->shape = std::move(shape);
        t->data.assign(static_cast<size_t>(t->numel()), 0.0);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr from(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        if (values.size() != t->data.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + t->shape_str());
        }
        t->data = std::move(values);
        return t;
    }

    static TensorPtr scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.empty() ? 1 : shape.back(); }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), 0.0);
    }

    void fill_normal(Rng& rng, double stddev) {
        for (auto& v : data) v = rng.normal(0.0, stddev);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

// Records one backward closure per op, replayed in exact reverse order.
class Tape {
public:
    void record(std::function<void()> backward) {
        nodes_.push_back(std::move(backward));
    }

    // Seeds d(loss)/d(loss) = 1 and propagates through the recorded graph.
    void backward(const TensorPtr& loss) {
        if (loss->numel() != 1) {
            throw ShapeError("backward() needs a scalar loss, got " + loss->shape_str());
        }
        loss->ensure_grad();
        loss->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline void check_finite(const TensorPtr& t, const char* op) {
    for (double v : t->data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

inline bool same_shape(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape;
}

// out[m,n] += a[m,k] * b[k,n], cache-friendly ikj order.
inline void matmul_acc(std::span<const double> a, std::span<const double> b,
                       std::span<double> out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
inline void matmul_nt_acc(std::span<const double> a, std::span<const double> b,
                          std::span<double> out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b.data() + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
inline void matmul_tn_acc(std::span<const double> a, std::span<const double> b,
                          std::span<double> out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        const double* brow = b.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* orow = out.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Each returns a fresh tensor and, when gradients are required, records
// its backward closure on the tape.
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
        throw ShapeError("matmul shapes do not agree: " + a->shape_str() + " x " +
                         b->shape_str());
    }
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = Tensor::create({m, n}, a->requires_grad || b->requires_grad);
    detail::matmul_acc(a->data, b->data, out->data, m, k, n);
    if (out->requires_grad) {
        tape.record([a, b, out, m, k, n] {
            out->ensure_grad();
            if (a->requires_grad) {
                a->ensure_grad();
                detail::matmul_nt_acc(out->grad, b->data, a->grad, m, n, k);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::matmul_tn_acc(a->data, out->grad, b->grad, m, k, n);
            }
        });
    }
    return out;
}

inline TensorPtr transpose(Tape& tape, const TensorPtr& a) {
    if (a->shape.size() != 2) throw ShapeError("transpose needs rank 2, got " + a->shape_str());
    const int m = a->shape[0], n = a->shape[1];
    auto out = Tensor::create({n, m}, a->requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->at(j, i) = a->at(i, j);
    if (out->requires_grad) {
        tape.record([a, out, m, n] {
            out->ensure_grad();
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) a->grad[static_cast<size_t>(i) * n + j] +=
                    out->grad[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (!detail::same_shape(*a, *b)) {
        throw ShapeError("add shapes differ: " + a->shape_str() + " vs " + b->shape_str());
    }
    auto out = Tensor::create(a->shape, a->requires_grad || b->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        tape.record([a, b, out] {
            out->ensure_grad();
            for (auto* t : {a.get(), b.get()}) {
                if (!t->requires_grad) continue;
                t->ensure_grad();
                for (size_t i = 0; i < out->grad.size(); ++i) t->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

// x[m,n] + v[n] broadcast over rows.
inline TensorPtr add_rowwise(Tape& tape, const TensorPtr& x, const TensorPtr& v) {
    if (x->shape.size() != 2 || v->numel() != x->shape[1]) {
        throw ShapeError("add_rowwise shapes differ: " + x->shape_str() + " vs " +
                         v->shape_str());
    }
    const int m = x->shape[0], n = x->shape[1];
    auto out = Tensor::create({m, n}, x->requires_grad || v->requires_grad);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->at(i, j) = x->at(i, j) + v->data[j];
    if (out->requires_grad) {
        tape.record([x, v, out, m, n] {
            out->ensure_grad();
            if (x->requires_grad) {
                x->ensure_grad();
                for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) v->grad[j] += out->grad[static_cast<size_t>(i) * n + j];
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& x, double c) {
    auto out = Tensor::create(x->shape, x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * c;
    if (out->requires_grad) {
        tape.record([x, out, c] {
            out->ensure_grad();
            x->ensure_grad();
            for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += c * out->grad[i];
        });
    }
    return out;
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline TensorPtr gelu(Tape& tape, const TensorPtr& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    auto out = Tensor::create(x->shape, x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    if (out->requires_grad) {
        tape.record([x, out] {
            out->ensure_grad();
            x->ensure_grad();
            for (size_t i = 0; i < x->grad.size(); ++i) {
                const double v = x->data[i];
                const double u = kC * (v + kA * v * v * v);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                x->grad[i] += d * out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr sigmoid(Tape& tape, const TensorPtr& x) {
    auto out = Tensor::create(x->shape, x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
    }
    if (out->requires_grad) {
        tape.record([x, out] {
            out->ensure_grad();
            x->ensure_grad();
            for (size_t i = 0; i < x->grad.size(); ++i) {
                const double y = out->data[i];
                x->grad[i] += y * (1.0 - y) * out->grad[i];
            }
        });
    }
    return out;
}

// Row-wise softmax over positions where mask == 1; masked positions are
// exactly 0 in the output. The mask never carries gradients.
inline TensorPtr masked_softmax(Tape& tape, const TensorPtr& logits, const TensorPtr& mask) {
    if (!detail::same_shape(*logits, *mask)) {
        throw ShapeError("masked_softmax mask shape " + mask->shape_str() +
                         " does not match logits " + logits->shape_str());
    }
    const int n = logits->cols();
    const int m = static_cast<int>(logits->numel() / n);
    auto out = Tensor::create(logits->shape, logits->requires_grad);
    for (int i = 0; i < m; ++i) {
        const size_t base = static_cast<size_t>(i) * n;
        double maxv = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (mask->data[base + j] != 0.0) maxv = std::max(maxv, logits->data[base + j]);
        }
        if (!std::isfinite(maxv)) {
            throw MaskError("masked_softmax row " + std::to_string(i) +
                            " has no unmasked position");
        }
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mask->data[base + j] != 0.0) {
                out->data[base + j] = std::exp(logits->data[base + j] - maxv);
                denom += out->data[base + j];
            }
        }
        for (int j = 0; j < n; ++j) {
            if (mask->data[base + j] != 0.0) out->data[base + j] /= denom;
        }
    }
    if (out->requires_grad) {
        tape.record([logits, out, m, n] {
            out->ensure_grad();
            logits->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t base = static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += out->grad[base + j] * out->data[base + j];
                for (int j = 0; j < n; ++j) {
                    logits->grad[base + j] +=
                        out->data[base + j] * (out->grad[base + j] - dot);
                }
            }
        });
    }
    return out;
}

// Per-row standardization followed by gain/bias. Variance is the biased
// (1/n) estimate with eps inside the square root.
inline TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain,
                            const TensorPtr& bias, double eps = 1e-5) {
    const int n = x->cols();
    if (gain->numel() != n || bias->numel() != n) {
        throw ShapeError("layer_norm gain/bias length must be " + std::to_string(n));
    }
    const int m = static_cast<int>(x->numel() / n);
    auto out = Tensor::create(x->shape,
                              x->requires_grad || gain->requires_grad || bias->requires_grad);
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto inv_sd = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i) {
        const size_t base = static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += x->data[base + j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x->data[base + j] - mean;
            var += d * d;
        }
        var /= n;
        const double isd = 1.0 / std::sqrt(var + eps);
        (*inv_sd)[i] = isd;
        for (int j = 0; j < n; ++j) {
            const double h = (x->data[base + j] - mean) * isd;
            (*xhat)[base + j] = h;
            out->data[base + j] = gain->data[j] * h + bias->data[j];
        }
    }
    if (out->requires_grad) {
        tape.record([x, gain, bias, out, xhat, inv_sd, m, n] {
            out->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t base = static_cast<size_t>(i) * n;
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    for (int j = 0; j < n; ++j)
                        gain->grad[j] += out->grad[base + j] * (*xhat)[base + j];
                }
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    for (int j = 0; j < n; ++j) bias->grad[j] += out->grad[base + j];
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double dy = out->grad[base + j] * gain->data[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (*xhat)[base + j];
                    }
                    for (int j = 0; j < n; ++j) {
                        const double dy = out->grad[base + j] * gain->data[j];
                        x->grad[base + j] += (*inv_sd)[i] *
                            (dy - sum_dy / n - (*xhat)[base + j] * sum_dy_xhat / n);
                    }
                }
            }
        });
    }
    return out;
}

// Gathers table rows by index into an [ids.size(), D] tensor. When
// skip_row0_grad is set, row 0 of the table receives no gradient (used for
// the pinned "empty" role/turn/position rows).
inline TensorPtr embedding_rows(Tape& tape, const TensorPtr& table,
                                std::vector<int> ids, bool skip_row0_grad = false) {
    if (table->shape.size() != 2) {
        throw ShapeError("embedding table must be rank 2, got " + table->shape_str());
    }
    const int rows = table->shape[0], d = table->shape[1];
    const int s = static_cast<int>(ids.size());
    auto out = Tensor::create({s, d}, table->requires_grad);
    for (int i = 0; i < s; ++i) {
        if (ids[i] < 0 || ids[i] >= rows) {
            throw ShapeError("embedding index " + std::to_string(ids[i]) +
                             " out of range for table " + table->shape_str());
        }
        const size_t src = static_cast<size_t>(ids[i]) * d;
        std::copy_n(table->data.begin() + src, d, out->data.begin() + static_cast<size_t>(i) * d);
    }
    if (out->requires_grad) {
        auto idv = std::make_shared<std::vector<int>>(std::move(ids));
        tape.record([table, out, idv, d, skip_row0_grad] {
            out->ensure_grad();
            table->ensure_grad();
            for (size_t i = 0; i < idv->size(); ++i) {
                const int id = (*idv)[i];
                if (skip_row0_grad && id == 0) continue;
                double* dst = table->grad.data() + static_cast<size_t>(id) * d;
                const double* src = out->grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline TensorPtr slice_rows(Tape& tape, const TensorPtr& x, int r0, int r1) {
    if (x->shape.size() != 2 || r0 < 0 || r1 > x->shape[0] || r0 >= r1) {
        throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") invalid for " + x->shape_str());
    }
    const int n = x->shape[1];
    auto out = Tensor::create({r1 - r0, n}, x->requires_grad);
    std::copy_n(x->data.begin() + static_cast<size_t>(r0) * n,
                static_cast<size_t>(r1 - r0) * n, out->data.begin());
    if (out->requires_grad) {
        tape.record([x, out, r0, n] {
            out->ensure_grad();
            x->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i)
                x->grad[static_cast<size_t>(r0) * n + i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr slice_cols(Tape& tape, const TensorPtr& x, int c0, int c1) {
    if (x->shape.size() != 2 || c0 < 0 || c1 > x->shape[1] || c0 >= c1) {
        throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + x->shape_str());
    }
    const int m = x->shape[0], n = x->shape[1], w = c1 - c0;
    auto out = Tensor::create({m, w}, x->requires_grad);
    for (int i = 0; i < m; ++i)
        std::copy_n(x->data.begin() + static_cast<size_t>(i) * n + c0, w,
                    out->data.begin() + static_cast<size_t>(i) * w);
    if (out->requires_grad) {
        tape.record([x, out, c0, m, n, w] {
            out->ensure_grad();
            x->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    x->grad[static_cast<size_t>(i) * n + c0 + j] +=
                        out->grad[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

inline TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int m = parts[0]->shape[0];
    int total = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        if (p->shape.size() != 2 || p->shape[0] != m) {
            throw ShapeError("concat_cols row mismatch: " + p->shape_str());
        }
        total += p->shape[1];
        needs_grad = needs_grad || p->requires_grad;
    }
    auto out = Tensor::create({m, total}, needs_grad);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int i = 0; i < m; ++i)
            std::copy_n(p->data.begin() + static_cast<size_t>(i) * w, w,
                        out->data.begin() + static_cast<size_t>(i) * total + off);
        off += w;
    }
    if (needs_grad) {
        tape.record([parts, out, m, total] {
            out->ensure_grad();
            int off = 0;
            for (const auto& p : parts) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                out->grad[static_cast<size_t>(i) * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

inline TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const int n = parts[0]->cols();
    int total = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        if (p->shape.size() != 2 || p->shape[1] != n) {
            throw ShapeError("concat_rows column mismatch: " + p->shape_str());
        }
        total += p->shape[0];
        needs_grad = needs_grad || p->requires_grad;
    }
    auto out = Tensor::create({total, n}, needs_grad);
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->data.size();
    }
    if (needs_grad) {
        tape.record([parts, out] {
            out->ensure_grad();
            size_t off = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += out->grad[off + i];
                }
                off += p->data.size();
            }
        });
    }
    return out;
}

inline TensorPtr repeat_rows(Tape& tape, const TensorPtr& x, int times) {
    if (x->shape.size() != 2 || x->shape[0] != 1) {
        throw ShapeError("repeat_rows needs a [1,n] tensor, got " + x->shape_str());
    }
    const int n = x->shape[1];
    auto out = Tensor::create({times, n}, x->requires_grad);
    for (int i = 0; i < times; ++i)
        std::copy_n(x->data.begin(), n, out->data.begin() + static_cast<size_t>(i) * n);
    if (out->requires_grad) {
        tape.record([x, out, times, n] {
            out->ensure_grad();
            x->ensure_grad();
            for (int i = 0; i < times; ++i)
                for (int j = 0; j < n; ++j)
                    x->grad[j] += out->grad[static_cast<size_t>(i) * n + j];
        });
    }
    return out;
}

// Sum over rows of -log softmax(logits_row)[target_row]. Stable via
// log-sum-exp; duplicate targets across rows simply sum.
inline TensorPtr cross_entropy_sum(Tape& tape, const TensorPtr& logits,
                                   std::vector<int> targets) {
    if (logits->shape.size() != 2 || static_cast<int>(targets.size()) != logits->shape[0]) {
        throw ShapeError("cross_entropy_sum needs one target per logits row");
    }
    const int m = logits->shape[0], n = logits->shape[1];
    for (int t : targets) {
        if (t < 0 || t >= n) throw ShapeError("cross_entropy target out of range");
    }
    auto out = Tensor::create({1}, logits->requires_grad);
    auto logz = std::make_shared<std::vector<double>>(m);
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        const size_t base = static_cast<size_t>(i) * n;
        double maxv = logits->data[base];
        for (int j = 1; j < n; ++j) maxv = std::max(maxv, logits->data[base + j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(logits->data[base + j] - maxv);
        (*logz)[i] = maxv + std::log(denom);
        total += (*logz)[i] - logits->data[base + targets[i]];
    }
    out->data[0] = total;
    if (out->requires_grad) {
        auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
        tape.record([logits, out, tgt, logz, m, n] {
            out->ensure_grad();
            logits->ensure_grad();
            const double g = out->grad[0];
            for (int i = 0; i < m; ++i) {
                const size_t base = static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    const double p = std::exp(logits->data[base + j] - (*logz)[i]);
                    logits->grad[base + j] += g * p;
                }
                logits->grad[base + (*tgt)[i]] -= g;
            }
        });
    }
    return out;
}

// Binary cross-entropy from a single logit, computed in the stable
// softplus form: label 1 -> softplus(-a), label 0 -> softplus(a).
inline TensorPtr bce_with_logits(Tape& tape, const TensorPtr& logit, double label) {
    if (logit->numel() != 1) {
        throw ShapeError("bce_with_logits needs a scalar logit, got " + logit->shape_str());
    }
    const double a = logit->data[0];
    auto softplus = [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); };
    auto out = Tensor::create({1}, logit->requires_grad);
    out->data[0] = label > 0.5 ? softplus(-a) : softplus(a);
    if (out->requires_grad) {
        tape.record([logit, out, label] {
            out->ensure_grad();
            logit->ensure_grad();
            const double a = logit->data[0];
            const double s = a >= 0.0 ? 1.0 / (1.0 + std::exp(-a))
                                      : std::exp(a) / (1.0 + std::exp(a));
            logit->grad[0] += (s - label) * out->grad[0];
        });
    }
    return out;
}

// Inverted dropout; identity when rate == 0.
inline TensorPtr dropout(Tape& tape, const TensorPtr& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ShapeError("dropout rate must be < 1");
    auto keep = std::make_shared<std::vector<double>>(x->data.size());
    const double scale = 1.0 / (1.0 - rate);
    auto out = Tensor::create(x->shape, x->requires_grad);
    for (size_t i = 0; i < x->data.size(); ++i) {
        (*keep)[i] = rng.uniform01() >= rate ? scale : 0.0;
        out->data[i] = x->data[i] * (*keep)[i];
    }
    if (out->requires_grad) {
        tape.record([x, out, keep] {
            out->ensure_grad();
            x->ensure_grad();
            for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += (*keep)[i] * out->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking. `build` must construct the full forward graph on the
// given tape from the current parameter values and return the scalar loss.
// ---------------------------------------------------------------------------

// Chooses at most max_coords coordinates per tensor (all of them for small
// tensors), compares tape gradients against central differences, and returns
// the max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double gradient_check(
    const std::function<TensorPtr(Tape&)>& build,
    const std::vector<TensorPtr>& params, double h, int max_coords, Rng& rng,
    const std::function<bool(size_t, int64_t)>& trainable = {}) {
    if (h < 1e-7 || h > 1e-4) {
        throw NumericError("gradient_check step h must lie in [1e-7, 1e-4]");
    }
    for (const auto& p : params) {
        p->ensure_grad();
        p->zero_grad();
    }
    Tape tape;
    auto loss = build(tape);
    tape.backward(loss);
    if (!std::isfinite(loss->data[0])) throw NumericError("gradient_check: non-finite loss");

    auto eval = [&]() {
        Tape t;
        return build(t)->data[0];
    };

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        const int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int c = 0; c < max_coords; ++c)
                coords.push_back(rng.uniform_int(static_cast<int>(n)));
        }
        for (int64_t c : coords) {
            if (trainable && !trainable(pi, c)) continue;
            const double saved = p.data[c];
            p.data[c] = saved + h;
            const double up = eval();
            p.data[c] = saved - h;
            const double down = eval();
            p.data[c] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p.grad[c];
            if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
                throw NumericError("gradient_check: non-finite derivative");
            }
            // Structurally-zero derivatives leave the central difference as
            // pure cancellation noise; an absolute floor keeps those from
            // polluting the relative comparison.
            if (std::abs(analytic - numeric) <= 1e-7) continue;
            const double err = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace dialoglm
