#pragma once

#include <stdexcept>
#include <string>

namespace dialoglm {

// Base for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A softmax row with no unmasked position.
struct MaskError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Malformed or empty corpus / vocab files.
struct CorpusError : Error {
    using Error::Error;
};

// Composed input exceeds the configured sequence limits.
struct LengthError : Error {
    using Error::Error;
};

// Latent index outside [0, K).
struct LatentRangeError : Error {
    using Error::Error;
};

// Negative sampling cannot find a distinct response.
struct SamplingError : Error {
    using Error::Error;
};

// Checkpoint version/hash mismatch or corruption.
struct SelectionError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

// Bad config file or unknown key.
struct ConfigError : Error {
    using Error::Error;
};

// Metric preconditions violated (empty corpus etc.).
struct MetricError : Error {
    using Error::Error;
};

// Training produced a non-finite loss. Carries the last breakdown.
struct DivergenceError : NumericError {
    DivergenceError(const std::string& msg, double nll, double bow, double rs)
        : NumericError(msg), nll(nll), bow(bow), rs(rs) {}
    double nll, bow, rs;
};

}  // namespace dialoglm
