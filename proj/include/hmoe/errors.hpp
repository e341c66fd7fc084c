#pragma once

#include <stdexcept>
#include <string>

namespace hmoe {

// Shape/rank violations (mismatched matmul dims, empty reductions, ...).
struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error("dim error: " + msg) {}
};

// NaN/Inf produced or consumed where finite values are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Out-of-range token/expert/vocab indices.
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

// Invalid configuration values (k > n_experts, V not divisible by C, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Statistics requested over an empty batch.
struct StatError : std::runtime_error {
    explicit StatError(const std::string& msg) : std::runtime_error("stat error: " + msg) {}
};

// Checkpoint / file format problems.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Misuse of the tape (backward replayed twice, invalid handle, ...).
struct TapeError : std::logic_error {
    explicit TapeError(const std::string& msg) : std::logic_error("tape error: " + msg) {}
};

}  // namespace hmoe
