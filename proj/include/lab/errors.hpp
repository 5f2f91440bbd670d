#pragma once

#include <stdexcept>
#include <string>

namespace lab {

// Error taxonomy. The CLI maps these to process exit codes:
// ConfigError -> 2, LoadError/missing artifacts -> 3, NumericalError -> 4.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated precondition of an operation (bad argument state, missing grad, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint / dataset file problems: version mismatch, truncation, bad shapes.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (e.g. NaN loss abort).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace lab
