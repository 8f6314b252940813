#pragma once

#include <stdexcept>
#include <string>

namespace elpg {

// Error taxonomy. The CLI maps these onto distinct exit codes:
// ConfigError -> 2, DataError -> 3, anything else -> 4.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes that do not conform to an operation's contract.
struct DimensionError : Error {
    using Error::Error;
};

// Mathematically invalid input (zero variance, log of nonpositive, ...).
struct DomainError : Error {
    using Error::Error;
};

// Invalid run configuration (flags, fold counts, infeasible cohorts).
struct ConfigError : Error {
    using Error::Error;
};

// Bad or missing input data: unreadable files, format violations, truncation.
struct DataError : Error {
    using Error::Error;
};

// API misuse: calling backward on a non-scalar, stepping without gradients.
struct ContractError : Error {
    using Error::Error;
};

}  // namespace elpg
