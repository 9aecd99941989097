#pragma once

#include <stdexcept>
#include <string>

namespace snls {

// Invalid hyperparameters or option combinations.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inputs outside an operation's domain: shape mismatches, bad coordinates,
// non-finite values.
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File and format problems. Messages name the offending path or field.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace snls
