#pragma once

#include <stdexcept>
#include <string>

namespace popdefer {

// Invalid user-supplied configuration (bad hyperparameter, empty list, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Malformed input file; message carries the offending location.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

// Operation called in the wrong object state (e.g. retraining a frozen backbone).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error("state error: " + msg) {}
};

// Shape or naming mismatch between tensors/parameters.
struct StructuralError : std::runtime_error {
    explicit StructuralError(const std::string& msg) : std::runtime_error("structural error: " + msg) {}
};

// NaN/Inf escaped into a value that must stay finite.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Missing or inconsistent data (uncovered label pair, pool too small, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

}  // namespace popdefer
