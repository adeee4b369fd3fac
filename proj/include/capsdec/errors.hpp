#pragma once

#include <stdexcept>
#include <string>

namespace capsdec {

// Shape disagreement between tensors or between a tensor and an operation.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument value (label out of range, empty dataset, k > V, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents (IDX magic, CSV rows, checkpoint container).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mutually inconsistent trained models fed to the pipeline.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerically undefined result (constant input to R^2/PCC, degenerate fit).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace capsdec
