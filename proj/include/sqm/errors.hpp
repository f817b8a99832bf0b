#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sqm {

// Shape or rank disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter or unknown enumerated option.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// API misuse (non-scalar loss, duplicate wires, out-of-range epoch, ...).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Batch statistics requested on fewer than two rows.
struct BatchError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct RangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input table does not carry the expected header.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed row; line numbers are 1-based and count the header.
struct ParseError : std::runtime_error {
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

} // namespace sqm
