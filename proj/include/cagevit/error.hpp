#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cagevit {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or geometry disagreement between operands.
struct DimensionError : Error {
    using Error::Error;
};

// A caller violated an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};

// A primitive produced NaN/Inf from finite inputs, or was fed non-finite data.
struct NumericError : Error {
    using Error::Error;
};

// Malformed serialized input; carries the byte offset where parsing stopped.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t offset)
        : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::size_t byte_offset;
};

// Filesystem-level failure (missing file, refusal to overwrite, short write).
struct IoError : Error {
    using Error::Error;
};

// Benchmark timing could not produce a trustworthy sample.
struct MeasurementError : Error {
    using Error::Error;
};

// Training produced a non-finite loss and the run was halted.
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace cagevit
