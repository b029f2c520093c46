#pragma once

#include <stdexcept>
#include <string>

namespace oncokit {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Extents that do not line up (matmul inner dims, conv output size, patch divisibility).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Binary file does not match the declared layout.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Tabular input could not be parsed; carries the 1-based data row.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row)
        : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

/// A metric has no defined value on the given input (e.g. no comparable pairs).
class EvaluationError : public Error {
public:
    using Error::Error;
};

/// An iterative fit left its admissible region (separation, singular Hessian).
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace oncokit
