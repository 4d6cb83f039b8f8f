#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fmtm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based line number when known (0 otherwise).
class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Input parsed but violates a type invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Archive written by an incompatible format version.
class VersionError : public Error {
public:
    using Error::Error;
};

/// Numerical failure: NaN/Inf objective, ELBO decrease beyond slack, singular covariance.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Raised by fit() when the lower bound decreases beyond its slack.
class ElboDecreaseError : public NumericalError {
public:
    ElboDecreaseError(std::size_t sweep, double before, double after)
        : NumericalError("ELBO decreased at sweep " + std::to_string(sweep) + ": " +
                         std::to_string(before) + " -> " + std::to_string(after)),
          sweep_(sweep) {}

    std::size_t sweep() const noexcept { return sweep_; }

private:
    std::size_t sweep_;
};

}  // namespace fmtm
