#pragma once

#include <stdexcept>
#include <string>

namespace acemerge {

/// Broad classification used by the CLI to pick an exit code.
enum class ErrorKind {
    validation,  // bad arguments, shape/architecture mismatch
    io,          // unreadable/unwritable files, malformed containers
    numerical,   // factorization failure, non-finite values, divergence
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Raised by the SPD solver; carries the zero-based pivot at which the
/// Cholesky factorization met a non-positive diagonal.
class FactorizationError : public Error {
public:
    FactorizationError(std::size_t pivot, const std::string& what)
        : Error(ErrorKind::numerical, what), pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

private:
    std::size_t pivot_;
};

} // namespace acemerge
