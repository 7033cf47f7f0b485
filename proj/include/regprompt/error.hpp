#pragma once

#include <stdexcept>
#include <string>

namespace regprompt {

/// Base of all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (file headers, JSON schemas, grid mismatches).
class DataError : public Error {
public:
    using Error::Error;
};

/// A caller violated an operation precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// External segmenter failures: unreachable backend, timeout, framing, contract violations.
class BackendError : public Error {
public:
    enum class Kind { unreachable, timeout, framing, dimension_mismatch, remote };

    BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Registration could not proceed (e.g. the mapped fixed grid no longer overlaps the moving image).
class RegistrationError : public Error {
public:
    using Error::Error;
};

/// Numerical inversion did not reach the residual tolerance.
class InversionError : public Error {
public:
    InversionError(const std::string& what, double worst_residual)
        : Error(what), worst_residual_(worst_residual) {}
    [[nodiscard]] double worst_residual() const noexcept { return worst_residual_; }

private:
    double worst_residual_;
};

/// A structure has no usable positive prompt; the candidate is skipped, not fatal.
class StructureEmptyError : public Error {
public:
    using Error::Error;
};

}  // namespace regprompt
