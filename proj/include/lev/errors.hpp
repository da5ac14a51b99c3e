#pragma once

#include <stdexcept>
#include <string>

namespace lev {

/// Base for every error the engine raises. Each subclass names one fault
/// class so callers can react (skip a query, reject a file, abort a run).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (rows, columns, embedding width).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value lies outside the domain of an operation (NaN, zero norm, bad token).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or task description.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A requested computation exceeds a configured size bound.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Failure talking to an external backend process.
class TransportError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public TransportError {
public:
    using TransportError::TransportError;
};

/// The peer violated the LEV/1 protocol (malformed frame, id mismatch).
class ProtocolError : public TransportError {
public:
    using TransportError::TransportError;
};

/// The peer answered with a structured error object.
class RemoteError : public TransportError {
public:
    RemoteError(std::string code, const std::string& message)
        : TransportError("remote error [" + code + "]: " + message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

/// Failure reading a persisted buffer, weaver or checkpoint.
class LoadError : public Error {
public:
    enum class Kind { NotFound, BadMagic, VersionMismatch, DimensionMismatch, Truncated, Checksum, Malformed };

    LoadError(Kind kind, const std::string& message) : Error(message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace lev
