#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace corrdst {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: malformed files, unknown keys, violated preconditions.
/// The CLI maps this family to exit status 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : ValidationError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A stage was invoked before the outputs it depends on exist.
class DependencyError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Failures talking to (or produced by) an LM or embedding backend.
/// The CLI maps this family, and any other runtime failure, to exit status 2.
class BackendError : public Error {
public:
    using Error::Error;
};

class TransportError : public BackendError {
public:
    using BackendError::BackendError;
};

class MissingRecordingError : public BackendError {
public:
    explicit MissingRecordingError(const std::string& digest)
        : BackendError("missing recording for digest " + digest), digest_(digest) {}

    const std::string& digest() const noexcept { return digest_; }

private:
    std::string digest_;
};

/// Wraps a failure with the name of the pipeline stage that raised it.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, bool validation)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)), validation_(validation) {}

    const std::string& stage() const noexcept { return stage_; }
    bool is_validation() const noexcept { return validation_; }

private:
    std::string stage_;
    bool validation_;
};

}  // namespace corrdst
