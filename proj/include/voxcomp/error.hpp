#pragma once

#include <stdexcept>
#include <string>

namespace voxcomp {

/// Broad failure category; the CLI maps each one to a distinct exit code.
enum class ErrorKind {
    usage,
    data,
    training,
    evaluation,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Data-side failures (malformed volumes, bad files, invalid corpus policies).
struct InvalidVolumeError : Error {
    explicit InvalidVolumeError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct OutOfRangeError : Error {
    explicit OutOfRangeError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct UndefinedFractionError : Error {
    explicit UndefinedFractionError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct NoCandidateError : Error {
    explicit NoCandidateError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct InvalidPolicyError : Error {
    explicit InvalidPolicyError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct InvalidSpecError : Error {
    explicit InvalidSpecError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct MissingFileError : IoError {
    explicit MissingFileError(const std::string& path)
        : IoError("missing file: " + path), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};
struct ChecksumError : IoError {
    explicit ChecksumError(const std::string& w) : IoError(w) {}
};
struct ParseError : IoError {
    ParseError(const std::string& w, std::size_t byte_offset)
        : IoError(w + " (at byte " + std::to_string(byte_offset) + ")"), offset_(byte_offset) {}
    std::size_t byte_offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Model and objective contract violations.
struct ShapeError : Error {
    explicit ShapeError(const std::string& w) : Error(ErrorKind::usage, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::usage, w) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& w) : Error(ErrorKind::usage, w) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& w) : Error(ErrorKind::training, w) {}
};

struct EvaluationError : Error {
    explicit EvaluationError(const std::string& w) : Error(ErrorKind::evaluation, w) {}
};
struct AlignmentError : EvaluationError {
    explicit AlignmentError(const std::string& w) : EvaluationError(w) {}
};

}  // namespace voxcomp
