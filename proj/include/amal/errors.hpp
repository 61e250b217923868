#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace amal {

/// Broad failure class; the CLI maps it onto a process exit code.
enum class ErrorCategory { io, validation, numeric, state };

/// Root of every error raised by the library. `code()` is a stable
/// machine-readable identifier (it is what the HTTP layer reports as
/// `error_code`).
class Error : public std::runtime_error {
public:
    Error(std::string code, ErrorCategory category, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)), category_(category) {}

    const std::string& code() const noexcept { return code_; }
    ErrorCategory category() const noexcept { return category_; }

private:
    std::string code_;
    ErrorCategory category_;
};

#define AMAL_DEFINE_ERROR(Name, Category)                                  \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& message)                          \
            : Error(#Name, ErrorCategory::Category, message) {}            \
    };

// dataset
AMAL_DEFINE_ERROR(StructureError, validation)
AMAL_DEFINE_ERROR(ClassCountError, validation)
AMAL_DEFINE_ERROR(EmptyDatasetError, validation)
AMAL_DEFINE_ERROR(DuplicateIdError, validation)
AMAL_DEFINE_ERROR(MissingLabelError, validation)
AMAL_DEFINE_ERROR(LabelOverwriteError, validation)
AMAL_DEFINE_ERROR(IoError, io)
AMAL_DEFINE_ERROR(NotFoundError, validation)
AMAL_DEFINE_ERROR(RangeError, validation)

// classifier / checkpoint
AMAL_DEFINE_ERROR(BackboneUnavailableError, validation)
AMAL_DEFINE_ERROR(VersionError, validation)
AMAL_DEFINE_ERROR(ChecksumError, validation)
AMAL_DEFINE_ERROR(IntegrityError, validation)

// metrics
AMAL_DEFINE_ERROR(ShapeError, validation)
AMAL_DEFINE_ERROR(UndefinedMetricError, validation)

// sweep
AMAL_DEFINE_ERROR(EmptyResultError, validation)

// active learning / service
AMAL_DEFINE_ERROR(PoolExhaustedError, state)
AMAL_DEFINE_ERROR(ConflictError, state)
AMAL_DEFINE_ERROR(BindError, io)

#undef AMAL_DEFINE_ERROR

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& message)
        : Error("ParseError", ErrorCategory::validation,
                "line " + std::to_string(line) + ": " + message),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DecodeError : public Error {
public:
    DecodeError(std::string sample_id, const std::string& message)
        : Error("DecodeError", ErrorCategory::validation,
                "cannot decode sample '" + sample_id + "': " + message),
          sample_id_(std::move(sample_id)) {}
    const std::string& sample_id() const noexcept { return sample_id_; }

private:
    std::string sample_id_;
};

class DivergenceError : public Error {
public:
    DivergenceError(int epoch, const std::string& message)
        : Error("DivergenceError", ErrorCategory::numeric,
                "epoch " + std::to_string(epoch) + ": " + message),
          epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

/// Label submission did not cover the pending batch exactly.
class BatchMismatchError : public Error {
public:
    BatchMismatchError(std::vector<std::string> missing, std::vector<std::string> extra);
    const std::vector<std::string>& missing() const noexcept { return missing_; }
    const std::vector<std::string>& extra() const noexcept { return extra_; }

private:
    std::vector<std::string> missing_;
    std::vector<std::string> extra_;
};

}  // namespace amal
