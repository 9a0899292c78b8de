#pragma once

#include <stdexcept>
#include <string>

namespace overton {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Schema text could not be parsed at all.
struct SyntaxError : Error {
    SyntaxError(int line_, std::string message_)
        : Error("syntax error at line " + std::to_string(line_) + ": " + message_),
          line(line_),
          message(std::move(message_)) {}
    int line;
    std::string message;
};

enum class ValidationKind {
    UnknownRef,
    CycleDetected,
    DuplicateName,
    EmptyLabelSet,
    BadSliceTag,
};

inline const char* to_string(ValidationKind k) {
    switch (k) {
        case ValidationKind::UnknownRef: return "UnknownRef";
        case ValidationKind::CycleDetected: return "CycleDetected";
        case ValidationKind::DuplicateName: return "DuplicateName";
        case ValidationKind::EmptyLabelSet: return "EmptyLabelSet";
        case ValidationKind::BadSliceTag: return "BadSliceTag";
    }
    return "?";
}

// A structurally well-formed schema violating an invariant.
struct ValidationError : Error {
    ValidationError(ValidationKind kind_, std::string path_, const std::string& detail = "")
        : Error(std::string(to_string(kind_)) + " at " + path_ +
                (detail.empty() ? "" : ": " + detail)),
          kind(kind_),
          path(std::move(path_)) {}
    ValidationKind kind;
    std::string path;
};

struct IoError : Error {
    using Error::Error;
};

// More than half of a data file failed validation: almost certainly the wrong file.
struct FatalFormatError : Error {
    using Error::Error;
};

struct OutOfRange : Error {
    using Error::Error;
};

struct GranularityMismatch : Error {
    using Error::Error;
};

struct DegenerateMatrix : Error {
    using Error::Error;
};

struct UnknownSource : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct UnsupportedCombination : Error {
    using Error::Error;
};

struct NonFiniteError : Error {
    using Error::Error;
};

struct EmptySearchSpace : Error {
    using Error::Error;
};

struct EmptyTrainSet : Error {
    using Error::Error;
};

struct MissingPayload : Error {
    explicit MissingPayload(std::string payload_)
        : Error("missing payload: " + payload_), payload(std::move(payload_)) {}
    std::string payload;
};

struct EmptyCandidateSet : Error {
    using Error::Error;
};

struct NoGoldLabels : Error {
    using Error::Error;
};

}  // namespace overton
