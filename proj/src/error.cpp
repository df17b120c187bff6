#include "muse/error.hpp"

namespace muse {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::MalformedSession: return "MalformedSession";
        case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorKind::BackendUnavailable: return "BackendUnavailable";
        case ErrorKind::ContractViolation: return "ContractViolation";
        case ErrorKind::UnsupportedCapability: return "UnsupportedCapability";
        case ErrorKind::ScriptMismatch: return "ScriptMismatch";
        case ErrorKind::EmptyProfile: return "EmptyProfile";
        case ErrorKind::ParseFailure: return "ParseFailure";
        case ErrorKind::IoError: return "IoError";
        case ErrorKind::FormatError: return "FormatError";
        case ErrorKind::InvalidFraction: return "InvalidFraction";
        case ErrorKind::ProfileSessionMismatch: return "ProfileSessionMismatch";
        case ErrorKind::InvalidCandidate: return "InvalidCandidate";
        case ErrorKind::OutOfRange: return "OutOfRange";
        case ErrorKind::MissingRationale: return "MissingRationale";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::EmptySet: return "EmptySet";
        case ErrorKind::EmptyTrajectory: return "EmptyTrajectory";
        case ErrorKind::GroupTooSmall: return "GroupTooSmall";
        case ErrorKind::ZeroVector: return "ZeroVector";
        case ErrorKind::SessionTerminated: return "SessionTerminated";
        case ErrorKind::EmptyCorpus: return "EmptyCorpus";
        case ErrorKind::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message, bool transient)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message),
      kind_(kind),
      transient_(transient) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace muse
