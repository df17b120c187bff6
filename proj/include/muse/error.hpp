#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace muse {

enum class ErrorKind {
    MalformedSession,
    IndexOutOfRange,
    BackendUnavailable,
    ContractViolation,
    UnsupportedCapability,
    ScriptMismatch,
    EmptyProfile,
    ParseFailure,
    IoError,
    FormatError,
    InvalidFraction,
    ProfileSessionMismatch,
    InvalidCandidate,
    OutOfRange,
    MissingRationale,
    LengthMismatch,
    EmptySet,
    EmptyTrajectory,
    GroupTooSmall,
    ZeroVector,
    SessionTerminated,
    EmptyCorpus,
    ConfigError,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure surfaced by the library. `transient()` marks errors the
/// gateway may retry (connection resets, 5xx, rate limits).
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message, bool transient = false);

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] bool transient() const noexcept { return transient_; }

private:
    ErrorKind kind_;
    bool transient_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace muse
