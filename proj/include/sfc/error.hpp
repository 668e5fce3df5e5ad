#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sfc {

enum class Errc {
    InvalidConfig,
    DuplicatePrefix,
    UnknownPrefix,
    PoolExhausted,
    StaleRef,
    DoubleFree,
    ForeignFrame,
    OutOfBounds,
    InvalidCapacity,
    FillFull,
    DuplicateFunction,
    UnknownFunction,
    UnknownDestination,
    InboxFull,
    Filtered,
    Closed,
    InvalidSampleCount,
    CycleDetected,
    ModeChangeAfterStart,
    SinkUnavailable,
    Malformed,
    NoBackends,
    ParseError,
    UpstreamUnavailable,
    Timeout,
    DuplicatePriority,
    PlaneUnavailable,
    UnknownModel,
    IncompleteTrace,
    InvalidTolerance,
    NeverLossFree,
    UnsupportedPlatform,
    SyntaxError,
    UnresolvedReference,
    IoError,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace sfc
