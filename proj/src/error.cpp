#include "sfc/error.hpp"

namespace sfc {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::InvalidConfig: return "InvalidConfig";
        case Errc::DuplicatePrefix: return "DuplicatePrefix";
        case Errc::UnknownPrefix: return "UnknownPrefix";
        case Errc::PoolExhausted: return "PoolExhausted";
        case Errc::StaleRef: return "StaleRef";
        case Errc::DoubleFree: return "DoubleFree";
        case Errc::ForeignFrame: return "ForeignFrame";
        case Errc::OutOfBounds: return "OutOfBounds";
        case Errc::InvalidCapacity: return "InvalidCapacity";
        case Errc::FillFull: return "FillFull";
        case Errc::DuplicateFunction: return "DuplicateFunction";
        case Errc::UnknownFunction: return "UnknownFunction";
        case Errc::UnknownDestination: return "UnknownDestination";
        case Errc::InboxFull: return "InboxFull";
        case Errc::Filtered: return "Filtered";
        case Errc::Closed: return "Closed";
        case Errc::InvalidSampleCount: return "InvalidSampleCount";
        case Errc::CycleDetected: return "CycleDetected";
        case Errc::ModeChangeAfterStart: return "ModeChangeAfterStart";
        case Errc::SinkUnavailable: return "SinkUnavailable";
        case Errc::Malformed: return "Malformed";
        case Errc::NoBackends: return "NoBackends";
        case Errc::ParseError: return "ParseError";
        case Errc::UpstreamUnavailable: return "UpstreamUnavailable";
        case Errc::Timeout: return "Timeout";
        case Errc::DuplicatePriority: return "DuplicatePriority";
        case Errc::PlaneUnavailable: return "PlaneUnavailable";
        case Errc::UnknownModel: return "UnknownModel";
        case Errc::IncompleteTrace: return "IncompleteTrace";
        case Errc::InvalidTolerance: return "InvalidTolerance";
        case Errc::NeverLossFree: return "NeverLossFree";
        case Errc::UnsupportedPlatform: return "UnsupportedPlatform";
        case Errc::SyntaxError: return "SyntaxError";
        case Errc::UnresolvedReference: return "UnresolvedReference";
        case Errc::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace sfc
