#include "pimae/error.hpp"

namespace pimae {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::DepthNonPositive: return "DepthNonPositive";
        case ErrorKind::OutOfBounds: return "OutOfBounds";
        case ErrorKind::TooFewPoints: return "TooFewPoints";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::EmptySet: return "EmptySet";
        case ErrorKind::UnknownToken: return "UnknownToken";
        case ErrorKind::BadMagic: return "BadMagic";
        case ErrorKind::Truncated: return "Truncated";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::UnknownKey: return "UnknownKey";
        case ErrorKind::TypeError: return "TypeError";
        case ErrorKind::MissingRequired: return "MissingRequired";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::UnknownKey:
        case ErrorKind::TypeError:
        case ErrorKind::MissingRequired:
        case ErrorKind::InvalidArgument:
            return 2;
        case ErrorKind::NonFinite:
            return 4;
        default:
            return 3;
    }
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace pimae
