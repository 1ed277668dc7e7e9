#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pimae {

enum class ErrorKind {
    InvalidArgument,
    DepthNonPositive,
    OutOfBounds,
    TooFewPoints,
    ShapeMismatch,
    NonFinite,
    EmptySet,
    UnknownToken,
    BadMagic,
    Truncated,
    ParseError,
    DimensionMismatch,
    UnknownKey,
    TypeError,
    MissingRequired,
    IoError,
};

std::string_view to_string(ErrorKind kind);

// CLI exit code for an error kind: 2 config, 3 data, 4 numeric.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace pimae
