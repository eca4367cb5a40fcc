#pragma once

#include <stdexcept>
#include <string>

namespace relax {

// Base type for every error raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error { using Error::Error; };
struct TooShort : Error { using Error::Error; };
struct NumericalFailure : Error { using Error::Error; };
struct ZeroVector : Error { using Error::Error; };
struct FrozenDictionary : Error { using Error::Error; };
struct EmptySpectrum : Error { using Error::Error; };
struct DegenerateSpectrum : Error { using Error::Error; };
struct IllConditioned : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct MagicMismatch : Error { using Error::Error; };
struct DegenerateDesign : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

} // namespace relax
