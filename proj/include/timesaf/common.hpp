#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace timesaf {

#ifdef TIMESAF_REAL32
using real = float;
#else
using real = double;
#endif

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Everything user-facing derives from Error so the CLI boundary can catch a
// single type and print the message without a stack trace.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };

Index numel(const Shape& s);
std::string shape_str(const Shape& s);

// FNV-1a. Used for config hashes and to mix seeds for derived RNG streams.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t h = 1469598103934665603ull);
std::uint64_t fnv1a64(const std::string& s,
                      std::uint64_t h = 1469598103934665603ull);

// Fixed-point decimal formatting with a '.' separator regardless of locale.
// Rounds half away from zero the way printf does; "-0.000" collapses to
// "0.000" so near-zero values don't flip sign cosmetically.
std::string format_real(double v, int precision);

}  // namespace timesaf
