#include "timesaf/common.hpp"

#include <cstdio>

namespace timesaf {

Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s, std::uint64_t h) {
  return fnv1a64(s.data(), s.size(), h);
}

std::string format_real(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  std::string out(buf);
  // collapse negative zero
  if (!out.empty() && out[0] == '-') {
    bool all_zero = true;
    for (std::size_t i = 1; i < out.size(); ++i) {
      if (out[i] != '0' && out[i] != '.') { all_zero = false; break; }
    }
    if (all_zero) out.erase(0, 1);
  }
  return out;
}

}  // namespace timesaf
