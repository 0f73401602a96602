#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cxgn {

// All recoverable failures surface as cxgn::Error; the CLI maps them to exit code 2
// (or 1 for usage/config problems, which throw UsageError).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

#define CXGN_CHECK(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) throw ::cxgn::Error(std::string("check failed: ") + (msg)); \
  } while (0)

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace cxgn
