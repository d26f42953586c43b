#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hybridroi {

// Error taxonomy. The CLI maps these onto its exit-code contract, everything
// else just propagates them.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimError : public Error {  // shape / dimension contract violations
 public:
  using Error::Error;
};

class DataError : public Error {  // dataset / manifest problems
 public:
  using Error::Error;
};

class ParseError : public Error {  // malformed files (split, csv, config)
 public:
  using Error::Error;
};

class DigestError : public Error {  // checkpoint/config/split digest mismatch
 public:
  using Error::Error;
};

class IoError : public Error {  // unreadable / unwritable paths
 public:
  using Error::Error;
};

class NumericError : public Error {  // NaN loss and friends
 public:
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void check_dim(bool cond, const std::string& msg) {
  if (!cond) throw DimError(msg);
}

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// FNV-1a, used for seed derivation and file digests.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Derives an independent stream seed from (base seed, tag, counter).
inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t counter = 0) {
  uint64_t h = fnv1a64(&seed, sizeof(seed));
  h = fnv1a64(tag, h);
  h = fnv1a64(&counter, sizeof(counter), h);
  // splitmix finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

// CRC-32 (IEEE 802.3), for per-tensor checkpoint checksums.
inline uint32_t crc32(const void* data, size_t len, uint32_t crc = 0) {
  static const auto table = [] {
    std::vector<uint32_t> t(256);
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return ~crc;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

}  // namespace hybridroi
