#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hybridroi/common.hpp"

namespace hybridroi {

// Deterministic RNG. mt19937_64 is fully specified by the standard, and the
// distributions below are hand-rolled, so a given seed produces the same
// stream on every platform. std distributions are deliberately avoided.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    return n <= 0 ? 0 : static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, no cached second variate (keeps the stream position a pure
  // function of the call count)
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  float normal_f(float mean, float std) { return mean + std * static_cast<float>(normal()); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw ParseError("Rng: malformed engine state string");
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace hybridroi
