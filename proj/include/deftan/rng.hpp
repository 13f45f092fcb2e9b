#pragma once

#include <cmath>
#include <cstdint>

namespace deftan {

// splitmix64: used both to seed the sequential generator and as a stateless
// counter hash (dropout masks are regenerated in backward passes from
// (seed, flat index) instead of being stored).
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  return splitmix64(seed ^ (v * 0x9e3779b97f4a7c15ULL + 0x1234567));
}

inline double bits_to_unit_double(uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Sequential generator with hand-rolled distributions. std:: distribution
// objects are not used because their output is implementation-defined and
// the dataset/checkpoint byte-determinism contract depends on the stream.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xabcdef1234567890ULL)) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // [0, 1)
  double uniform() { return bits_to_unit_double(next_u64()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Box-Muller; one value per call, spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Derive an independent stream, e.g. per dataset example: seed ^ index.
  Rng fork(uint64_t salt) const { return Rng(hash_combine(state_, salt)); }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace deftan
