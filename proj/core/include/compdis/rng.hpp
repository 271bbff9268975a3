#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace compdis {

// xoshiro256** with splitmix64 seeding. The standard-library distributions are
// implementation-defined, so all sampling goes through this class to keep
// datasets and training runs reproducible across toolchains. State is
// serializable for checkpoint resume.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
    have_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_u64(uint64_t n) {
    // rejection sampling to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller; u clamped away from 0
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 2.0 * M_PI * v;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = uniform_u64(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream; the label decorrelates streams spawned
  // from the same parent.
  Rng spawn(uint64_t label) {
    Rng child;
    uint64_t x = next_u64() ^ (0x9e3779b97f4a7c15ULL * (label + 1));
    for (auto& s : child.state_) s = splitmix64(x);
    return child;
  }

  struct State {
    std::array<uint64_t, 4> s;
    bool have_spare;
    double spare;
  };
  State save() const { return {state_, have_spare_, spare_}; }
  void restore(const State& st) {
    state_ = st.s;
    have_spare_ = st.have_spare;
    spare_ = st.spare;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace compdis
