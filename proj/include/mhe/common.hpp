#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mhe {

using Point = std::complex<double>;

inline double cross2(Point a, Point b) { return a.real() * b.imag() - a.imag() * b.real(); }

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define MHE_DEFINE_ERROR(name)                      \
  struct name : Error {                             \
    using Error::Error;                             \
    name() : Error(#name) {}                        \
  }

MHE_DEFINE_ERROR(DomainTooCoarse);
MHE_DEFINE_ERROR(MassTooLargeForMesh);
MHE_DEFINE_ERROR(BadMarkedPoint);
MHE_DEFINE_ERROR(AlreadyTerminated);
MHE_DEFINE_ERROR(NonTermination);
MHE_DEFINE_ERROR(DegenerateSegment);
MHE_DEFINE_ERROR(MapError);
MHE_DEFINE_ERROR(IntegrationFailure);
MHE_DEFINE_ERROR(GridError);
MHE_DEFINE_ERROR(QuadratureError);
MHE_DEFINE_ERROR(BadSource);
MHE_DEFINE_ERROR(SolverFailure);
MHE_DEFINE_ERROR(DegenerateMap);
MHE_DEFINE_ERROR(InsufficientSamples);
MHE_DEFINE_ERROR(SwallowedProbe);
MHE_DEFINE_ERROR(ConfigError);

#undef MHE_DEFINE_ERROR

// Counter-based RNG (Philox-4x32-10). One independent stream per Monte Carlo
// sample index, so ensembles are reproducible no matter how work is scheduled
// across threads. State is (key, counter) and serializes to four integers.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream) {
    const std::uint64_t k = mix64(seed ^ mix64(stream + 0x9E3779B97F4A7C15ull));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    ctr_ = {0, 0, 0, 0};
    pos_ = 4;
    have_spare_ = false;
    spare_ = 0.0;
  }

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      block_ = philox(ctr_, key_);
      advance_counter();
      pos_ = 0;
    }
    return block_[pos_++];
  }

  // uniform in (0,1): 53 random mantissa bits, never exactly 0
  double uniform() {
    const std::uint64_t a = next_u32() >> 5;  // 27 bits
    const std::uint64_t b = next_u32() >> 6;  // 26 bits
    return ((a * 67108864.0 + b) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  // index in [0, n)
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  struct State {
    std::array<std::uint32_t, 2> key;
    std::array<std::uint32_t, 4> ctr;
    std::uint32_t pos;
    bool have_spare;
    double spare;
  };

  State state() const { return {key_, ctr_, pos_, have_spare_, spare_}; }
  void restore(const State& s) {
    key_ = s.key;
    ctr_ = s.ctr;
    pos_ = s.pos;
    have_spare_ = s.have_spare;
    spare_ = s.spare;
    if (pos_ < 4) {
      // regenerate the block the saved position points into
      auto c = ctr_;
      decrement_counter(c);
      block_ = philox(c, key_);
    }
  }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> c,
                                             std::array<std::uint32_t, 2> k) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * c[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * c[2];
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
      k[0] += W0;
      k[1] += W1;
    }
    return c;
  }

  void advance_counter() {
    for (int i = 0; i < 4; ++i) {
      if (++ctr_[i] != 0) break;
    }
  }
  static void decrement_counter(std::array<std::uint32_t, 4>& c) {
    for (int i = 0; i < 4; ++i) {
      if (c[i]-- != 0) break;
    }
  }

  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 4> ctr_;
  std::array<std::uint32_t, 4> block_{};
  std::uint32_t pos_;
  bool have_spare_;
  double spare_;
};

}  // namespace mhe
