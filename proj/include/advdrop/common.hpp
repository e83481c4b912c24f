#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

extern "C" void openblas_set_num_threads(int);

namespace advdrop {

inline constexpr double kPi = 3.14159265358979323846;

// Pins BLAS to one thread. Multi-threaded GEMM splits reductions
// nondeterministically; every determinism guarantee in this library assumes
// this has been called once at startup.
inline void use_single_thread_blas() { openblas_set_num_threads(1); }

// Deterministic random source. mt19937_64 output is pinned by the standard;
// the transforms below avoid std::*_distribution, whose algorithms are
// implementation-defined and would break bitwise reproducibility across
// toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via cache-free Box-Muller (the second output of each
  // pair is discarded so the call sequence stays position-independent).
  double normal() {
    double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;        // [0,1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Unbiased integer in [0,n) by rejection.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates.
  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[bounded(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// FNV-1a 64-bit; used for config hashes embedded in every output artifact.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

// Inverse of softplus; valid for y > 0.
inline double softplus_inv(double y) {
  if (y <= 0) throw std::domain_error("softplus_inv: y must be positive");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace advdrop
