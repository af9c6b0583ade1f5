#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crlab {

// ---------------------------------------------------------------------------
// Errors. Thrown instead of asserting so the CLI can map them to exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed invocation or config (CLI exit code 2).
struct UsageError : Error {
  using Error::Error;
};

// A documented precondition or invariant was violated (exit code 3).
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required (exit code 4).
struct NumericalError : Error {
  using Error::Error;
};

// Filesystem / serialization failures (exit code 3).
struct IoError : Error {
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_usage(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

// ---------------------------------------------------------------------------
// Hashing. FNV-1a over bytes; used for config hashes and stream derivation.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

// ---------------------------------------------------------------------------
// Rng: counter-based splitmix64. State is two u64s, so checkpoints can store
// and restore it exactly; child streams are independent of parent consumption.
// ---------------------------------------------------------------------------

struct Rng {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  Rng() = default;
  explicit Rng(std::uint64_t seed) : key(mix64(seed)) {}

  std::uint64_t next_u64() {
    ++counter;
    return mix64(key + 0x9e3779b97f4a7c15ull * counter);
  }

  // Derived stream; does not advance this stream.
  Rng child(std::uint64_t tag) const {
    Rng r;
    r.key = hash_combine(key, tag);
    return r;
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; two draws per sample keeps the state layout trivial.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Inverse-CDF draw; probs need not be exactly normalized.
  template <class S>
  int categorical(std::span<const S> probs) {
    double total = 0.0;
    for (S p : probs) total += static_cast<double>(p);
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += static_cast<double>(probs[i]);
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }
};

// ---------------------------------------------------------------------------
// Symlog transform pair.
// ---------------------------------------------------------------------------

template <class S>
S symlog(S x) {
  return x >= S(0) ? std::log1p(x) : -std::log1p(-x);
}

template <class S>
S symexp(S x) {
  return x >= S(0) ? std::expm1(x) : -std::expm1(-x);
}

}  // namespace crlab
