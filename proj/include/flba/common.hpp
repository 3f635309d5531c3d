// Copyright 2026 The fewshot-backdoor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FLBA_COMMON_HPP_
#define FLBA_COMMON_HPP_

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace flba {

inline constexpr const char* kToolVersion = "1.0.0";

// Added to products of norms before dividing; oracles must use the same value.
inline constexpr double kNormEpsilon = 1e-12;

enum class ErrorKind {
  kConfig,
  kInput,
  kGeometry,
  kNumericDomain,
  kNumeric,
  kTraining,
  kSampling,
  kLoad,
  kIo,
  kConstruction,
  kUnsupported,
  kMissingArtifact,
  kDefense,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kGeometry: return "geometry error";
    case ErrorKind::kNumericDomain: return "numeric-domain error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kTraining: return "training error";
    case ErrorKind::kSampling: return "sampling error";
    case ErrorKind::kLoad: return "load error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kConstruction: return "construction error";
    case ErrorKind::kUnsupported: return "unsupported-paradigm error";
    case ErrorKind::kMissingArtifact: return "missing artifact";
    case ErrorKind::kDefense: return "defense error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  // The message without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

// Random numbers ----------------------------------------------------------
//
// std::mt19937_64 is specified bit-exactly by the standard, the library
// distributions are not, so all draws go through the helpers below.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view text,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(std::span<const unsigned char>(
                   reinterpret_cast<const unsigned char*>(text.data()), text.size()),
               h);
}

// Independent stream seed derived from a base seed and a tag plus index.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(base ^ fnv1a(tag)) + index);
}

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r = rng();
  while (r >= limit) r = rng();
  return r % n;
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                    std::cos(2.0 * std::numbers::pi * u2);
}

// Fisher-Yates with uniform_index so the permutation is portable.
template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace flba

#endif  // FLBA_COMMON_HPP_
