/* Copyright 2026 The ELSA Simulator Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License
==============================================================================*/

#ifndef ELSA_COMMON_HPP
#define ELSA_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace elsa {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

using ClientId = std::size_t;
using EdgeId = std::size_t;
using TokenId = std::uint32_t;

// Error taxonomy. Every library failure is one of these; the CLI maps
// ConfigError to exit code 2 and everything else to exit code 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};
struct DecodeError : Error {
  using Error::Error;
};
struct AggregationError : Error {
  using Error::Error;
};
struct ProtocolError : Error {
  using Error::Error;
};
struct UnavailableError : Error {
  using Error::Error;
};

namespace hash {

/// splitmix64 finalizer; full 64-bit avalanche.
constexpr std::uint64_t mix(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t combine(std::uint64_t seed, std::uint64_t value) noexcept {
  return mix(seed ^ mix(value));
}

/// FNV-1a over the bytes of a string, then mixed.
constexpr std::uint64_t of_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix(h);
}

}  // namespace hash

}  // namespace elsa

#endif  // ELSA_COMMON_HPP
