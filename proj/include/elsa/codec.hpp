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

// Boundary channel between client and edge: subspace orthogonal perturbation
// followed by a count sketch with median decoding.
//
// Sketch wire format (little-endian):
//   u64 rows (Y) | u64 buckets (Z) | u64 dim (D) | u64 round | u64 client
//   followed by Y*Z values, row-major, each zeta bytes (4 = f32, 8 = f64).
// Only the value payload is counted as traffic; the 40-byte header is not.

#ifndef ELSA_CODEC_HPP
#define ELSA_CODEC_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "elsa/common.hpp"
#include "elsa/model.hpp"

namespace elsa {

enum class ChannelMode { direct, gaussian_noise, sketch_only, ssop_sketch };

[[nodiscard]] ChannelMode parse_channel_mode(std::string_view name);
[[nodiscard]] std::string to_string(ChannelMode mode);
[[nodiscard]] constexpr bool uses_sketch(ChannelMode m) {
  return m == ChannelMode::sketch_only || m == ChannelMode::ssop_sketch;
}

struct SubspaceFit {
  Eigen::MatrixXd basis;  // dim x rank, orthonormal columns
  bool degenerate = false;
};

/// Top-`rank` right singular vectors of `samples` (rows are observations).
/// Each column is signed so its largest-magnitude entry is positive. When
/// rank exceeds the numerical rank of `samples` the remaining columns come
/// from the SVD's orthonormal completion and `degenerate` is set.
[[nodiscard]] SubspaceFit fit_subspace(const Eigen::MatrixXd& samples, std::size_t rank);

/// Orthogonal rank x rank matrix from QR of a standard-normal matrix seeded
/// by Hash(salt || client).
[[nodiscard]] Eigen::MatrixXd gen_rotation(std::string_view salt, ClientId client, std::size_t rank);

/// Q = U V U^T + (I - U U^T).
template <typename DerivedU, typename DerivedV>
[[nodiscard]] Eigen::MatrixXd build_perturbation(const Eigen::MatrixBase<DerivedU>& u,
                                                 const Eigen::MatrixBase<DerivedV>& v) {
  const Eigen::MatrixXd uut = u * u.transpose();
  return u * v * u.transpose() + (Eigen::MatrixXd::Identity(u.rows(), u.rows()) - uut);
}

struct PerturbationBasis {
  Eigen::MatrixXd u;
  Eigen::MatrixXd v;
  Eigen::MatrixXd q;
  std::size_t rank = 0;
  std::string salt;
  ClientId client = 0;
  bool degenerate = false;
};

[[nodiscard]] PerturbationBasis make_perturbation_basis(const Eigen::MatrixXd& samples, std::size_t rank,
                                                        std::string_view salt, ClientId client);

/// Each token row x becomes Q x. Throws InputError on shape mismatch.
[[nodiscard]] Activation<double> perturb(const Activation<double>& h, const Eigen::MatrixXd& q);

/// Count-sketch geometry with hash tables derived from
/// Hash(salt || client || round || row).
class SketchParams {
 public:
  SketchParams() = default;
  SketchParams(std::size_t rows, std::size_t buckets, std::size_t dim, std::uint64_t salt_hash, ClientId client,
               std::uint64_t round);

  [[nodiscard]] std::size_t rows() const { return rows_; }
  [[nodiscard]] std::size_t buckets() const { return buckets_; }
  [[nodiscard]] std::size_t dim() const { return dim_; }
  [[nodiscard]] std::uint64_t salt_hash() const { return salt_hash_; }
  [[nodiscard]] ClientId client() const { return client_; }
  [[nodiscard]] std::uint64_t round() const { return round_; }
  [[nodiscard]] double ratio() const;

  [[nodiscard]] std::size_t bucket(std::size_t row, std::size_t d) const { return bucket_[row * dim_ + d]; }
  [[nodiscard]] int sign(std::size_t row, std::size_t d) const { return sign_[row * dim_ + d]; }

  /// True when, in every row, no two coordinates share a bucket.
  [[nodiscard]] bool collision_free() const;

  friend bool operator==(const SketchParams& a, const SketchParams& b) {
    return a.rows_ == b.rows_ && a.buckets_ == b.buckets_ && a.dim_ == b.dim_ && a.salt_hash_ == b.salt_hash_ &&
           a.client_ == b.client_ && a.round_ == b.round_;
  }

 private:
  std::size_t rows_ = 0, buckets_ = 0, dim_ = 0;
  std::uint64_t salt_hash_ = 0;
  ClientId client_ = 0;
  std::uint64_t round_ = 0;
  std::vector<std::uint32_t> bucket_;
  std::vector<std::int8_t> sign_;
};

struct Sketch {
  Eigen::MatrixXd values;  // rows x buckets
  SketchParams params;
};

[[nodiscard]] Sketch sketch_encode(const Eigen::VectorXd& h, const SketchParams& params);

/// Median-of-rows estimate; even row counts average the two central values.
/// Throws DecodeError when `dim` or `expected` disagree with the sketch.
[[nodiscard]] Eigen::VectorXd sketch_decode(const Sketch& sk, std::size_t dim);
[[nodiscard]] Eigen::VectorXd sketch_decode(const Sketch& sk, const SketchParams& expected);

/// Encode then decode every row of a (seq x dim) matrix with shared params.
[[nodiscard]] Eigen::MatrixXd sketch_roundtrip_rows(const Eigen::MatrixXd& rows, const SketchParams& params);

[[nodiscard]] double compression_ratio(std::size_t dim, std::size_t rows, std::size_t buckets);

void write_sketch(std::ostream& out, const Sketch& sk, int zeta = 4);
[[nodiscard]] Sketch read_sketch(std::istream& in, std::uint64_t salt_hash, int zeta = 4);

/// What the receiving party observes after one traversal of the channel.
/// `basis` is required for ssop_sketch; `noise_seed` drives gaussian_noise.
[[nodiscard]] Activation<double> channel_forward(const Activation<double>& h, const PerturbationBasis* basis,
                                                 const SketchParams& params, ChannelMode mode,
                                                 std::uint64_t noise_seed = 0, double noise_variance = 0.25);

}  // namespace elsa

#endif  // ELSA_CODEC_HPP
