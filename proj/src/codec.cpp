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

#include "elsa/codec.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <ostream>
#include <random>

namespace elsa {

ChannelMode parse_channel_mode(std::string_view name) {
  if (name == "direct") return ChannelMode::direct;
  if (name == "gaussian-noise") return ChannelMode::gaussian_noise;
  if (name == "sketch-only") return ChannelMode::sketch_only;
  if (name == "ssop+sketch") return ChannelMode::ssop_sketch;
  throw ConfigError("unknown channel mode '" + std::string(name) +
                    "' (expected direct | gaussian-noise | sketch-only | ssop+sketch)");
}

std::string to_string(ChannelMode mode) {
  switch (mode) {
    case ChannelMode::direct:
      return "direct";
    case ChannelMode::gaussian_noise:
      return "gaussian-noise";
    case ChannelMode::sketch_only:
      return "sketch-only";
    case ChannelMode::ssop_sketch:
      return "ssop+sketch";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Subspace perturbation

SubspaceFit fit_subspace(const Eigen::MatrixXd& samples, std::size_t rank) {
  const auto dim = samples.cols();
  if (rank < 1 || static_cast<Eigen::Index>(rank) > dim)
    throw InputError("subspace rank must be in [1, " + std::to_string(dim) + "]");
  if (!samples.allFinite()) throw NumericError("subspace samples contain non-finite values");
  const auto r = static_cast<Eigen::Index>(rank);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(samples, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double tol = std::max(1e-300, sv.size() > 0 ? sv(0) * 1e-12 : 0.0);
  Eigen::Index numeric_rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++numeric_rank;

  SubspaceFit fit;
  fit.basis = svd.matrixV().leftCols(r);
  fit.degenerate = r > numeric_rank;
  for (Eigen::Index c = 0; c < r; ++c) {
    Eigen::Index arg = 0;
    fit.basis.col(c).cwiseAbs().maxCoeff(&arg);
    if (fit.basis(arg, c) < 0) fit.basis.col(c) *= -1.0;
  }
  return fit;
}

Eigen::MatrixXd gen_rotation(std::string_view salt, ClientId client, std::size_t rank) {
  if (rank < 1) throw InputError("rotation rank must be >= 1");
  const auto r = static_cast<Eigen::Index>(rank);
  std::mt19937_64 rng(hash::combine(hash::of_string(salt), client));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd phi(r, r);
  for (Eigen::Index j = 0; j < r; ++j)
    for (Eigen::Index i = 0; i < r; ++i) phi(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(phi);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& packed = qr.matrixQR();
  for (Eigen::Index i = 0; i < r; ++i)
    if (packed(i, i) < 0) q.col(i) *= -1.0;
  return q;
}

PerturbationBasis make_perturbation_basis(const Eigen::MatrixXd& samples, std::size_t rank, std::string_view salt,
                                          ClientId client) {
  PerturbationBasis b;
  auto fit = fit_subspace(samples, rank);
  b.u = std::move(fit.basis);
  b.degenerate = fit.degenerate;
  b.v = gen_rotation(salt, client, rank);
  b.q = build_perturbation(b.u, b.v);
  b.rank = rank;
  b.salt = std::string(salt);
  b.client = client;
  return b;
}

Activation<double> perturb(const Activation<double>& h, const Eigen::MatrixXd& q) {
  if (q.rows() != q.cols() || q.cols() != h.values.cols())
    throw InputError("perturbation matrix does not match the hidden dimension");
  return {h.values * q.transpose(), h.mask};
}

// ---------------------------------------------------------------------------
// Count sketch

SketchParams::SketchParams(std::size_t rows, std::size_t buckets, std::size_t dim, std::uint64_t salt_hash,
                           ClientId client, std::uint64_t round)
    : rows_(rows), buckets_(buckets), dim_(dim), salt_hash_(salt_hash), client_(client), round_(round) {
  if (rows < 1 || buckets < 1 || dim < 1) throw ConfigError("sketch rows, buckets and dim must all be >= 1");
  bucket_.resize(rows * dim);
  sign_.resize(rows * dim);
  const std::uint64_t base = hash::combine(hash::combine(salt_hash, client), round);
  for (std::size_t j = 0; j < rows; ++j) {
    const std::uint64_t row_seed = hash::combine(base, j);
    const std::uint64_t sign_seed = hash::combine(row_seed, 0x5349474eULL);
    for (std::size_t d = 0; d < dim; ++d) {
      bucket_[j * dim + d] = static_cast<std::uint32_t>(hash::combine(row_seed, d) % buckets);
      sign_[j * dim + d] = (hash::combine(sign_seed, d) & 1ULL) ? std::int8_t{1} : std::int8_t{-1};
    }
  }
}

double SketchParams::ratio() const { return compression_ratio(dim_, rows_, buckets_); }

bool SketchParams::collision_free() const {
  std::vector<char> used(buckets_);
  for (std::size_t j = 0; j < rows_; ++j) {
    std::fill(used.begin(), used.end(), 0);
    for (std::size_t d = 0; d < dim_; ++d) {
      auto& u = used[bucket(j, d)];
      if (u) return false;
      u = 1;
    }
  }
  return true;
}

Sketch sketch_encode(const Eigen::VectorXd& h, const SketchParams& params) {
  if (static_cast<std::size_t>(h.size()) != params.dim())
    throw InputError("sketch input has dimension " + std::to_string(h.size()) + ", params expect " +
                     std::to_string(params.dim()));
  Sketch sk{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(params.rows()), static_cast<Eigen::Index>(params.buckets())),
            params};
  for (std::size_t j = 0; j < params.rows(); ++j)
    for (std::size_t d = 0; d < params.dim(); ++d)
      sk.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(params.bucket(j, d))) +=
          params.sign(j, d) * h(static_cast<Eigen::Index>(d));
  return sk;
}

Eigen::VectorXd sketch_decode(const Sketch& sk, std::size_t dim) {
  const auto& p = sk.params;
  if (dim != p.dim()) throw DecodeError("sketch was built for dimension " + std::to_string(p.dim()));
  if (sk.values.rows() != static_cast<Eigen::Index>(p.rows()) ||
      sk.values.cols() != static_cast<Eigen::Index>(p.buckets()))
    throw DecodeError("sketch values do not match its geometry");
  Eigen::VectorXd out(static_cast<Eigen::Index>(dim));
  std::vector<double> est(p.rows());
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t j = 0; j < p.rows(); ++j)
      est[j] = p.sign(j, d) * sk.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(p.bucket(j, d)));
    std::sort(est.begin(), est.end());
    const std::size_t n = est.size();
    out(static_cast<Eigen::Index>(d)) = (n % 2 == 1) ? est[n / 2] : 0.5 * (est[n / 2 - 1] + est[n / 2]);
  }
  return out;
}

Eigen::VectorXd sketch_decode(const Sketch& sk, const SketchParams& expected) {
  if (!(sk.params == expected)) throw DecodeError("sketch parameters do not match the decoder's parameters");
  return sketch_decode(sk, expected.dim());
}

Eigen::MatrixXd sketch_roundtrip_rows(const Eigen::MatrixXd& rows, const SketchParams& params) {
  Eigen::MatrixXd out(rows.rows(), rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    out.row(i) = sketch_decode(sketch_encode(rows.row(i).transpose(), params), params.dim()).transpose();
  return out;
}

double compression_ratio(std::size_t dim, std::size_t rows, std::size_t buckets) {
  if (dim == 0 || rows == 0 || buckets == 0) throw InputError("compression_ratio needs positive arguments");
  return static_cast<double>(dim) / static_cast<double>(rows * buckets);
}

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DecodeError("truncated sketch header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_sketch(std::ostream& out, const Sketch& sk, int zeta) {
  if (zeta != 4 && zeta != 8) throw InputError("zeta must be 4 or 8 bytes");
  const auto& p = sk.params;
  put_u64(out, p.rows());
  put_u64(out, p.buckets());
  put_u64(out, p.dim());
  put_u64(out, p.round());
  put_u64(out, p.client());
  for (Eigen::Index j = 0; j < sk.values.rows(); ++j)
    for (Eigen::Index k = 0; k < sk.values.cols(); ++k) {
      if (zeta == 4) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(sk.values(j, k)));
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 4);
      } else {
        put_u64(out, std::bit_cast<std::uint64_t>(sk.values(j, k)));
      }
    }
}

Sketch read_sketch(std::istream& in, std::uint64_t salt_hash, int zeta) {
  if (zeta != 4 && zeta != 8) throw InputError("zeta must be 4 or 8 bytes");
  const auto rows = get_u64(in);
  const auto buckets = get_u64(in);
  const auto dim = get_u64(in);
  const auto round = get_u64(in);
  const auto client = get_u64(in);
  Sketch sk{Eigen::MatrixXd(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(buckets)),
            SketchParams(rows, buckets, dim, salt_hash, client, round)};
  for (Eigen::Index j = 0; j < sk.values.rows(); ++j)
    for (Eigen::Index k = 0; k < sk.values.cols(); ++k) {
      if (zeta == 4) {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw DecodeError("truncated sketch payload");
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        sk.values(j, k) = std::bit_cast<float>(bits);
      } else {
        sk.values(j, k) = std::bit_cast<double>(get_u64(in));
      }
    }
  return sk;
}

// ---------------------------------------------------------------------------
// Channel

Activation<double> channel_forward(const Activation<double>& h, const PerturbationBasis* basis,
                                   const SketchParams& params, ChannelMode mode, std::uint64_t noise_seed,
                                   double noise_variance) {
  switch (mode) {
    case ChannelMode::direct:
      return h;
    case ChannelMode::gaussian_noise: {
      std::mt19937_64 rng(noise_seed);
      std::normal_distribution<double> noise(0.0, std::sqrt(noise_variance));
      Activation<double> out = h;
      for (Eigen::Index j = 0; j < out.values.cols(); ++j)
        for (Eigen::Index i = 0; i < out.values.rows(); ++i) out.values(i, j) += noise(rng);
      return out;
    }
    case ChannelMode::sketch_only:
      return {sketch_roundtrip_rows(h.values, params), h.mask};
    case ChannelMode::ssop_sketch: {
      if (!basis) throw ConfigError("ssop+sketch mode requires a perturbation basis");
      const auto rotated = perturb(h, basis->q);
      return {sketch_roundtrip_rows(rotated.values, params), h.mask};
    }
  }
  throw ConfigError("unknown channel mode");
}

}  // namespace elsa
