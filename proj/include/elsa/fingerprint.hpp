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

// Behavioral fingerprints: a Gaussian over the sentence-level (position 0)
// embeddings a client's model produces for a shared probe set, plus the
// symmetric KL divergence between fingerprints and the trust score.

#ifndef ELSA_FINGERPRINT_HPP
#define ELSA_FINGERPRINT_HPP

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "elsa/common.hpp"
#include "elsa/model.hpp"

namespace elsa {

struct ProbeSet {
  std::vector<std::vector<TokenId>> inputs;
  std::uint64_t seed = 0;
};

/// Q uniform random sequences of length `seq_len` over [0, vocab).
/// Throws ConfigError when count < 2.
[[nodiscard]] ProbeSet build_probe_set(std::uint64_t seed, std::size_t count, std::size_t seq_len,
                                       std::size_t vocab);

struct Fingerprint {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;               // unregularized, 1/Q normalization
  Eigen::MatrixXd probe_embeddings;  // Q x hidden
  double ridge = 0;

  [[nodiscard]] Eigen::MatrixXd regularized_cov() const;
};

/// ridge = max(1e-6, 1e-3 * tr(cov) / dim)
[[nodiscard]] double default_ridge(const Eigen::MatrixXd& cov);

/// Fingerprint of a set of embedding rows. Throws NumericError on
/// non-finite input and InputError on fewer than two rows.
[[nodiscard]] Fingerprint fingerprint_from_embeddings(const Eigen::MatrixXd& rows);

/// Runs every probe through the whole local model and keeps position 0.
[[nodiscard]] Fingerprint extract_fingerprint(const SplitModelState<double>& model, const ProbeSet& probe);

/// KL(N(mean_a, cov_a) || N(mean_b, cov_b)) through Cholesky factors; no
/// explicit inverse. Throws NumericError when a factorization fails.
template <typename Scalar>
[[nodiscard]] Scalar kl_gauss(const VectorX<Scalar>& mean_a, const MatrixX<Scalar>& cov_a,
                              const VectorX<Scalar>& mean_b, const MatrixX<Scalar>& cov_b) {
  const Eigen::LLT<MatrixX<Scalar>> la(cov_a), lb(cov_b);
  if (la.info() != Eigen::Success || lb.info() != Eigen::Success)
    throw NumericError("covariance is not positive definite after regularization");
  const auto dim = static_cast<Scalar>(mean_a.size());
  const Scalar trace = lb.solve(cov_a).trace();
  const VectorX<Scalar> diff = mean_b - mean_a;
  const Scalar maha = diff.dot(lb.solve(diff));
  const Scalar logdet_a = 2 * la.matrixLLT().diagonal().array().log().sum();
  const Scalar logdet_b = 2 * lb.matrixLLT().diagonal().array().log().sum();
  const Scalar kl = Scalar(0.5) * (trace - dim + logdet_b - logdet_a + maha);
  if (!std::isfinite(static_cast<double>(kl))) throw NumericError("KL divergence is not finite");
  return kl;
}

[[nodiscard]] double kl_gauss(const Fingerprint& a, const Fingerprint& b);
[[nodiscard]] double sym_kl(const Fingerprint& a, const Fingerprint& b);

/// N x N symmetric KL matrix with zero diagonal. Throws InputError for
/// fewer than two fingerprints.
[[nodiscard]] Eigen::MatrixXd divergence_matrix(std::span<const Fingerprint> fps);

struct TrustTerms {
  Eigen::VectorXd confidence;  // c_n, inverse-norm average
  Eigen::VectorXd divergence;  // mean divergence to the other clients
};

/// Raw exponent terms. Throws NumericError on a zero-norm embedding row.
[[nodiscard]] TrustTerms trust_terms(std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence);

/// exp(-c_n - r_n) for every client. With `normalize`, each term is divided
/// by its mean across clients unless that mean is zero.
[[nodiscard]] Eigen::VectorXd trust_scores(std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence,
                                           bool normalize = true);

[[nodiscard]] double trust_score(std::size_t n, std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence,
                                 bool normalize = true);

}  // namespace elsa

#endif  // ELSA_FINGERPRINT_HPP
