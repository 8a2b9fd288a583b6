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

// Communication cost and time model, privacy-attack metrics, the
// convergence bound and the gradient-norm trace.

#ifndef ELSA_METRICS_HPP
#define ELSA_METRICS_HPP

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "elsa/codec.hpp"
#include "elsa/log.hpp"
#include "elsa/model.hpp"

namespace elsa {

struct CommModel {
  double zeta = 4;          // bytes per value
  double seq_len = 8;       // mu
  double rho = 1;           // compression ratio
  double bandwidth = 1e6;   // bytes / second
  double lora_bytes = 0;    // |theta^LoRA| in bytes

  /// Throws InputError unless every field is positive (lora_bytes may be 0).
  void validate() const;
};

/// C_g = (2 rounds zeta mu D / rho) * sum of batch sizes + K * lora_bytes.
/// `batches[k]` lists the batch sizes of the clients on edge k.
[[nodiscard]] double comm_cost(const CommModel& m, std::size_t n_edges,
                               const std::vector<std::vector<double>>& batches, double local_rounds,
                               double hidden_dim);

/// T_{g,n} = 2 rounds B mu zeta D / (rho bandwidth).
[[nodiscard]] double comm_time(const CommModel& m, double local_rounds, double batch, double hidden_dim);

/// G * max_n T_{g,n}; zero when there are no clients.
[[nodiscard]] double total_time(double global_rounds, std::span<const double> times);

struct PrivacyReport {
  double cos_sim = 0;
  double mse = 0;
  double token_acc = 0;
  std::size_t positions = 0;  // valid positions evaluated
  std::size_t skipped = 0;    // positions with a zero-norm row
  std::string mode;
  double rho = 1;
  std::size_t rank = 0;
};

/// Vocabulary x hidden: Part 1 output at position 0 for each single-token
/// input, computed with the public frozen backbone and zero adapters.
[[nodiscard]] Eigen::MatrixXd attacker_table(const SplitModelState<double>& model);

/// Cosine (mean over valid positions), element-wise MSE over valid
/// positions, and nearest-cosine token recovery against `table`.
[[nodiscard]] PrivacyReport privacy_eval(std::span<const Activation<double>> original,
                                         std::span<const Activation<double>> observed,
                                         std::span<const std::vector<TokenId>> tokens, const Eigen::MatrixXd& table);

struct BoundInputs {
  double lipschitz = 1;      // L
  double gap = 1;            // F(theta_0) - F*
  double sigma_local = 1;    // sigma_local^2
  double sigma_noniid = 0;   // sigma_2^2
  double rounds = 1;         // G
};

/// 4 L gap / sqrt(G) + sigma_local^2 / sqrt(G) + sigma_2^2.
/// Throws InputError for G < 1 or negative inputs.
[[nodiscard]] double theorem_bound(const BoundInputs& b);

/// Empirical sketch error over `trials` standard-normal vectors: mean
/// coordinate bias magnitude and mean squared error per coordinate.
struct SketchErrorEstimate {
  double bias = 0;
  double variance = 0;
};
[[nodiscard]] SketchErrorEstimate estimate_sketch_error(std::size_t rows, std::size_t buckets, std::size_t dim,
                                                        std::size_t trials, std::uint64_t seed);

/// Per-round ||grad F(theta_g)||^2. Throws UnavailableError when the run
/// did not log gradients.
[[nodiscard]] std::vector<double> grad_norm_trace(const TrainingLog& log);

/// Running mean of a series: out[i] = mean(x[0..i]).
[[nodiscard]] std::vector<double> running_mean(std::span<const double> x);

}  // namespace elsa

#endif  // ELSA_METRICS_HPP
