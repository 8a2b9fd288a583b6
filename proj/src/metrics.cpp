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

#include "elsa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace elsa {

void CommModel::validate() const {
  if (!(zeta > 0) || !(seq_len > 0) || !(rho > 0) || !(bandwidth > 0) || !(lora_bytes >= 0))
    throw InputError("communication model parameters must be positive");
}

double comm_cost(const CommModel& m, std::size_t n_edges, const std::vector<std::vector<double>>& batches,
                 double local_rounds, double hidden_dim) {
  m.validate();
  if (!(local_rounds > 0) || !(hidden_dim > 0)) throw InputError("local rounds and hidden dim must be positive");
  double total_batch = 0;
  for (const auto& edge : batches)
    for (double b : edge) total_batch += b;
  return (2.0 * local_rounds * m.zeta * m.seq_len * hidden_dim / m.rho) * total_batch +
         static_cast<double>(n_edges) * m.lora_bytes;
}

double comm_time(const CommModel& m, double local_rounds, double batch, double hidden_dim) {
  m.validate();
  return 2.0 * local_rounds * batch * m.seq_len * m.zeta * hidden_dim / (m.rho * m.bandwidth);
}

double total_time(double global_rounds, std::span<const double> times) {
  if (times.empty()) return 0.0;
  return global_rounds * *std::max_element(times.begin(), times.end());
}

Eigen::MatrixXd attacker_table(const SplitModelState<double>& model) {
  SplitModelState<double> pub{model.config, model.backbone, model.params.zeros_like()};
  const auto v = static_cast<Eigen::Index>(model.config.vocab_size);
  Eigen::MatrixXd table(v, static_cast<Eigen::Index>(model.config.hidden_dim));
  for (Eigen::Index t = 0; t < v; ++t) {
    const TokenId tok = static_cast<TokenId>(t);
    table.row(t) = forward_part1(pub, std::span<const TokenId>(&tok, 1)).values.row(0);
  }
  return table;
}

namespace {

// Identical summation for x.x and x.y so an unchanged row gives exactly 1.
double cosine(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
  double xy = 0, xx = 0, yy = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xy += x(i) * y(i);
    xx += x(i) * x(i);
    yy += y(i) * y(i);
  }
  return std::clamp(xy / std::sqrt(xx * yy), -1.0, 1.0);
}

}  // namespace

PrivacyReport privacy_eval(std::span<const Activation<double>> original, std::span<const Activation<double>> observed,
                           std::span<const std::vector<TokenId>> tokens, const Eigen::MatrixXd& table) {
  if (original.size() != observed.size() || original.size() != tokens.size())
    throw InputError("privacy_eval needs matching original, observed and token lists");
  Eigen::VectorXd table_norm = table.rowwise().norm();
  PrivacyReport r;
  double cos_sum = 0, sq_sum = 0, hits = 0;
  std::size_t elems = 0;
  for (std::size_t s = 0; s < original.size(); ++s) {
    const auto& a = original[s].values;
    const auto& b = observed[s].values;
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw InputError("activation shapes differ");
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      if (!original[s].mask(i)) continue;
      sq_sum += (a.row(i) - b.row(i)).squaredNorm();
      elems += static_cast<std::size_t>(a.cols());
      const double na = a.row(i).norm(), nb = b.row(i).norm();
      if (na == 0 || nb == 0) {
        ++r.skipped;
        continue;
      }
      ++r.positions;
      cos_sum += cosine(a.row(i), b.row(i));
      Eigen::Index best = 0;
      ((table * b.row(i).transpose()).array() / (table_norm.array() * nb)).maxCoeff(&best);
      if (static_cast<std::size_t>(i) < tokens[s].size() && static_cast<TokenId>(best) == tokens[s][static_cast<std::size_t>(i)])
        hits += 1;
    }
  }
  if (r.positions > 0) {
    r.cos_sim = cos_sum / static_cast<double>(r.positions);
    r.token_acc = hits / static_cast<double>(r.positions);
  }
  if (elems > 0) r.mse = sq_sum / static_cast<double>(elems);
  return r;
}

double theorem_bound(const BoundInputs& b) {
  if (!(b.rounds >= 1)) throw InputError("bound needs G >= 1");
  if (b.lipschitz < 0 || b.gap < 0 || b.sigma_local < 0 || b.sigma_noniid < 0)
    throw InputError("bound inputs must be non-negative");
  const double root = std::sqrt(b.rounds);
  return 4.0 * b.lipschitz * b.gap / root + b.sigma_local / root + b.sigma_noniid;
}

SketchErrorEstimate estimate_sketch_error(std::size_t rows, std::size_t buckets, std::size_t dim, std::size_t trials,
                                          std::uint64_t seed) {
  if (trials == 0) throw InputError("need at least one trial");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  double sq = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    Eigen::VectorXd h(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = n(rng);
    SketchParams p(rows, buckets, dim, seed, 0, t);
    const Eigen::VectorXd err = sketch_decode(sketch_encode(h, p), p) - h;
    bias += err;
    sq += err.squaredNorm();
  }
  const double tr = static_cast<double>(trials);
  return {(bias / tr).cwiseAbs().mean(), sq / (tr * static_cast<double>(dim))};
}

std::vector<double> grad_norm_trace(const TrainingLog& log) {
  std::vector<double> out;
  for (const auto& r : log.rounds) {
    if (!r.grad_norm_sq) throw UnavailableError("gradient-norm logging was disabled for this run");
    out.push_back(*r.grad_norm_sq);
  }
  return out;
}

std::vector<double> running_mean(std::span<const double> x) {
  std::vector<double> out;
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i];
    out.push_back(s / static_cast<double>(i + 1));
  }
  return out;
}

}  // namespace elsa
