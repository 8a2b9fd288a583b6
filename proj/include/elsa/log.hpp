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

#ifndef ELSA_LOG_HPP
#define ELSA_LOG_HPP

#include <optional>
#include <string>
#include <vector>

namespace elsa {

struct RoundRecord {
  std::size_t round = 0;  // 1-based global round
  double train_loss = 0;  // mean over the round's local steps
  double eval_loss = 0;
  double eval_accuracy = 0;
  double delta_norm = 0;       // ||theta_g - theta_{g-1}||, against theta_0 in round 1
  double comm_bytes = 0;       // C_g from the closed-form cost model
  double measured_bytes = 0;   // activation bytes actually exchanged
  double gradient_bytes = 0;   // boundary-gradient bytes actually exchanged
  double sim_time = 0;         // cumulative straggler communication time, seconds
  std::optional<double> grad_norm_sq;  // full-batch ||grad F(theta_g)||^2
};

struct TrainingLog {
  std::string method;
  std::vector<RoundRecord> rounds;
  bool converged = false;
  std::size_t participants = 0;  // clients that trained at least once

  [[nodiscard]] std::size_t global_rounds() const { return rounds.size(); }
};

}  // namespace elsa

#endif  // ELSA_LOG_HPP
