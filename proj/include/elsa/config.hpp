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

// Simulator configuration: a YAML file of sections (run, model, codec,
// clustering, data, topology, privacy, comm, bound, output), each a flat map
// of scalar or list values. Unknown sections or keys are rejected; every
// error carries file:line:column.

#ifndef ELSA_CONFIG_HPP
#define ELSA_CONFIG_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "elsa/protocol.hpp"

namespace elsa {

struct CommSweep {
  std::vector<double> rhos{1, 2, 4, 8};
  double rounds = 30;                 // G used for T_total
  std::optional<double> lora_bytes;   // default: zeta * trainable parameter count
};

struct BoundSweep {
  double lipschitz = 1;
  double gap = 1;           // F(theta_0) - F*
  double sigma_local = 1;   // sigma_local^2
  double sigma_noniid = 0.1;  // sigma_2^2
  std::vector<double> rounds{100};
};

struct SimConfig {
  RunConfig run;
  PrivacySweep privacy;
  CommSweep comm;
  BoundSweep bound;
  std::string out_dir = "out";
};

/// Parses YAML text. `source` names the text in error messages. Throws
/// ConfigError with "source:line:col: ..." for syntax errors, unknown keys,
/// malformed values, and for semantic validation failures (pointing at the
/// offending key when it appears in the file).
[[nodiscard]] SimConfig parse_config(std::string_view text, std::string_view source = "<config>");
[[nodiscard]] SimConfig load_config(const std::filesystem::path& path);

/// Every key with its resolved value, one "section.key = value" per entry,
/// in a fixed order. Used to echo the configuration into outputs.
[[nodiscard]] std::vector<std::pair<std::string, std::string>> resolved_config(const SimConfig& cfg);

/// Checks the cross-field constraints of all sections.
void validate(const SimConfig& cfg);

/// Shortest round-trip decimal form; stable across runs.
[[nodiscard]] std::string format_number(double v);

}  // namespace elsa

#endif  // ELSA_CONFIG_HPP
