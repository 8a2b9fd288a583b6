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

// Synthetic labeled corpus, non-IID partitioning across clients and label
// poisoning.
//
// Corpus: tokens [0, 2C) are class markers, two per class (class c owns 2c
// and 2c+1). Every sequence carries `markers` tokens of its class, one
// distractor marker of another class, and uniform noise tokens from
// [2C, V) elsewhere. The majority marker class is the label.

#ifndef ELSA_DATA_HPP
#define ELSA_DATA_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "elsa/common.hpp"

namespace elsa {

struct Dataset {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<int> labels;       // training labels, possibly flipped
  std::vector<int> true_labels;  // labels before poisoning
  std::vector<std::size_t> ids;  // index into the source corpus

  [[nodiscard]] std::size_t size() const { return inputs.size(); }
  void push(const Dataset& src, std::size_t i);
};

struct CorpusSpec {
  std::size_t vocab = 64;
  std::size_t seq_len = 8;
  std::size_t n_classes = 4;
  std::size_t markers = 3;  // class markers per sequence
};

/// Throws ConfigError unless n_classes <= V/4 and markers + 1 <= seq_len.
[[nodiscard]] Dataset make_synthetic_corpus(std::uint64_t seed, const CorpusSpec& spec, std::size_t n_samples);

/// Class with the most marker tokens; ties go to the lower class.
[[nodiscard]] int majority_marker(std::span<const TokenId> tokens, std::size_t n_classes);

struct PartitionSpec {
  double alpha = 0.1;                  // Dirichlet concentration
  std::vector<EdgeId> home_edge;       // per client; empty means n mod K
  std::vector<ClientId> poisoned;      // ids whose labels are flipped
  double flip_fraction = 0.8;
  std::uint64_t seed = 0;
  std::size_t max_retries = 16;
};

/// Splits `data` into one shard per client. Each edge's client group gets a
/// pool proportional to its size; within the pool the i-th client of the
/// group receives a share proportional to i + 1. Labels are then drawn per
/// client from Dir(alpha) proportions as far as the pool allows. Every
/// sample lands in exactly one shard. Throws ConfigError when a shard would
/// be empty.
[[nodiscard]] std::vector<Dataset> partition_data(const Dataset& data, std::size_t n_clients, std::size_t n_edges,
                                                  const PartitionSpec& spec);

/// Relabels round(fraction * size) samples, chosen at random, to a uniformly
/// drawn wrong class.
void poison_labels(Dataset& shard, double fraction, std::size_t n_classes, std::uint64_t seed);

/// Seeded choice of `count` distinct ids from [0, n), ascending.
[[nodiscard]] std::vector<ClientId> choose_poisoned(std::size_t n, std::size_t count, std::uint64_t seed);

/// Label histogram (fractions) of a dataset.
[[nodiscard]] std::vector<double> label_histogram(const Dataset& d, std::size_t n_classes);

/// Shannon entropy (nats) of a histogram.
[[nodiscard]] double entropy(std::span<const double> p);

}  // namespace elsa

#endif  // ELSA_DATA_HPP
