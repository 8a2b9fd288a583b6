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

#include "elsa/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace elsa {

void Dataset::push(const Dataset& src, std::size_t i) {
  inputs.push_back(src.inputs[i]);
  labels.push_back(src.labels[i]);
  true_labels.push_back(src.true_labels[i]);
  ids.push_back(src.ids[i]);
}

Dataset make_synthetic_corpus(std::uint64_t seed, const CorpusSpec& spec, std::size_t n_samples) {
  if (spec.n_classes < 2 || spec.n_classes > spec.vocab / 4)
    throw ConfigError("corpus needs 2 <= n_classes <= vocab/4");
  if (spec.markers < 2 || spec.markers + 1 > spec.seq_len)
    throw ConfigError("corpus markers must be >= 2 and leave room for a distractor");
  const auto c = spec.n_classes;
  std::mt19937_64 rng(hash::combine(seed, 0x434f52505553ULL));
  std::uniform_int_distribution<int> label_dist(0, static_cast<int>(c) - 1);
  std::uniform_int_distribution<int> other_dist(1, static_cast<int>(c) - 1);
  std::uniform_int_distribution<int> pick2(0, 1);
  std::uniform_int_distribution<TokenId> noise(static_cast<TokenId>(2 * c), static_cast<TokenId>(spec.vocab - 1));

  Dataset d;
  d.inputs.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const int y = label_dist(rng);
    std::vector<TokenId> seq(spec.seq_len);
    for (auto& t : seq) t = noise(rng);
    std::vector<std::size_t> pos(spec.seq_len);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::shuffle(pos.begin(), pos.end(), rng);
    for (std::size_t m = 0; m < spec.markers; ++m) seq[pos[m]] = static_cast<TokenId>(2 * y + pick2(rng));
    const int other = (y + other_dist(rng)) % static_cast<int>(c);
    seq[pos[spec.markers]] = static_cast<TokenId>(2 * other + pick2(rng));
    d.inputs.push_back(std::move(seq));
    d.labels.push_back(y);
    d.true_labels.push_back(y);
    d.ids.push_back(s);
  }
  return d;
}

int majority_marker(std::span<const TokenId> tokens, std::size_t n_classes) {
  std::vector<int> count(n_classes, 0);
  for (auto t : tokens)
    if (t < 2 * n_classes) ++count[t / 2];
  return static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
}

namespace {

// Integer sizes proportional to `weights` summing exactly to `total`
// (largest remainder, ties to the lower index).
std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::sort(rem.begin(), rem.end());
  for (std::size_t j = 0; used < total; ++j, ++used) ++out[rem[j % rem.size()].second];
  return out;
}

std::vector<double> draw_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(alpha, 1.0);
  std::vector<double> p(k);
  double s = 0;
  for (auto& x : p) s += (x = g(rng));
  if (!(s > 0)) return {};
  for (auto& x : p) x /= s;
  return p;
}

}  // namespace

std::vector<Dataset> partition_data(const Dataset& data, std::size_t n_clients, std::size_t n_edges,
                                    const PartitionSpec& spec) {
  if (n_clients < 1 || n_edges < 1) throw ConfigError("partition needs at least one client and one edge");
  if (!(spec.alpha > 0)) throw ConfigError("dirichlet alpha must be > 0");
  if (spec.flip_fraction < 0 || spec.flip_fraction > 1) throw ConfigError("flip_fraction must be in [0, 1]");
  std::vector<EdgeId> home = spec.home_edge;
  if (home.empty())
    for (std::size_t n = 0; n < n_clients; ++n) home.push_back(n % n_edges);
  if (home.size() != n_clients) throw ConfigError("home_edge must list one edge per client");

  std::size_t n_classes = 0;
  for (int y : data.labels) n_classes = std::max(n_classes, static_cast<std::size_t>(y) + 1);

  std::vector<std::vector<ClientId>> groups(n_edges);
  for (std::size_t n = 0; n < n_clients; ++n) {
    if (home[n] >= n_edges) throw ConfigError("home edge out of range");
    groups[home[n]].push_back(n);
  }

  // Edge pools: a seeded shuffle of the corpus cut in proportion to group sizes.
  std::mt19937_64 rng(hash::combine(spec.seed, 0x50415254ULL));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> gw;
  for (const auto& g : groups) gw.push_back(static_cast<double>(g.size()));
  const auto pool_sizes = apportion(gw, data.size());

  std::vector<Dataset> shards(n_clients);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < n_edges; ++k) {
    const auto& group = groups[k];
    const std::size_t omega = pool_sizes[k];
    if (group.empty()) {
      offset += omega;
      continue;
    }
    // Per-class stacks of this pool.
    std::vector<std::vector<std::size_t>> by_class(n_classes);
    for (std::size_t i = offset; i < offset + omega; ++i)
      by_class[static_cast<std::size_t>(data.labels[order[i]])].push_back(order[i]);
    offset += omega;

    std::vector<double> qw;
    for (std::size_t i = 0; i < group.size(); ++i) qw.push_back(static_cast<double>(i + 1));
    const auto sizes = apportion(qw, omega);
    if (*std::min_element(sizes.begin(), sizes.end()) == 0)
      throw ConfigError("edge " + std::to_string(k) + " pool of " + std::to_string(omega) +
                        " samples is too small for " + std::to_string(group.size()) + " clients");

    for (std::size_t i = 0; i < group.size(); ++i) {
      std::vector<double> p;
      for (std::size_t attempt = 0; p.empty(); ++attempt) {
        if (attempt >= spec.max_retries) throw ConfigError("dirichlet draw degenerate after retries");
        std::mt19937_64 sub(hash::combine(hash::combine(spec.seed, group[i]), attempt));
        p = draw_dirichlet(spec.alpha, n_classes, sub);
      }
      std::discrete_distribution<std::size_t> pick_class(p.begin(), p.end());
      std::mt19937_64 draw(hash::combine(hash::combine(spec.seed, group[i]), 0xD0ULL));
      auto& shard = shards[group[i]];
      for (std::size_t s = 0; s < sizes[i]; ++s) {
        std::size_t cls = pick_class(draw);
        if (by_class[cls].empty()) {
          // Requested class exhausted: renormalize over classes that remain.
          std::vector<double> w(n_classes, 0.0);
          double tot = 0;
          for (std::size_t c = 0; c < n_classes; ++c)
            if (!by_class[c].empty()) tot += (w[c] = p[c]);
          if (!(tot > 0))
            for (std::size_t c = 0; c < n_classes; ++c) w[c] = by_class[c].empty() ? 0.0 : 1.0;
          std::discrete_distribution<std::size_t> fallback(w.begin(), w.end());
          cls = fallback(draw);
        }
        shard.push(data, by_class[cls].back());
        by_class[cls].pop_back();
      }
    }
  }

  for (auto id : spec.poisoned) {
    if (id >= n_clients) throw ConfigError("poisoned id " + std::to_string(id) + " out of range");
    poison_labels(shards[id], spec.flip_fraction, n_classes, hash::combine(spec.seed, 0xBADULL + id));
  }
  return shards;
}

void poison_labels(Dataset& shard, double fraction, std::size_t n_classes, std::uint64_t seed) {
  if (n_classes < 2) return;
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(shard.size())));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(shard.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::uniform_int_distribution<int> shift(1, static_cast<int>(n_classes) - 1);
  for (std::size_t j = 0; j < count; ++j) {
    auto& y = shard.labels[idx[j]];
    y = (shard.true_labels[idx[j]] + shift(rng)) % static_cast<int>(n_classes);
  }
}

std::vector<ClientId> choose_poisoned(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw ConfigError("more poisoned clients than clients");
  std::vector<ClientId> ids(n);
  std::iota(ids.begin(), ids.end(), ClientId{0});
  std::mt19937_64 rng(hash::combine(seed, 0x504f49534f4eULL));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> label_histogram(const Dataset& d, std::size_t n_classes) {
  std::vector<double> h(n_classes, 0.0);
  for (int y : d.labels) h[static_cast<std::size_t>(y)] += 1.0;
  if (d.size() > 0)
    for (auto& x : h) x /= static_cast<double>(d.size());
  return h;
}

double entropy(std::span<const double> p) {
  double e = 0;
  for (double x : p)
    if (x > 0) e -= x * std::log(x);
  return e;
}

}  // namespace elsa
