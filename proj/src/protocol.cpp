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

#include "elsa/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <random>

namespace elsa {

namespace {

std::uint64_t seed_of(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  for (auto p : parts) base = hash::combine(base, p);
  return base;
}

void axpy_blocks(std::vector<BlockAdapter<double>>& dst, double alpha, const std::vector<BlockAdapter<double>>& src) {
  for (std::size_t b = 0; b < dst.size(); ++b) {
    dst[b].query.a += alpha * src[b].query.a;
    dst[b].query.b += alpha * src[b].query.b;
    dst[b].value.a += alpha * src[b].value.a;
    dst[b].value.b += alpha * src[b].value.b;
  }
}

void axpy_head(TaskHead<double>& dst, double alpha, const TaskHead<double>& src) {
  dst.weight += alpha * src.weight;
  dst.bias += alpha * src.bias;
}

struct Batch {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<int> labels;
};

Batch sample_batch(const Dataset& d, std::size_t size, std::uint64_t seed) {
  const std::size_t take = std::min(size, d.size());
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Batch b;
  for (std::size_t i = 0; i < take; ++i) {
    b.inputs.push_back(d.inputs[idx[i]]);
    b.labels.push_back(d.labels[idx[i]]);
  }
  return b;
}

// Runs fn(i) for i in [0, n), on up to `jobs` threads. Results must not
// depend on scheduling, so fn may only touch slot i.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> tasks;
  const std::size_t workers = std::min(jobs, n);
  for (std::size_t w = 0; w < workers; ++w)
    tasks.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    }));
  for (auto& t : tasks) t.get();
}

}  // namespace

double CodecConfig::ratio(std::size_t hidden) const {
  return uses_sketch(mode) ? compression_ratio(hidden, rows, buckets) : 1.0;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  model.validate();
  if (n_clients < 1) fail("n_clients", "must be >= 1");
  if (n_edges < 1) fail("n_edges", "must be >= 1");
  if (local_rounds < 1) fail("local_rounds", "must be >= 1");
  if (!(lr > 0)) fail("lr", "must be > 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(xi > 0)) fail("xi", "must be > 0");
  if (max_rounds < 1) fail("max_rounds", "must be >= 1");
  if (codec.rows < 1 || codec.buckets < 1) fail("codec.rows/codec.buckets", "must be >= 1");
  if (codec.mode == ChannelMode::ssop_sketch && (codec.rank < 1 || codec.rank > model.hidden_dim))
    fail("codec.rank", "must be in [1, hidden_dim]");
  if (!(codec.noise_variance >= 0)) fail("codec.noise_variance", "must be >= 0");
  if (!(gamma > 0)) fail("gamma", "must be > 0");
  if (probe_count < 2) fail("probe_count", "must be >= 2");
  if (max_clusters < 1) fail("max_clusters", "must be >= 1");
  if (n_clusters && *n_clusters < 1) fail("n_clusters", "must be >= 1");
  if (markers < 2 || markers + 1 > model.seq_len) fail("markers", "must be >= 2 and leave room for a distractor");
  if (model.n_classes > model.vocab_size / 4) fail("n_classes", "must be <= vocab_size / 4");
  if (train_samples < n_clients) fail("train_samples", "must be >= n_clients");
  if (test_samples < 1) fail("test_samples", "must be >= 1");
  if (!(alpha > 0)) fail("alpha", "must be > 0");
  if (n_poisoned > n_clients) fail("n_poisoned", "must be <= n_clients");
  if (flip_fraction < 0 || flip_fraction > 1) fail("flip_fraction", "must be in [0, 1]");
  if (!(tau_max > 0)) fail("tau_max", "must be > 0");
  if (home_latency_min < 0 || home_latency_max < home_latency_min) fail("home_latency", "need 0 <= min <= max");
  if (other_latency_min < 0 || other_latency_max < other_latency_min) fail("other_latency", "need 0 <= min <= max");
  if (!(bandwidth > 0)) fail("bandwidth", "must be > 0");
  if (!(zeta > 0)) fail("zeta", "must be > 0");
  if (fedavg_subset > n_clients) fail("fedavg_subset", "must be <= n_clients");
  if (jobs < 1) fail("jobs", "must be >= 1");
}

Topology make_topology(const RunConfig& cfg) {
  Topology t;
  t.tau_max = cfg.tau_max;
  t.bandwidth = cfg.bandwidth;
  t.latency.resize(static_cast<Eigen::Index>(cfg.n_clients), static_cast<Eigen::Index>(cfg.n_edges));
  std::mt19937_64 rng(seed_of(cfg.seed, {0x4c4154ULL}));
  std::uniform_real_distribution<double> home(cfg.home_latency_min, cfg.home_latency_max);
  std::uniform_real_distribution<double> other(cfg.other_latency_min, cfg.other_latency_max);
  for (std::size_t n = 0; n < cfg.n_clients; ++n)
    for (std::size_t k = 0; k < cfg.n_edges; ++k)
      t.latency(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) =
          k == n % cfg.n_edges ? home(rng) : other(rng);
  return t;
}

Experiment make_experiment(const RunConfig& cfg) {
  cfg.validate();
  Experiment ex;
  ex.config = cfg;
  ex.initial = init_model<double>(cfg.model, seed_of(cfg.seed, {1}));
  CorpusSpec cs{cfg.model.vocab_size, cfg.model.seq_len, cfg.model.n_classes, cfg.markers};
  const auto train = make_synthetic_corpus(seed_of(cfg.seed, {2}), cs, cfg.train_samples);
  ex.test = make_synthetic_corpus(seed_of(cfg.seed, {3}), cs, cfg.test_samples);
  ex.topology = make_topology(cfg);
  ex.poisoned = choose_poisoned(cfg.n_clients, cfg.n_poisoned, cfg.seed);

  PartitionSpec ps;
  ps.alpha = cfg.alpha;
  ps.poisoned = ex.poisoned;
  ps.flip_fraction = cfg.flip_fraction;
  ps.seed = seed_of(cfg.seed, {4});
  for (std::size_t n = 0; n < cfg.n_clients; ++n) {
    Eigen::Index best = 0;
    ex.topology.latency.row(static_cast<Eigen::Index>(n)).minCoeff(&best);
    ps.home_edge.push_back(static_cast<EdgeId>(best));
  }
  ex.shards = partition_data(train, cfg.n_clients, cfg.n_edges, ps);
  return ex;
}

SplitModelState<double> warmup_model(const Experiment& ex, ClientId n, const AdapterParams<double>* start) {
  SplitModelState<double> m = ex.initial;
  if (start) m.params = *start;
  const auto& cfg = ex.config;
  for (std::size_t t = 0; t < cfg.warmup_steps; ++t) {
    const auto b = sample_batch(ex.shards[n], cfg.batch_size, seed_of(cfg.seed, {0x5741524dULL, n, t}));
    const auto lg = loss_and_grad(m, std::span<const std::vector<TokenId>>(b.inputs), std::span<const int>(b.labels));
    sgd_step(m.params, lg.grad, cfg.lr);
  }
  return m;
}

Eigen::MatrixXd boundary_samples(const SplitModelState<double>& model, const ProbeSet& probe) {
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& s : probe.inputs) {
    const auto h = forward_part1(model, std::span<const TokenId>(s));
    for (Eigen::Index i = 0; i < h.values.rows(); ++i)
      if (h.mask(i)) rows.push_back(h.values.row(i));
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(model.config.hidden_dim));
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i];
  return out;
}

ClusteringResult cluster_experiment(const Experiment& ex, const AdapterParams<double>* start) {
  const auto& cfg = ex.config;
  const auto probe = build_probe_set(seed_of(cfg.seed, {5}), cfg.probe_count, cfg.model.seq_len, cfg.model.vocab_size);
  ClusteringResult r;
  r.fingerprints.resize(cfg.n_clients);
  parallel_for(cfg.n_clients, cfg.jobs, [&](std::size_t n) {
    r.fingerprints[n] = extract_fingerprint(warmup_model(ex, n, start), probe);
  });
  if (cfg.n_clients >= 2) {
    r.divergence = divergence_matrix(r.fingerprints);
    r.trust = trust_scores(r.fingerprints, r.divergence, cfg.trust_normalize);
  } else {
    r.divergence = Eigen::MatrixXd::Zero(1, 1);
    r.trust = Eigen::VectorXd::Ones(1);
  }
  AssignOptions ao{cfg.gamma, cfg.w_min, cfg.seed, cfg.n_clusters, cfg.max_clusters};
  r.assignment = assign_clients(ex.topology, r.fingerprints, r.trust, r.divergence, ao);
  return r;
}

namespace {

// One client's boundary channel. Sketch hashes are keyed by (step,
// direction): 0 up, 1 down, 2 gradient down, 3 gradient up.
struct Channel {
  const CodecConfig& codec;
  const Eigen::MatrixXd* q = nullptr;
  ClientId id = 0;
  std::size_t dim = 0;
  std::uint64_t salt = 0;
  bool rotate = false, sketch = false, derotate = false, sketch_grads = false;

  Channel(const CodecConfig& c, const PerturbationBasis* basis, ClientId client, std::size_t hidden)
      : codec(c), id(client), dim(hidden), salt(hash::of_string(c.salt)) {
    rotate = codec.mode == ChannelMode::ssop_sketch;
    sketch = uses_sketch(codec.mode);
    derotate = rotate && codec.client_derotates && !codec.edge_inverts_rotation;
    sketch_grads = sketch && codec.compress_gradients;
    if (rotate && (!basis || basis->q.rows() != static_cast<Eigen::Index>(dim)))
      throw ProtocolError("client " + std::to_string(id) + " has no perturbation basis");
    if (rotate) q = &basis->q;
  }

  [[nodiscard]] SketchParams params(std::uint64_t step, std::uint64_t direction) const {
    return SketchParams(codec.rows, codec.buckets, dim, salt, id, hash::combine(step, direction));
  }

  // What Part 2 on the edge receives.
  [[nodiscard]] Activation<double> up(const Activation<double>& h1, std::uint64_t step, std::size_t sample) const {
    Activation<double> out = h1;
    if (codec.mode == ChannelMode::gaussian_noise)
      out = channel_forward(h1, nullptr, SketchParams{}, ChannelMode::gaussian_noise, seed_of(salt, {id, step, sample}),
                            codec.noise_variance);
    if (rotate) out.values = h1.values * q->transpose();
    if (sketch) out.values = sketch_roundtrip_rows(out.values, params(step, 0));
    if (rotate && codec.edge_inverts_rotation) out.values = out.values * *q;
    return out;
  }

  // What Part 3 on the client receives.
  [[nodiscard]] Activation<double> down(const Activation<double>& h2, std::uint64_t step) const {
    Activation<double> out = h2;
    if (sketch) out.values = sketch_roundtrip_rows(h2.values, params(step, 1));
    if (derotate) out.values = out.values * *q;
    return out;
  }

  [[nodiscard]] Eigen::MatrixXd grad_down(Eigen::MatrixXd d, std::uint64_t step) const {
    if (derotate) d = d * q->transpose();
    if (sketch_grads) d = sketch_roundtrip_rows(d, params(step, 2));
    return d;
  }

  [[nodiscard]] Eigen::MatrixXd grad_up(Eigen::MatrixXd d, std::uint64_t step) const {
    if (rotate && codec.edge_inverts_rotation) d = d * q->transpose();
    if (sketch_grads) d = sketch_roundtrip_rows(d, params(step, 3));
    if (rotate) d = d * *q;
    return d;
  }
};

}  // namespace

LocalStepResult local_split_round(SplitModelState<double>& client, SplitModelState<double>& edge,
                                  std::span<const std::vector<TokenId>> batch, std::span<const int> labels,
                                  const CodecConfig& codec, const PerturbationBasis* basis, ClientId id,
                                  std::uint64_t step, double lr, double zeta) {
  if (batch.empty() || batch.size() != labels.size()) throw InputError("split round needs a non-empty labeled batch");
  const auto& cfg = client.config;
  const Channel ch(codec, basis, id, cfg.hidden_dim);

  const double mu = static_cast<double>(cfg.seq_len);
  const double plain_row = static_cast<double>(cfg.hidden_dim) * zeta;
  const double act_row = ch.sketch ? static_cast<double>(codec.rows * codec.buckets) * zeta : plain_row;
  const double grad_row = ch.sketch_grads ? act_row : plain_row;

  const std::size_t n = batch.size();
  std::vector<StageTape<double>> t1(n), t2(n);
  std::vector<Activation<double>> part3_in;
  part3_in.reserve(n);
  LocalStepResult res;
  for (std::size_t s = 0; s < n; ++s) {
    const auto h1 = forward_part1(client, batch[s], &t1[s]);
    const auto h2 = forward_part2(edge, ch.up(h1, step, s), &t2[s]);
    part3_in.push_back(ch.down(h2, step));
    res.activation_bytes += 2 * mu * act_row;
  }

  Part3Tape<double> t3;
  const auto out = forward_part3_loss(client, std::span<const Activation<double>>(part3_in), labels, &t3);
  res.loss = out.loss;
  auto g3 = backward_part3(client, t3);
  res.grad = client.params.zeros_like();
  res.grad.part(Part::three) = std::move(g3.adapters);
  res.grad.head = std::move(g3.head);

  for (std::size_t s = 0; s < n; ++s) {
    auto g2 = backward_stage(edge, t2[s], ch.grad_down(std::move(g3.input_grads[s]), step));
    axpy_blocks(res.grad.part(Part::two), 1.0, g2.adapters);
    auto g1 = backward_stage(client, t1[s], ch.grad_up(std::move(g2.input_grad), step));
    axpy_blocks(res.grad.part(Part::one), 1.0, g1.adapters);
    res.gradient_bytes += 2 * mu * grad_row;
  }

  axpy_blocks(client.params.part(Part::one), -lr, res.grad.part(Part::one));
  axpy_blocks(client.params.part(Part::three), -lr, res.grad.part(Part::three));
  axpy_head(client.params.head, -lr, res.grad.head);
  axpy_blocks(edge.params.part(Part::two), -lr, res.grad.part(Part::two));
  return res;
}

Evaluation evaluate_split(const SplitModelState<double>& model, const Dataset& data, const CodecConfig& codec,
                          std::span<const ClientId> clients,
                          std::span<const std::optional<PerturbationBasis>> bases) {
  if (clients.empty()) throw ProtocolError("split evaluation needs at least one client");
  Evaluation e;
  if (data.size() == 0) return e;
  const std::uint64_t eval_tag = 0x4556414cULL;
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ClientId n = clients[i % clients.size()];
    const PerturbationBasis* basis = n < bases.size() && bases[n] ? &*bases[n] : nullptr;
    const Channel ch(codec, basis, n, model.config.hidden_dim);
    const std::uint64_t step = hash::combine(eval_tag, i);
    const auto h1 = forward_part1(model, std::span<const TokenId>(data.inputs[i]));
    const std::vector<Activation<double>> in{ch.down(forward_part2(model, ch.up(h1, step, 0)), step)};
    const std::vector<int> y{data.labels[i]};
    const auto out = forward_part3_loss(model, std::span<const Activation<double>>(in), std::span<const int>(y));
    loss += out.loss;
    Eigen::Index arg = 0;
    out.logits.row(0).maxCoeff(&arg);
    correct += static_cast<int>(arg) == y[0];
  }
  e.loss = loss / static_cast<double>(data.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

AdapterParams<double> edge_consolidate(std::span<const AdapterParams<double>> clients, std::span<const double> sizes,
                                       const AdapterParams<double>& edge) {
  if (clients.empty()) throw AggregationError("cannot consolidate an empty cluster");
  if (clients.size() != sizes.size()) throw AggregationError("one data size per client is required");
  const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
  if (!(total > 0)) throw AggregationError("client data sizes must be positive");
  AdapterParams<double> out = clients[0].zeros_like();
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const double w = sizes[i] / total;
    axpy_blocks(out.part(Part::one), w, clients[i].part(Part::one));
    axpy_blocks(out.part(Part::three), w, clients[i].part(Part::three));
    axpy_head(out.head, w, clients[i].head);
  }
  out.part(Part::two) = edge.part(Part::two);
  return out;
}

double compute_alpha(double coherence, double trust) {
  if (coherence < 0) throw AggregationError("coherence must be >= 0");
  return trust / (1.0 + coherence);
}

std::vector<double> normalize_alphas(std::span<const double> alphas) {
  double total = 0;
  for (double a : alphas) {
    if (a < 0 || !std::isfinite(a)) throw AggregationError("aggregation weights must be finite and >= 0");
    total += a;
  }
  if (!(total > 0)) throw AggregationError("all aggregation weights are zero");
  std::vector<double> out;
  for (double a : alphas) out.push_back(a / total);
  return out;
}

AdapterParams<double> global_aggregate(std::span<const AdapterParams<double>> edges, std::span<const double> weights,
                                       bool include_head) {
  if (edges.empty() || edges.size() != weights.size()) throw AggregationError("one weight per edge model is required");
  const std::size_t size = edges[0].size(true);
  for (const auto& e : edges)
    if (e.size(true) != size) throw AggregationError("edge adapters have different shapes");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(edges[0].size(include_head)));
  for (std::size_t k = 0; k < edges.size(); ++k) acc += weights[k] * edges[k].flatten(include_head);
  AdapterParams<double> out = edges[0];
  out.assign(acc, include_head);
  return out;
}

bool check_convergence(const AdapterParams<double>& now, const AdapterParams<double>* prev, double xi,
                       bool include_head) {
  if (!prev) return false;
  return (now.flatten(include_head) - prev->flatten(include_head)).norm() <= xi;
}

Evaluation evaluate(const SplitModelState<double>& model, const Dataset& data) {
  Evaluation e;
  if (data.size() == 0) return e;
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Eigen::VectorXd z = predict_logits(model, std::span<const TokenId>(data.inputs[i]));
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    const int y = data.labels[i];
    loss += lse - z(y);
    Eigen::Index arg = 0;
    z.maxCoeff(&arg);
    correct += static_cast<int>(arg) == y;
  }
  e.loss = loss / static_cast<double>(data.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

double full_gradient_norm_sq(const SplitModelState<double>& model, std::span<const Dataset> shards, bool include_head) {
  AdapterParams<double> total = model.params.zeros_like();
  std::size_t count = 0;
  for (const auto& d : shards) {
    if (d.size() == 0) continue;
    const auto lg = loss_and_grad(model, std::span<const std::vector<TokenId>>(d.inputs), std::span<const int>(d.labels));
    total.axpy(static_cast<double>(d.size()), lg.grad);
    count += d.size();
  }
  if (count == 0) return 0.0;
  total.scale(1.0 / static_cast<double>(count));
  return total.flatten(include_head).squaredNorm();
}

namespace {

RoundRecord finish_round(const Experiment& ex, const SplitModelState<double>& global, const Evaluation& ev,
                         std::size_t g, double loss_sum, std::size_t steps) {
  RoundRecord rec;
  rec.round = g;
  rec.train_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
  rec.eval_loss = ev.loss;
  rec.eval_accuracy = ev.accuracy;
  if (ex.config.log_grad_norm)
    rec.grad_norm_sq = full_gradient_norm_sq(global, ex.shards, ex.config.aggregate_head);
  return rec;
}

}  // namespace

RunResult run_elsa(const Experiment& ex, const RoundCallback& on_round) {
  return run_elsa(ex, cluster_experiment(ex), on_round);
}

namespace {

// Everything a run derives from one clustering.
struct Plan {
  ClusteringResult clustering;
  std::vector<EdgeId> active;
  std::vector<ClientId> clustered;
  std::vector<double> weights;
  double round_bytes = 0, round_time = 0;
};

Plan make_plan(const Experiment& ex, ClusteringResult clustering) {
  const auto& cfg = ex.config;
  const std::size_t dim = cfg.model.hidden_dim;
  Plan p;
  p.clustering = std::move(clustering);
  const auto& asg = p.clustering.assignment;
  for (const auto& e : asg.edges)
    if (!e.members.empty()) p.active.push_back(e.edge);
  if (p.active.empty()) throw ProtocolError("clustering excluded every client");
  for (auto k : p.active) p.clustered.insert(p.clustered.end(), asg.edges[k].members.begin(), asg.edges[k].members.end());
  std::sort(p.clustered.begin(), p.clustered.end());

  std::vector<double> alphas;
  for (auto k : p.active) alphas.push_back(compute_alpha(asg.edges[k].coherence, asg.edges[k].trust));
  p.weights = normalize_alphas(alphas);

  CommModel cm{cfg.zeta, static_cast<double>(cfg.model.seq_len), cfg.codec.ratio(dim), cfg.bandwidth, 0.0};
  cm.lora_bytes = cfg.zeta * static_cast<double>(ex.initial.params.size(cfg.aggregate_head));
  std::vector<std::vector<double>> batches;
  std::vector<double> client_times;
  for (auto k : p.active) {
    batches.emplace_back();
    for (auto n : asg.edges[k].members) {
      const double b = static_cast<double>(std::min(cfg.batch_size, ex.shards[n].size()));
      batches.back().push_back(b);
      client_times.push_back(comm_time(cm, static_cast<double>(cfg.local_rounds), b, static_cast<double>(dim)));
    }
  }
  p.round_bytes = comm_cost(cm, p.active.size(), batches, static_cast<double>(cfg.local_rounds), static_cast<double>(dim));
  p.round_time = total_time(1.0, client_times);
  return p;
}

}  // namespace

RunResult run_elsa(const Experiment& ex, const ClusteringResult& clustering, const RoundCallback& on_round) {
  const auto& cfg = ex.config;
  const bool rotate = cfg.codec.mode == ChannelMode::ssop_sketch;
  Plan plan = make_plan(ex, clustering);

  // Per-client perturbation bases fitted on Part 1 boundary activations of
  // the warmed-up model; fitted once, when a client first joins.
  std::vector<std::optional<PerturbationBasis>> bases(cfg.n_clients);
  const auto probe = build_probe_set(seed_of(cfg.seed, {5}), cfg.probe_count, cfg.model.seq_len, cfg.model.vocab_size);
  auto fit_bases = [&] {
    if (!rotate) return;
    parallel_for(plan.clustered.size(), cfg.jobs, [&](std::size_t i) {
      const ClientId n = plan.clustered[i];
      if (bases[n]) return;
      bases[n] = make_perturbation_basis(boundary_samples(warmup_model(ex, n), probe), cfg.codec.rank, cfg.codec.salt, n);
    });
  };
  fit_bases();

  RunResult result;
  result.log.method = "elsa";
  std::vector<char> ever(cfg.n_clients, 0);
  AdapterParams<double> theta = ex.initial.params;
  std::vector<TaskHead<double>> heads(cfg.n_clients, ex.initial.params.head);

  for (std::size_t g = 1; g <= cfg.max_rounds; ++g) {
    if (cfg.refingerprint_every > 0 && g > 1 && (g - 1) % cfg.refingerprint_every == 0) {
      plan = make_plan(ex, cluster_experiment(ex, &theta));
      fit_bases();
    }
    const auto& asg = plan.clustering.assignment;
    const auto& active = plan.active;
    for (auto n : plan.clustered) ever[n] = 1;
    struct EdgeOutcome {
      AdapterParams<double> params;
      double loss_sum = 0, act_bytes = 0, grad_bytes = 0;
      std::size_t steps = 0;
      std::vector<std::pair<ClientId, TaskHead<double>>> heads;
    };
    std::vector<EdgeOutcome> outcomes(active.size());
    parallel_for(active.size(), cfg.jobs, [&](std::size_t ai) {
      const auto& members = asg.edges[active[ai]].members;
      SplitModelState<double> edge{cfg.model, ex.initial.backbone, theta};
      std::vector<SplitModelState<double>> clients;
      for (auto n : members) {
        clients.push_back({cfg.model, ex.initial.backbone, theta});
        if (!cfg.aggregate_head) clients.back().params.head = heads[n];
      }
      auto& out = outcomes[ai];
      for (std::size_t r = 0; r < cfg.local_rounds; ++r) {
        std::vector<std::size_t> order(members.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(seed_of(cfg.seed, {0x524f554eULL, g, active[ai], r}));
        std::shuffle(order.begin(), order.end(), rng);
        for (auto i : order) {
          const ClientId n = members[i];
          const auto b = sample_batch(ex.shards[n], cfg.batch_size, seed_of(cfg.seed, {0x42415443ULL, g, r, n}));
          const auto step = local_split_round(clients[i], edge, std::span<const std::vector<TokenId>>(b.inputs),
                                              std::span<const int>(b.labels), cfg.codec,
                                              bases[n] ? &*bases[n] : nullptr, n, seed_of(g, {r}), cfg.lr, cfg.zeta);
          out.loss_sum += step.loss;
          out.act_bytes += step.activation_bytes;
          out.grad_bytes += step.gradient_bytes;
          ++out.steps;
        }
      }
      std::vector<AdapterParams<double>> params;
      std::vector<double> sizes;
      for (std::size_t i = 0; i < members.size(); ++i) {
        params.push_back(clients[i].params);
        sizes.push_back(static_cast<double>(ex.shards[members[i]].size()));
        out.heads.emplace_back(members[i], clients[i].params.head);
      }
      out.params = edge_consolidate(params, sizes, edge.params);
    });

    std::vector<AdapterParams<double>> edge_params;
    double loss_sum = 0, act_bytes = 0, grad_bytes = 0;
    std::size_t steps = 0;
    for (auto& o : outcomes) {
      edge_params.push_back(std::move(o.params));
      loss_sum += o.loss_sum;
      act_bytes += o.act_bytes;
      grad_bytes += o.grad_bytes;
      steps += o.steps;
      for (auto& [n, h] : o.heads) heads[n] = std::move(h);
    }
    AdapterParams<double> next = global_aggregate(edge_params, plan.weights, true);
    if (!cfg.aggregate_head) {
      // Personal heads stay on clients; the evaluated head is their
      // data-weighted mean.
      next.head.weight.setZero();
      next.head.bias.setZero();
      double total = 0;
      for (auto k : active)
        for (auto n : asg.edges[k].members) total += static_cast<double>(ex.shards[n].size());
      for (auto k : active)
        for (auto n : asg.edges[k].members) axpy_head(next.head, static_cast<double>(ex.shards[n].size()) / total, heads[n]);
    }

    SplitModelState<double> global{cfg.model, ex.initial.backbone, next};
    RoundRecord rec = finish_round(ex, global, evaluate_split(global, ex.test, cfg.codec, plan.clustered, bases), g,
                                   loss_sum, steps);
    rec.delta_norm = (next.flatten(cfg.aggregate_head) - theta.flatten(cfg.aggregate_head)).norm();
    rec.comm_bytes = plan.round_bytes;
    rec.measured_bytes = act_bytes;
    rec.gradient_bytes = grad_bytes;
    rec.sim_time = (result.log.rounds.empty() ? 0.0 : result.log.rounds.back().sim_time) + plan.round_time;
    result.log.rounds.push_back(rec);
    if (on_round) on_round(rec);

    const bool done = check_convergence(next, g == 1 ? nullptr : &theta, cfg.xi, cfg.aggregate_head);
    theta = std::move(next);
    if (done) {
      result.log.converged = true;
      break;
    }
  }
  result.log.participants = static_cast<std::size_t>(std::count(ever.begin(), ever.end(), 1));
  result.final_params = std::move(theta);
  result.clustering = std::move(plan.clustering);
  return result;
}

RunResult run_fedavg(const Experiment& ex, bool random_clients, const RoundCallback& on_round) {
  const auto& cfg = ex.config;
  const std::size_t n_clients = cfg.n_clients;
  const std::size_t subset = random_clients ? (cfg.fedavg_subset ? cfg.fedavg_subset : std::max<std::size_t>(1, n_clients / 2))
                                            : n_clients;
  const double lora_bytes = cfg.zeta * static_cast<double>(ex.initial.params.size(true));

  RunResult result;
  result.log.method = random_clients ? "fedavg-random" : "fedavg";
  std::vector<char> ever(n_clients, 0);
  AdapterParams<double> theta = ex.initial.params;
  for (std::size_t g = 1; g <= cfg.max_rounds; ++g) {
    std::vector<ClientId> chosen(n_clients);
    std::iota(chosen.begin(), chosen.end(), ClientId{0});
    if (subset < n_clients) {
      std::mt19937_64 rng(seed_of(cfg.seed, {0x52414e44ULL, g}));
      std::shuffle(chosen.begin(), chosen.end(), rng);
      chosen.resize(subset);
      std::sort(chosen.begin(), chosen.end());
    }
    std::vector<AdapterParams<double>> locals(chosen.size());
    std::vector<double> losses(chosen.size(), 0.0);
    parallel_for(chosen.size(), cfg.jobs, [&](std::size_t i) {
      const ClientId n = chosen[i];
      SplitModelState<double> m{cfg.model, ex.initial.backbone, theta};
      for (std::size_t r = 0; r < cfg.local_rounds; ++r) {
        const auto b = sample_batch(ex.shards[n], cfg.batch_size, seed_of(cfg.seed, {0x42415443ULL, g, r, n}));
        const auto lg = loss_and_grad(m, std::span<const std::vector<TokenId>>(b.inputs), std::span<const int>(b.labels));
        losses[i] += lg.loss;
        sgd_step(m.params, lg.grad, cfg.lr);
      }
      locals[i] = std::move(m.params);
    });
    std::vector<double> sizes;
    for (auto n : chosen) {
      sizes.push_back(static_cast<double>(ex.shards[n].size()));
      ever[n] = 1;
    }
    const auto w = normalize_alphas(sizes);
    AdapterParams<double> next = global_aggregate(locals, w, true);

    SplitModelState<double> global{cfg.model, ex.initial.backbone, next};
    RoundRecord rec = finish_round(ex, global, evaluate(global, ex.test), g, std::accumulate(losses.begin(), losses.end(), 0.0),
                                   chosen.size() * cfg.local_rounds);
    rec.delta_norm = (next.flatten(true) - theta.flatten(true)).norm();
    rec.comm_bytes = 2.0 * lora_bytes * static_cast<double>(chosen.size());
    rec.measured_bytes = rec.comm_bytes;
    rec.sim_time = (result.log.rounds.empty() ? 0.0 : result.log.rounds.back().sim_time) +
                   2.0 * lora_bytes / cfg.bandwidth;
    result.log.rounds.push_back(rec);
    if (on_round) on_round(rec);

    const bool done = check_convergence(next, g == 1 ? nullptr : &theta, cfg.xi, true);
    theta = std::move(next);
    if (done) {
      result.log.converged = true;
      break;
    }
  }
  result.log.participants = static_cast<std::size_t>(std::count(ever.begin(), ever.end(), 1));
  result.final_params = std::move(theta);
  return result;
}

}  // namespace elsa

namespace elsa {

std::vector<PrivacyRow> privacy_sweep(const Experiment& ex, const PrivacySweep& sweep) {
  const auto& cfg = ex.config;
  const std::size_t dim = cfg.model.hidden_dim;
  if (sweep.victim >= cfg.n_clients) throw ConfigError("privacy.victim: no such client");
  if (sweep.samples == 0 || sweep.samples > ex.test.size()) throw ConfigError("privacy.samples: must be in [1, test_samples]");
  if (sweep.rhos.empty()) throw ConfigError("privacy.rhos: empty grid");
  std::vector<std::size_t> buckets;
  for (double rho : sweep.rhos) {
    const double z = static_cast<double>(dim) / (rho * static_cast<double>(cfg.codec.rows));
    if (!(rho > 0) || z < 1 || z != std::floor(z))
      throw ConfigError("privacy.rhos: hidden_dim / (rho * codec.rows) must be a positive integer");
    buckets.push_back(static_cast<std::size_t>(z));
  }

  const auto victim = warmup_model(ex, sweep.victim);
  const auto table = attacker_table(victim);
  const auto probe = build_probe_set(seed_of(cfg.seed, {5}), cfg.probe_count, cfg.model.seq_len, cfg.model.vocab_size);
  const Eigen::MatrixXd fit_rows = boundary_samples(victim, probe);
  const std::uint64_t salt = hash::of_string(cfg.codec.salt);

  std::vector<std::vector<TokenId>> tokens(ex.test.inputs.begin(),
                                           ex.test.inputs.begin() + static_cast<std::ptrdiff_t>(sweep.samples));
  std::vector<Activation<double>> orig;
  for (const auto& t : tokens) orig.push_back(forward_part1(victim, std::span<const TokenId>(t)));

  auto observe = [&](ChannelMode mode, std::size_t z, const PerturbationBasis* basis) {
    std::vector<Activation<double>> seen;
    for (std::size_t s = 0; s < orig.size(); ++s) {
      SketchParams p;
      if (uses_sketch(mode)) p = SketchParams(cfg.codec.rows, z, dim, salt, sweep.victim, s);
      seen.push_back(channel_forward(orig[s], basis, p, mode, seed_of(salt, {sweep.victim, s}), cfg.codec.noise_variance));
    }
    return privacy_eval(orig, seen, tokens, table);
  };

  std::vector<PrivacyRow> rows;
  auto add = [&](ChannelMode mode, std::size_t rank, bool independent, const PerturbationBasis* basis) {
    std::optional<PrivacyReport> fixed;
    for (std::size_t i = 0; i < sweep.rhos.size(); ++i) {
      PrivacyRow r;
      r.mode = mode;
      r.rho = sweep.rhos[i];
      r.rank = rank;
      r.rho_independent = independent;
      if (independent) {
        if (!fixed) fixed = observe(mode, buckets[i], basis);
        r.report = *fixed;
      } else {
        r.report = observe(mode, buckets[i], basis);
      }
      r.report.mode = to_string(mode);
      r.report.rho = r.rho;
      r.report.rank = rank;
      rows.push_back(r);
    }
  };
  add(ChannelMode::direct, 0, true, nullptr);
  add(ChannelMode::gaussian_noise, 0, true, nullptr);
  add(ChannelMode::sketch_only, 0, false, nullptr);
  for (std::size_t r : sweep.ranks) {
    if (r < 1 || r > dim) throw ConfigError("privacy.ranks: each rank must be in [1, hidden_dim]");
    const auto basis = make_perturbation_basis(fit_rows, r, cfg.codec.salt, sweep.victim);
    add(ChannelMode::ssop_sketch, r, false, &basis);
  }
  return rows;
}

}  // namespace elsa
