// Acceptance run: one PASS/FAIL line per criterion, INFO lines with the
// measured values. Usage: acceptance [criterion ...]   (default: all)
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "elsa/codec.hpp"
#include "elsa/fingerprint.hpp"
#include "elsa/metrics.hpp"
#include "elsa/model.hpp"
#include "elsa/protocol.hpp"
#include "kl_oracle.hpp"
#include "test_util.hpp"

using namespace elsa;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> info;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    info.push_back(std::string(ok ? "ok    " : "MISS  ") + what);
  }
  void note(const std::string& what) { info.push_back("      " + what); }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

Eigen::MatrixXd gaussian_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// --- 1: orthogonality ------------------------------------------------------

Outcome orthogonality() {
  Outcome o;
  std::mt19937_64 rng(101);
  double worst_orth = 0, worst_norm = 0, worst_perp = 0;
  for (int t = 0; t < 200; ++t) {
    const auto d = std::uniform_int_distribution<Eigen::Index>(2, 64)(rng);
    const auto r = std::uniform_int_distribution<Eigen::Index>(1, d)(rng);
    const Eigen::MatrixXd samples = gaussian_matrix(std::max<Eigen::Index>(r, 8), d, rng);
    const Eigen::MatrixXd u = fit_subspace(samples, static_cast<std::size_t>(r)).basis;
    const Eigen::MatrixXd v = gen_rotation("acceptance", static_cast<ClientId>(t), static_cast<std::size_t>(r));
    const Eigen::MatrixXd q = build_perturbation(u, v);
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
    worst_orth = std::max(worst_orth, (q.transpose() * q - id).cwiseAbs().maxCoeff());
    const Eigen::VectorXd x = gaussian_matrix(d, 1, rng).col(0);
    worst_norm = std::max(worst_norm, std::abs((q * x).norm() - x.norm()));
    const Eigen::VectorXd perp = x - u * (u.transpose() * x);
    worst_perp = std::max(worst_perp, (q * perp - perp).cwiseAbs().maxCoeff());
  }
  o.require(worst_orth < 1e-10, "max |Q^T Q - I| = " + fmt(worst_orth) + " < 1e-10");
  o.require(worst_norm < 1e-10, "max | |Qx| - |x| | = " + fmt(worst_norm) + " < 1e-10");
  o.require(worst_perp < 1e-10, "max |Qx - x| off the subspace = " + fmt(worst_perp) + " < 1e-10");
  return o;
}

// --- 2: sketch exactness and scaling ---------------------------------------

Outcome sketch_scaling() {
  Outcome o;
  std::mt19937_64 rng(202);
  // Collision-free configurations found by scanning rounds; exactness needs
  // every coordinate alone in its bucket in every row.
  struct Shape { std::size_t d, z, y; };
  double worst = 0;
  int found = 0;
  for (const auto& s : {Shape{3, 64, 3}, Shape{8, 256, 1}, Shape{16, 4096, 2}}) {
    for (std::uint64_t round = 0; round < 10000; ++round) {
      SketchParams p(s.y, s.z, s.d, 77, 5, round);
      if (!p.collision_free()) continue;
      // Verify distinct buckets independently of collision_free().
      bool distinct = true;
      for (std::size_t j = 0; j < s.y; ++j) {
        std::set<std::size_t> seen;
        for (std::size_t k = 0; k < s.d; ++k) distinct = distinct && seen.insert(p.bucket(j, k)).second;
      }
      if (!distinct) continue;
      const Eigen::VectorXd h = gaussian_matrix(static_cast<Eigen::Index>(s.d), 1, rng).col(0) * 10.0;
      worst = std::max(worst, (sketch_decode(sketch_encode(h, p), p) - h).cwiseAbs().maxCoeff());
      ++found;
      break;
    }
  }
  o.require(found == 3, "collision-free configurations found: " + std::to_string(found) + "/3");
  o.require(worst <= 1e-12, "max decode error when collision-free = " + fmt(worst) + " <= 1e-12");

  const std::size_t d = 64, y = 2;
  std::vector<Eigen::VectorXd> vectors;
  for (int i = 0; i < 100; ++i) vectors.push_back(gaussian_matrix(d, 1, rng).col(0));
  std::vector<double> mse;
  for (std::size_t z : {32, 16, 8, 4}) {
    double total = 0;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      SketchParams p(y, z, d, 91, static_cast<ClientId>(i), 0);
      total += (sketch_decode(sketch_encode(vectors[i], p), p) - vectors[i]).squaredNorm() / static_cast<double>(d);
    }
    mse.push_back(total / static_cast<double>(vectors.size()));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < mse.size(); ++i) monotone = monotone && mse[i] >= mse[i - 1];
  o.require(monotone, "decode MSE over rho 1,2,4,8: " + fmt(mse[0]) + ", " + fmt(mse[1]) + ", " + fmt(mse[2]) + ", " +
                          fmt(mse[3]) + " non-decreasing");
  return o;
}

// --- 3: gradients -----------------------------------------------------------

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

Outcome gradients() {
  Outcome o;
  const auto cfg = elsa::testing::tiny_config();
  auto model = init_model<double>(cfg, 303);
  elsa::testing::randomize_adapters(model.params, 304);
  auto batch = elsa::testing::random_batch(4, 8, cfg.vocab_size, 305);
  batch[2].resize(6);
  const std::vector<int> labels{0, 1, 2, 3};
  const auto loss = [&](const Eigen::VectorXd& theta) {
    SplitModelState<double> m = model;
    m.params.assign(theta);
    return loss_and_grad(m, std::span<const std::vector<TokenId>>(batch), std::span<const int>(labels)).loss;
  };
  const auto analytic = loss_and_grad(model, std::span<const std::vector<TokenId>>(batch), std::span<const int>(labels));
  const Eigen::VectorXd theta = model.params.flatten();
  Eigen::VectorXd fd(theta.size());
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd up = theta, dn = theta;
    up(i) += h;
    dn(i) -= h;
    fd(i) = (loss(up) - loss(dn)) / (2 * h);
  }
  // Per tensor: map the numeric vector back into the parameter layout.
  AdapterParams<double> numeric = model.params;
  numeric.assign(fd);
  double worst = 0;
  auto tensor = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& n) {
    const Eigen::Map<const Eigen::VectorXd> av(a.data(), a.size()), nv(n.data(), n.size());
    worst = std::max(worst, rel_err(av, nv));
  };
  std::size_t tensors = 0;
  for (int p = 0; p < 3; ++p)
    for (std::size_t b = 0; b < numeric.parts[p].size(); ++b) {
      const auto& ga = analytic.grad.parts[p][b];
      const auto& gn = numeric.parts[p][b];
      tensor(ga.query.a, gn.query.a);
      tensor(ga.query.b, gn.query.b);
      tensor(ga.value.a, gn.value.a);
      tensor(ga.value.b, gn.value.b);
      tensors += 4;
    }
  tensor(analytic.grad.head.weight, numeric.head.weight);
  tensor(analytic.grad.head.bias, numeric.head.bias);
  tensors += 2;
  o.require(worst < 1e-4, "worst per-tensor relative error over " + std::to_string(tensors) + " tensors = " +
                              fmt(worst) + " < 1e-4");

  auto client = model, edge = model;
  CodecConfig direct;
  direct.mode = ChannelMode::direct;
  const auto split = local_split_round(client, edge, batch, labels, direct, nullptr, 0, 0, 0.1);
  auto mono = model.params;
  sgd_step(mono, analytic.grad, 0.1);
  // Client owns parts 1 and 3 plus the head, the edge owns part 2.
  AdapterParams<double> joined = client.params;
  joined.part(Part::two) = edge.params.part(Part::two);
  const double step_diff = (joined.flatten() - mono.flatten()).cwiseAbs().maxCoeff();
  o.require(step_diff <= 1e-9, "split direct round vs monolithic SGD step, max diff = " + fmt(step_diff) + " <= 1e-9");
  o.require(std::abs(split.loss - analytic.loss) <= 1e-9, "split loss equals monolithic loss");
  return o;
}

// --- 4: KL oracle -------------------------------------------------------------

Fingerprint as_fingerprint(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  Fingerprint f;
  f.mean = mean;
  f.cov = cov;
  f.ridge = 0;
  return f;
}

Outcome kl_oracle() {
  Outcome o;
  std::mt19937_64 rng(404);
  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    const auto k = std::uniform_int_distribution<Eigen::Index>(1, 4)(rng);
    auto spd = [&] {
      const Eigen::MatrixXd a = gaussian_matrix(k, k, rng);
      return Eigen::MatrixXd(a * a.transpose() / static_cast<double>(k) + 0.3 * Eigen::MatrixXd::Identity(k, k));
    };
    const Eigen::VectorXd ma = gaussian_matrix(k, 1, rng).col(0), mb = gaussian_matrix(k, 1, rng).col(0);
    const Eigen::MatrixXd ca = spd(), cb = spd();
    const double closed = sym_kl(as_fingerprint(ma, ca), as_fingerprint(mb, cb));
    const double mc = elsa::testing::mc_kl(ma, ca, mb, cb, 1000000, 1000 + t) +
                      elsa::testing::mc_kl(mb, cb, ma, ca, 1000000, 2000 + t);
    worst = std::max(worst, std::abs(closed - mc) / std::abs(mc));
  }
  o.require(worst < 0.05, "worst relative gap closed form vs Monte-Carlo (1e6 samples, 20 pairs) = " + fmt(worst) +
                              " < 0.05");
  return o;
}

// --- 5: planted clustering and poisoned trust -------------------------------

double pairwise_accuracy(const std::vector<int>& truth, const std::vector<int>& found) {
  std::size_t agree = 0, pairs = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = i + 1; j < truth.size(); ++j) {
      const bool same_truth = truth[i] == truth[j];
      const bool same_found = found[i] >= 0 && found[i] == found[j];
      agree += same_truth == same_found;
      ++pairs;
    }
  return static_cast<double>(agree) / static_cast<double>(pairs);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome clustering() {
  Outcome o;
  // Two groups on one edge: clients 0..3 only see classes {0,1}, clients
  // 4..7 only see {2,3}.
  int recovered = 0;
  std::string accs;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.n_clients = 8;
    cfg.n_edges = 1;
    cfg.n_poisoned = 0;
    cfg.alpha = 1000;
    cfg.n_clusters = 2;
    auto ex = make_experiment(cfg);
    Dataset pool;
    for (const auto& s : ex.shards)
      for (std::size_t i = 0; i < s.inputs.size(); ++i) {
        pool.inputs.push_back(s.inputs[i]);
        pool.labels.push_back(s.labels[i]);
        pool.true_labels.push_back(s.true_labels[i]);
        pool.ids.push_back(s.ids[i]);
      }
    for (auto& s : ex.shards) s = Dataset{};
    std::size_t next[2] = {0, 4};
    for (std::size_t i = 0; i < pool.inputs.size(); ++i) {
      const int g = pool.true_labels[i] < 2 ? 0 : 1;
      auto& s = ex.shards[next[g]];
      next[g] = g == 0 ? (next[g] + 1) % 4 : 4 + (next[g] - 3) % 4;
      s.inputs.push_back(pool.inputs[i]);
      s.labels.push_back(pool.labels[i]);
      s.true_labels.push_back(pool.true_labels[i]);
      s.ids.push_back(pool.ids[i]);
    }
    const auto cr = cluster_experiment(ex);
    const std::vector<int> truth{0, 0, 0, 0, 1, 1, 1, 1};
    const double acc = pairwise_accuracy(truth, cr.assignment.subcluster_of);
    recovered += acc >= 0.9;
    accs += (accs.empty() ? "" : " ") + fmt(acc, 3);
  }
  o.require(recovered >= 9, "planted groups recovered (pairwise accuracy >= 0.9) in " + std::to_string(recovered) +
                                "/10 seeds [" + accs + "]");

  // Default non-IID population with 4 label-flipped clients.
  int below = 0;
  std::string gaps;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    const auto ex = make_experiment(cfg);
    const auto cr = cluster_experiment(ex);
    std::vector<double> clean, poisoned;
    for (std::size_t n = 0; n < cfg.n_clients; ++n) {
      const bool p = std::binary_search(ex.poisoned.begin(), ex.poisoned.end(), static_cast<ClientId>(n));
      (p ? poisoned : clean).push_back(cr.trust(static_cast<Eigen::Index>(n)));
    }
    const double clean_median = median(clean);
    const double poisoned_median = median(poisoned);
    below += poisoned_median < clean_median;
    gaps += (gaps.empty() ? "" : " ") + fmt(poisoned_median / clean_median, 3);
  }
  o.require(below >= 9, "poisoned median trust below clean median in " + std::to_string(below) +
                            "/10 seeds [poisoned/clean ratio: " + gaps + "]");
  return o;
}

// --- 6: end-to-end ordering -------------------------------------------------

Outcome ordering() {
  Outcome o;
  int ordered = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.codec.mode = ChannelMode::direct;
    cfg.lr = 0.3;
    const auto ex = make_experiment(cfg);
    const double elsa_acc = run_elsa(ex).log.rounds.back().eval_accuracy;
    const double fedavg = run_fedavg(ex, false).log.rounds.back().eval_accuracy;
    const double random = run_fedavg(ex, true).log.rounds.back().eval_accuracy;
    const bool ok = elsa_acc >= fedavg && fedavg >= random;
    ordered += ok;
    o.note("seed " + std::to_string(seed) + ": ELSA " + fmt(elsa_acc, 3) + ", FedAvg " + fmt(fedavg, 3) +
           ", FedAvg(Random) " + fmt(random, 3) + (ok ? "" : "  (out of order)"));
  }
  o.require(ordered >= 4, "ELSA >= FedAvg >= FedAvg(Random) in " + std::to_string(ordered) + "/5 seeds (direct codec)");

  // Same task with the default compressed, perturbed channel; reported only.
  std::string line;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.lr = 0.3;
    line += (line.empty() ? "" : " ") + fmt(run_elsa(make_experiment(cfg)).log.rounds.back().eval_accuracy, 3);
  }
  o.note("ELSA with ssop+sketch channel, final accuracy per seed: " + line);
  return o;
}

// --- 7: communication model -------------------------------------------------

Outcome comm_model() {
  Outcome o;
  // Integer inputs with power-of-two rho and bandwidth keep every product
  // and quotient exact, so the oracle can use 64-bit integer arithmetic.
  std::mt19937_64 rng(707);
  auto pick = [&](std::uint64_t lo, std::uint64_t hi) { return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng); };
  int cost_ok = 0, time_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const std::uint64_t zeta = pick(1, 8), mu = pick(1, 128), hidden = pick(1, 1024), rounds = pick(1, 10);
    const std::uint64_t rho = std::uint64_t{1} << pick(0, 4), bw = std::uint64_t{1} << pick(10, 30);
    const std::uint64_t lora = pick(0, 100000), k = pick(1, 5);
    std::vector<std::vector<double>> batches(k);
    std::uint64_t sum_b = 0, max_b = 0;
    for (auto& edge : batches)
      for (std::uint64_t c = pick(0, 6); c > 0; --c) {
        const std::uint64_t b = pick(1, 64);
        edge.push_back(static_cast<double>(b));
        sum_b += b;
        max_b = std::max(max_b, b);
      }
    const std::uint64_t numer = 2 * rounds * zeta * mu * hidden * sum_b;
    const double expect_cost = static_cast<double>(numer / rho) + static_cast<double>(numer % rho) / static_cast<double>(rho) +
                               static_cast<double>(k * lora);
    const CommModel m{static_cast<double>(zeta), static_cast<double>(mu), static_cast<double>(rho),
                      static_cast<double>(bw), static_cast<double>(lora)};
    cost_ok += comm_cost(m, k, batches, static_cast<double>(rounds), static_cast<double>(hidden)) == expect_cost;

    std::vector<double> times;
    for (const auto& edge : batches)
      for (double b : edge) times.push_back(comm_time(m, static_cast<double>(rounds), b, static_cast<double>(hidden)));
    const double g = static_cast<double>(pick(1, 500));
    const std::uint64_t straggler = 2 * rounds * max_b * mu * zeta * hidden;
    const double expect_total = max_b == 0 ? 0.0 : g * std::ldexp(static_cast<double>(straggler), -static_cast<int>(std::log2(rho * bw)));
    time_ok += total_time(g, times) == expect_total;
  }
  o.require(cost_ok == 100, "per-round cost exact on " + std::to_string(cost_ok) + "/100 tuples");
  o.require(time_ok == 100, "straggler total time exact on " + std::to_string(time_ok) + "/100 tuples");
  const double worked = comm_cost(CommModel{4, 8, 1, 1e6, 100}, 1, {{2}}, 1, 16);
  o.require(worked == 2148.0, "worked example = " + fmt(worked, 10) + " bytes (2148)");
  return o;
}

// --- 8: privacy direction ---------------------------------------------------

Outcome privacy() {
  Outcome o;
  RunConfig cfg;
  const auto ex = make_experiment(cfg);
  const auto rows = privacy_sweep(ex, PrivacySweep{});
  double direct_acc = 0;
  bool direct_exact = true;
  for (const auto& r : rows)
    if (r.report.mode == "direct") {
      direct_acc = r.report.token_acc;
      direct_exact = direct_exact && r.report.cos_sim == 1.0 && r.report.mse == 0.0;
    }
  o.require(direct_exact, "direct mode cos_sim = 1 and mse = 0 exactly (token acc " + fmt(direct_acc, 3) + ")");
  std::map<double, double> acc8, acc16;
  bool cos_ok = true, acc_ok = true;
  for (const auto& r : rows) {
    o.note(r.report.mode + (r.rank ? " r=" + std::to_string(r.rank) : "") + " rho=" + fmt(r.rho) + ": cos " +
           fmt(r.report.cos_sim, 3) + ", mse " + fmt(r.report.mse, 3) + ", token acc " + fmt(r.report.token_acc, 3));
    if (r.report.mode != "ssop+sketch") continue;
    if (r.rank == 8) {
      acc8[r.rho] = r.report.token_acc;
      cos_ok = cos_ok && std::abs(r.report.cos_sim) < 0.15;
      acc_ok = acc_ok && r.report.token_acc < direct_acc / 5;
    } else if (r.rank == 16) {
      acc16[r.rho] = r.report.token_acc;
    }
  }
  o.require(cos_ok, "ssop+sketch r=8: |cos_sim| < 0.15 at every rho");
  o.require(acc_ok, "ssop+sketch r=8: token acc < direct / 5 at every rho");
  bool rank_ok = !acc16.empty();
  for (const auto& [rho, a] : acc16) rank_ok = rank_ok && a <= acc8.at(rho);
  o.require(rank_ok, "r=16 token acc <= r=8 token acc at every rho");
  return o;
}

// --- 9: bound ---------------------------------------------------------------

Outcome bound() {
  Outcome o;
  const double worked = theorem_bound({1, 1, 1, 0.1, 100});
  o.require(std::abs(worked - 0.6) < 1e-12, "worked example = " + fmt(worked, 12) + " (0.6)");
  bool monotone = true;
  double prev = 1e300;
  for (double g = 1; g <= 1e8; g *= 3) {
    const double b = theorem_bound({2, 1.5, 0.7, 0.05, g});
    monotone = monotone && b < prev;
    prev = b;
  }
  o.require(monotone, "bound strictly decreasing in G");
  const double far = theorem_bound({2, 1.5, 0.7, 0.05, 1e16});
  o.require(std::abs(far - 0.05) < 1e-6, "bound at G = 1e16 is " + fmt(far, 8) + " (floor 0.05)");

  RunConfig cfg;
  cfg.seed = 9;
  cfg.alpha = 1000;
  cfg.n_poisoned = 0;
  cfg.n_edges = 1;
  cfg.codec.mode = ChannelMode::direct;
  cfg.log_grad_norm = true;
  // Constant-step SGD never meets the xi rule here, so the run goes long
  // enough to sit on its noise floor. Round seeds depend only on the round,
  // so the first 30 rounds equal a default-length run.
  cfg.max_rounds = 200;
  const auto res = run_elsa(make_experiment(cfg));
  const auto trace = grad_norm_trace(res.log);
  // Rises over the second half of the first g rounds; `cumulative` averages
  // from round 1, otherwise from the start of that half.
  auto rises = [&](std::size_t g, bool cumulative) {
    const auto first = trace.begin() + static_cast<std::ptrdiff_t>(cumulative ? 0 : g / 2);
    const auto avg = running_mean(std::vector<double>(first, trace.begin() + static_cast<std::ptrdiff_t>(g)));
    std::size_t n = 0;
    for (std::size_t i = (cumulative ? g / 2 : 0) + 1; i < avg.size(); ++i) n += avg[i] > avg[i - 1];
    return n;
  };
  o.note("IID/direct run: " + std::to_string(trace.size()) + " rounds, converged by xi " +
         (res.log.converged ? "yes" : "no") + ", grad norm^2 " + fmt(trace.front()) + " -> " + fmt(trace.back()) +
         ", accuracy after 30 rounds " + fmt(res.log.rounds[29].eval_accuracy, 3) + ", final " +
         fmt(res.log.rounds.back().eval_accuracy, 3));
  o.note("first 30 rounds: rises in running average over final half: " + std::to_string(rises(30, true)) +
         " (from round 1), " + std::to_string(rises(30, false)) + " (from mid-run)");
  o.note("all rounds, running average from mid-run: " + std::to_string(rises(trace.size(), false)) + " rises");
  const auto r = rises(trace.size(), true);
  o.require(r == 0, "running average of grad norm^2 (from round 1) over the final half is non-increasing: " +
                        std::to_string(r) + " rises in " + std::to_string(trace.size() - trace.size() / 2 - 1) + " steps");
  return o;
}

// --- 10: CLI determinism ------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    files[e.path().filename().string()] = s.str();
  }
  return files;
}

Outcome determinism() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / ("elsa_acceptance_" + std::to_string(::getpid()));
  const std::string base = std::string(ELSA_SIM_PATH) + " --config " + ELSA_CONFIG_DIR + "/smoke.yaml --out-dir " +
                           dir.string() + " ";
  for (const std::string sub : {"run", "run --baseline fedavg", "run --baseline fedavg-random", "cluster",
                                "privacy-eval", "comm-model", "bound --rounds 10 100 1000"}) {
    fs::remove_all(dir);
    const int first = std::system((base + sub + " > /dev/null 2>&1").c_str());
    const auto a = snapshot(dir);
    const int second = std::system((base + sub + " > /dev/null 2>&1").c_str());
    const auto b = snapshot(dir);
    o.require(first == 0 && second == 0 && !a.empty() && a == b,
              sub + ": " + std::to_string(a.size()) + " file(s) byte-identical across reruns");
  }
  fs::remove_all(dir);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "orthogonality suite", 10, orthogonality},
      {2, "sketch exactness and scaling", 30, sketch_scaling},
      {3, "gradient correctness", 120, gradients},
      {4, "KL oracle agreement", 120, kl_oracle},
      {5, "planted clustering and poisoned trust", 300, clustering},
      {6, "end-to-end ordering", 900, ordering},
      {7, "communication model exactness", 1, comm_model},
      {8, "privacy direction", 300, privacy},
      {9, "bound calculator and gradient trace", 600, bound},
      {10, "CLI determinism", 1e9, determinism},
  };
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!chosen.empty() && !chosen.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.info.push_back(std::string("MISS  threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = out.pass && in_time;
    failed += !pass;
    for (const auto& line : out.info) std::cout << "INFO [" << c.id << "] " << line << '\n';
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << " (" << fmt(secs, 3) << " s"
              << (in_time ? "" : ", over the " + fmt(c.budget_s) + " s budget") << ")\n"
              << std::flush;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : "all criteria passed") << '\n';
  return failed ? 1 : 0;
}
