#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "elsa/clustering.hpp"

using namespace elsa;

namespace {

Fingerprint point_fp(double mean, double var = 1.0) {
  Fingerprint f;
  f.mean = Eigen::VectorXd::Constant(2, mean);
  f.cov = var * Eigen::MatrixXd::Identity(2, 2);
  f.ridge = 0;
  f.probe_embeddings = Eigen::MatrixXd::Ones(2, 2);
  return f;
}

// Normalized cut of a 2-partition given by bitmask.
double ncut(const Eigen::MatrixXd& a, unsigned mask) {
  const auto n = a.rows();
  double cut = 0, vol_a = 0, vol_b = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool ia = mask >> i & 1u, ja = mask >> j & 1u;
      (ia ? vol_a : vol_b) += a(i, j);
      if (ia && !ja) cut += a(i, j);
    }
  return cut / vol_a + cut / vol_b;
}

std::set<std::set<ClientId>> as_sets(const std::vector<std::vector<ClientId>>& groups) {
  std::set<std::set<ClientId>> s;
  for (const auto& g : groups) s.insert({g.begin(), g.end()});
  return s;
}

}  // namespace

TEST_CASE("feasible servers use an inclusive latency threshold") {
  Topology t;
  t.latency.resize(3, 2);
  t.latency << 100, 300, 250, 201, 200, 50;
  t.tau_max = 200;
  CHECK(feasible_servers(t, 0) == std::vector<EdgeId>{0});
  CHECK(feasible_servers(t, 1).empty());
  CHECK(feasible_servers(t, 2) == std::vector<EdgeId>{0, 1});
  t.tau_max = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("affinity identities") {
  const std::vector<ClientId> c{0, 1, 2};
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(3, 3);
  CHECK((affinity(c, Eigen::VectorXd::Ones(3), r, 1.0).array() == 1.0).all());

  r << 0, 0.4, 1.2, 0.4, 0, 0.7, 1.2, 0.7, 0;
  Eigen::VectorXd w(3);
  w << 0.9, 0.5, 0.7;
  const auto a1 = affinity(c, w, r, 1.0), a2 = affinity(c, w, r, 2.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(a1(i, i) == doctest::Approx(w(i) * w(i)));
    for (int j = 0; j < 3; ++j) {
      const double ww = w(i) * w(j);
      CHECK(a2(i, j) == doctest::Approx(ww * std::pow(a1(i, j) / ww, 2)));
    }
  }

  Eigen::MatrixXd blocks(4, 4);
  blocks << 0, 0.1, 10, 10, 0.1, 0, 10, 10, 10, 10, 0, 0.1, 10, 10, 0.1, 0;
  const std::vector<ClientId> c4{0, 1, 2, 3};
  const auto ab = affinity(c4, Eigen::VectorXd::Ones(4), blocks, 1.0);
  CHECK(ab(0, 1) / ab(0, 2) > std::exp(9.0));
  CHECK_THROWS_AS((void)affinity(c, w, r, 0.0), ConfigError);
}

TEST_CASE("eigengap picks the largest gap with a sentinel of 1") {
  Eigen::VectorXd ev(5);
  ev << 0, 0.01, 0.9, 1.0, 1.1;
  CHECK(eigengap_count(ev, 4) == 2);
  ev << 0, 1, 1, 1, 1;
  CHECK(eigengap_count(ev, 4) == 1);
  Eigen::VectorXd two(2);
  two << 0, 0.0;
  CHECK(eigengap_count(two, 4) == 2);
}

TEST_CASE("spectral clustering recovers the minimum normalized cut on planted blocks") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> noise(0.0, 0.05);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 4 + trial % 5;  // 4..8 clients
    std::vector<int> block(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) block[static_cast<std::size_t>(i)] = (i * 7 + trial) % 2;
    if (std::count(block.begin(), block.end(), 0) == 0 || std::count(block.begin(), block.end(), 1) == 0) block[0] ^= 1;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) a(i, j) = a(j, i) = block[static_cast<std::size_t>(i)] == block[static_cast<std::size_t>(j)] ? 0.9 + noise(rng) : noise(rng);

    unsigned best_mask = 0;
    double best = 1e300;
    for (unsigned m = 1; m < (1u << n) - 1; ++m)
      if (const double v = ncut(a, m); v < best) best = v, best_mask = m;
    std::set<ClientId> planted;
    for (int i = 0; i < n; ++i)
      if (best_mask >> i & 1u) planted.insert(static_cast<ClientId>(i));
    std::set<ClientId> rest;
    for (int i = 0; i < n; ++i)
      if (!planted.count(static_cast<ClientId>(i))) rest.insert(static_cast<ClientId>(i));

    std::vector<ClientId> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), ClientId{0});
    const auto groups = spectral_cluster(ids, a, {std::nullopt, 4, 11, 8});
    CHECK(as_sets(groups) == std::set<std::set<ClientId>>{planted, rest});
  }
}

TEST_CASE("spectral clustering edge cases and equivariance") {
  const std::vector<ClientId> one{7};
  CHECK(spectral_cluster(one, Eigen::MatrixXd::Ones(1, 1), {}) == std::vector<std::vector<ClientId>>{{7}});

  const std::vector<ClientId> ids{3, 1, 2, 0, 4};
  const auto all = spectral_cluster(ids, Eigen::MatrixXd::Ones(5, 5), {1, 4, 0, 8});
  CHECK(all == std::vector<std::vector<ClientId>>{{0, 1, 2, 3, 4}});

  // Three planted groups over 9 ids; shuffle the order and compare.
  std::vector<ClientId> base{10, 11, 12, 20, 21, 22, 30, 31, 32};
  auto build = [](const std::vector<ClientId>& v) {
    Eigen::MatrixXd a(9, 9);
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) a(i, j) = (v[static_cast<std::size_t>(i)] / 10 == v[static_cast<std::size_t>(j)] / 10) ? 1.0 : 0.02;
    return a;
  };
  const auto g1 = spectral_cluster(base, build(base), {std::nullopt, 4, 5, 8});
  CHECK(g1 == std::vector<std::vector<ClientId>>{{10, 11, 12}, {20, 21, 22}, {30, 31, 32}});
  std::vector<ClientId> shuffled = base;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(8));
  CHECK(spectral_cluster(shuffled, build(shuffled), {std::nullopt, 4, 5, 8}) == g1);

  // Scaling all trust scores leaves membership unchanged.
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(40, 40);
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) r(i, j) = (base[static_cast<std::size_t>(i)] / 10 == base[static_cast<std::size_t>(j)] / 10) ? 0.1 : 4.0;
  std::vector<ClientId> local{0, 1, 2, 3, 4, 5, 6, 7, 8};
  Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(40, 0.5, 0.9);
  const auto s1 = spectral_cluster(local, affinity(local, w, r, 1.0), {std::nullopt, 4, 2, 8});
  const auto s2 = spectral_cluster(local, affinity(local, (0.3 * w).eval(), r, 1.0), {std::nullopt, 4, 2, 8});
  CHECK(s1 == s2);

  Eigen::MatrixXd asym = Eigen::MatrixXd::Ones(2, 2);
  asym(0, 1) = 0.5;
  const std::vector<ClientId> two{0, 1};
  CHECK_THROWS_AS((void)spectral_cluster(two, asym, {}), InputError);
}

TEST_CASE("low-trust merging") {
  std::vector<Fingerprint> fps{point_fp(0), point_fp(0.1), point_fp(5), point_fp(5.2), point_fp(0.3), point_fp(4.9)};
  Eigen::VectorXd w(6);
  w << 0.9, 0.8, 0.9, 0.7, 0.1, 0.05;
  const std::vector<std::vector<ClientId>> clusters{{0, 1}, {2, 3}, {4}, {5}};

  const auto none = merge_low_trust({{0, 1}, {2, 3}}, w, fps, 0.3);
  CHECK(none.clusters == std::vector<std::vector<ClientId>>{{0, 1}, {2, 3}});
  CHECK(none.excluded.empty());

  const auto merged = merge_low_trust(clusters, w, fps, 0.3);
  CHECK(merged.clusters == std::vector<std::vector<ClientId>>{{0, 1, 4}, {2, 3, 5}});
  CHECK(merged.excluded.empty());

  const auto dropped = merge_low_trust({{4}, {5}}, w, fps, 0.3);
  CHECK(dropped.clusters.empty());
  CHECK(dropped.excluded == std::vector<ClientId>{4, 5});

  const auto pooled = pooled_fingerprint(std::vector<ClientId>{0, 2}, fps);
  CHECK(pooled.mean(0) == doctest::Approx(2.5));
}

TEST_CASE("assignment: coverage, min-latency dedup, exclusions and monotone filtering") {
  Topology t;
  t.latency.resize(5, 2);
  t.latency << 10, 500, 20, 500, 500, 30, 50, 40, 900, 900;
  t.tau_max = 200;
  std::vector<Fingerprint> fps{point_fp(0), point_fp(0.1), point_fp(0.2), point_fp(0.1), point_fp(0)};
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(5, 5);
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(5, 0.8);
  const auto a = assign_clients(t, fps, w, r, {1.0, 0.3, 1, std::nullopt, 4});
  CHECK(a.edges[0].members == std::vector<ClientId>{0, 1});
  CHECK(a.edges[1].members == std::vector<ClientId>{2, 3});
  CHECK(a.edge_of[3] == EdgeId{1});
  REQUIRE(a.excluded.size() == 1);
  CHECK(a.excluded[0] == std::pair<ClientId, Exclusion>{4, Exclusion::out_of_range});
  CHECK(a.edges[0].trust == doctest::Approx(0.8));
  CHECK(a.active_edges() == 2);

  // Tie in latency goes to the lower edge id.
  t.latency(3, 0) = 40;
  CHECK(assign_clients(t, fps, w, r, {1.0, 0.3, 1, std::nullopt, 4}).edge_of[3] == EdgeId{0});

  // All trust below the threshold: nothing survives.
  CHECK_THROWS_AS((void)assign_clients(t, fps, Eigen::VectorXd::Constant(5, 0.1), r, {1.0, 0.3, 1, std::nullopt, 4}),
                  ConfigError);

  // Lowering w_min never drops a client that was included.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Topology big;
  big.latency.resize(12, 3);
  for (Eigen::Index i = 0; i < big.latency.size(); ++i) big.latency.data()[i] = 300 * u(rng);
  std::vector<Fingerprint> bf;
  Eigen::VectorXd bw(12);
  for (int i = 0; i < 12; ++i) {
    bf.push_back(point_fp(3 * u(rng)));
    bw(i) = u(rng);
  }
  const auto br = divergence_matrix(bf);
  std::set<ClientId> prev;
  for (double wmin : {0.7, 0.5, 0.3, 0.1, 0.0}) {
    std::set<ClientId> now;
    try {
      const auto res = assign_clients(big, bf, bw, br, {1.0, wmin, 9, std::nullopt, 4});
      for (std::size_t c = 0; c < 12; ++c)
        if (res.edge_of[c]) now.insert(c);
      for (const auto& e : res.edges)
        for (auto m : e.members) CHECK(big.latency(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(e.edge)) <= big.tau_max);
    } catch (const ConfigError&) {
    }
    CHECK(std::includes(now.begin(), now.end(), prev.begin(), prev.end()));
    prev = now;
  }
}
