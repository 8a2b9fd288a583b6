#include <doctest.h>

#include <random>
#include <sstream>

#include "elsa/codec.hpp"

using namespace elsa;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// First round index >= start whose params are collision-free.
SketchParams find_collision_free(std::size_t y, std::size_t z, std::size_t d, std::uint64_t start = 0) {
  for (std::uint64_t round = start; round < start + 100000; ++round) {
    SketchParams p(y, z, d, 77, 3, round);
    if (p.collision_free()) return p;
  }
  FAIL("no collision-free seed found");
  return {};
}

}  // namespace

TEST_CASE("channel mode names round-trip and unknown names are config errors") {
  for (auto m : {ChannelMode::direct, ChannelMode::gaussian_noise, ChannelMode::sketch_only, ChannelMode::ssop_sketch})
    CHECK(parse_channel_mode(to_string(m)) == m);
  CHECK_THROWS_AS((void)parse_channel_mode("ssop"), ConfigError);
}

TEST_CASE("fit_subspace: rank-1 rows, orthonormality and tail energy") {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(5, 4);
  j.col(0).setConstant(-2.0);
  auto fit = fit_subspace(j, 1);
  CHECK(fit.basis(0, 0) == doctest::Approx(1.0));
  CHECK(fit.basis.col(0).tail(3).norm() < 1e-12);
  CHECK_FALSE(fit.degenerate);

  auto deg = fit_subspace(j, 3);
  CHECK(deg.degenerate);
  CHECK((deg.basis.transpose() * deg.basis - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);

  const Eigen::MatrixXd a = random_matrix(8, 16, 11);
  for (std::size_t r = 1; r <= 8; ++r) {
    auto f = fit_subspace(a, r);
    CHECK((f.basis.transpose() * f.basis - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff() < 1e-10);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const double tail = svd.singularValues().tail(8 - r).squaredNorm();
    const double resid = (a - a * f.basis * f.basis.transpose()).squaredNorm();
    CHECK(resid == doctest::Approx(tail).epsilon(1e-9).scale(1.0));
    for (Eigen::Index c = 0; c < f.basis.cols(); ++c) {
      Eigen::Index arg = 0;
      f.basis.col(c).cwiseAbs().maxCoeff(&arg);
      CHECK(f.basis(arg, c) > 0);
    }
  }
  CHECK_THROWS_AS((void)fit_subspace(a, 17), InputError);
  Eigen::MatrixXd bad = a;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)fit_subspace(bad, 2), NumericError);
}

TEST_CASE("gen_rotation is orthogonal, deterministic and client-specific") {
  const auto v = gen_rotation("salt", 4, 6);
  CHECK((v.transpose() * v - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(v == gen_rotation("salt", 4, 6));
  int distinct = 0;
  for (ClientId n = 0; n < 100; ++n)
    if ((gen_rotation("salt", n, 6) - gen_rotation("salt", n + 1, 6)).norm() > 1e-3) ++distinct;
  CHECK(distinct == 100);
  CHECK((gen_rotation("salt", 1, 6) - gen_rotation("pepper", 1, 6)).norm() > 1e-3);
}

TEST_CASE("perturbation matrix: identity rotation, complement and norms") {
  const auto u = fit_subspace(random_matrix(10, 16, 3), 5).basis;
  CHECK((build_perturbation(u, Eigen::MatrixXd::Identity(5, 5)) - Eigen::MatrixXd::Identity(16, 16))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
  const auto q = build_perturbation(u, gen_rotation("s", 2, 5));
  CHECK((q.transpose() * q - Eigen::MatrixXd::Identity(16, 16)).cwiseAbs().maxCoeff() < 1e-10);
  Eigen::VectorXd x = random_matrix(16, 1, 5).col(0);
  Eigen::VectorXd perp = x - u * (u.transpose() * x);
  CHECK((q * perp - perp).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((q * x).norm() == doctest::Approx(x.norm()).epsilon(1e-12));

  Activation<double> h{random_matrix(8, 16, 9), Mask::Constant(8, true)};
  h.mask(7) = false;
  auto p = perturb(h, q);
  CHECK((p.mask == h.mask).all());
  auto back = perturb(p, q.transpose());
  CHECK((back.values - h.values).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((p.values.rowwise().norm() - h.values.rowwise().norm()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK_THROWS_AS((void)perturb(h, Eigen::MatrixXd::Identity(4, 4)), InputError);
}

TEST_CASE("sketch encode: zero, exact buckets and linearity") {
  SketchParams p(3, 8, 10, 1, 2, 3);
  CHECK(sketch_encode(Eigen::VectorXd::Zero(10), p).values.isZero(0));
  CHECK(sketch_decode(sketch_encode(Eigen::VectorXd::Zero(10), p), 10).isZero(0));

  const auto q = find_collision_free(1, 8, 3);
  Eigen::VectorXd h(3);
  h << 1.5, -2.0, 0.25;
  const auto sk = sketch_encode(h, q);
  for (std::size_t d = 0; d < 3; ++d)
    CHECK(sk.values(0, static_cast<Eigen::Index>(q.bucket(0, d))) == q.sign(0, d) * h(static_cast<Eigen::Index>(d)));
  CHECK(sk.values.cwiseAbs().sum() == doctest::Approx(h.cwiseAbs().sum()));

  const Eigen::VectorXd a = random_matrix(10, 1, 1).col(0), b = random_matrix(10, 1, 2).col(0);
  CHECK((sketch_encode(a, p).values + sketch_encode(b, p).values - sketch_encode(a + b, p).values)
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("sketch decode: collision-free exactness, even-Y median, parameter checks") {
  const auto p = find_collision_free(3, 64, 3);
  Eigen::VectorXd h(3);
  h << 0.3, -7.0, 2.5;
  CHECK((sketch_decode(sketch_encode(h, p), p) - h).cwiseAbs().maxCoeff() <= 1e-12);

  // Even Y: recompute per-coordinate estimates by hand and average the central pair.
  SketchParams e(4, 3, 6, 5, 1, 0);
  const Eigen::VectorXd x = random_matrix(6, 1, 4).col(0);
  const auto sk = sketch_encode(x, e);
  const auto dec = sketch_decode(sk, e);
  for (std::size_t d = 0; d < 6; ++d) {
    std::vector<double> est;
    for (std::size_t j = 0; j < 4; ++j)
      est.push_back(e.sign(j, d) * sk.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(e.bucket(j, d))));
    std::sort(est.begin(), est.end());
    CHECK(dec(static_cast<Eigen::Index>(d)) == doctest::Approx(0.5 * (est[1] + est[2])));
  }

  CHECK_THROWS_AS((void)sketch_decode(sk, 7), DecodeError);
  CHECK_THROWS_AS((void)sketch_decode(sk, SketchParams(4, 3, 6, 5, 1, 1)), DecodeError);
  CHECK_THROWS_AS((void)sketch_encode(Eigen::VectorXd::Zero(5), e), InputError);
  CHECK_THROWS_AS(SketchParams(0, 3, 6, 0, 0, 0), ConfigError);
}

TEST_CASE("sketch error shrinks as buckets grow") {
  const std::size_t d = 64;
  double prev = 1e300;
  for (std::size_t z : {8, 16, 32, 64, 128}) {
    double total = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const Eigen::VectorXd h = random_matrix(d, 1, 1000 + s).col(0);
      SketchParams p(3, z, d, 9, s, 0);
      total += (sketch_decode(sketch_encode(h, p), p) - h).norm() / h.norm();
    }
    CHECK(total / 100 < prev);
    prev = total / 100;
  }
}

TEST_CASE("compression ratio values") {
  CHECK(compression_ratio(768, 4, 91) == doctest::Approx(2.1099).epsilon(1e-4));
  CHECK(compression_ratio(16, 4, 4) == 1.0);
  CHECK(compression_ratio(768, 2, 32) == 12.0);
  CHECK(SketchParams(2, 4, 16, 0, 0, 0).ratio() == 2.0);
  CHECK_THROWS_AS((void)compression_ratio(0, 1, 1), InputError);
}

TEST_CASE("wire format round-trips at 8 and 4 bytes per value") {
  SketchParams p(3, 5, 12, 42, 7, 9);
  const auto sk = sketch_encode(random_matrix(12, 1, 8).col(0), p);
  for (int zeta : {8, 4}) {
    std::stringstream ss;
    write_sketch(ss, sk, zeta);
    CHECK(ss.str().size() == 40 + 15 * static_cast<std::size_t>(zeta));
    const auto back = read_sketch(ss, 42, zeta);
    CHECK(back.params == p);
    const double tol = zeta == 8 ? 0.0 : 1e-6;
    CHECK((back.values - sk.values).cwiseAbs().maxCoeff() <= tol * (1 + sk.values.cwiseAbs().maxCoeff()));
  }
  std::stringstream truncated("abc");
  CHECK_THROWS_AS((void)read_sketch(truncated, 42), DecodeError);
}

TEST_CASE("channel modes") {
  const std::size_t dim = 3;
  Activation<double> h{random_matrix(4, dim, 21), Mask::Constant(4, true)};
  const auto basis = make_perturbation_basis(random_matrix(6, dim, 22), 2, "salt", 1);
  SketchParams any(2, 2, dim, 0, 1, 0);

  auto direct = channel_forward(h, nullptr, any, ChannelMode::direct);
  CHECK(direct.values == h.values);

  // Smallest possible collision-free geometry: rho = 1 with Y = 1, Z = D.
  const auto exact = find_collision_free(1, dim, dim);
  CHECK(exact.ratio() == 1.0);
  auto ss = channel_forward(h, &basis, exact, ChannelMode::ssop_sketch);
  CHECK((ss.values - h.values * basis.q.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS((void)channel_forward(h, nullptr, exact, ChannelMode::ssop_sketch), ConfigError);

  // Sketch-only error is linear in the input scale.
  SketchParams lossy(1, 4, 16, 3, 1, 0);
  CHECK(lossy.ratio() == 4.0);
  Activation<double> big{random_matrix(2, 16, 30), Mask::Constant(2, true)};
  Activation<double> twice{2.0 * big.values, big.mask};
  const double e1 = (channel_forward(big, nullptr, lossy, ChannelMode::sketch_only).values - big.values).norm();
  const double e2 = (channel_forward(twice, nullptr, lossy, ChannelMode::sketch_only).values - twice.values).norm();
  CHECK(e1 > 1e-6);
  CHECK(e2 == doctest::Approx(2 * e1).epsilon(1e-12));

  // Gaussian noise is seeded with the requested variance.
  Activation<double> zeros{Eigen::MatrixXd::Zero(200, 50), Mask::Constant(200, true)};
  auto n1 = channel_forward(zeros, nullptr, any, ChannelMode::gaussian_noise, 5);
  auto n2 = channel_forward(zeros, nullptr, any, ChannelMode::gaussian_noise, 5);
  CHECK(n1.values == n2.values);
  CHECK(n1.values.squaredNorm() / 10000.0 == doctest::Approx(0.25).epsilon(0.05));
}
