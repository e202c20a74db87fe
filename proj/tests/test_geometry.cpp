#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "sftscope/geometry.hpp"

using namespace sftscope;

namespace {

Matrix line(int t, const Eigen::RowVectorXd& origin, const Eigen::RowVectorXd& dir) {
  Matrix h(t, origin.size());
  for (int k = 0; k < t; ++k) h.row(k) = origin + static_cast<double>(k) * dir;
  return h;
}

Matrix staircase(int t) {
  Matrix h = Matrix::Zero(t, 2);
  for (int k = 1; k < t; ++k) {
    h.row(k) = h.row(k - 1);
    h(k, (k - 1) % 2) += 1.0;
  }
  return h;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("curvature closed forms") {
  std::mt19937_64 rng(201);
  const Eigen::RowVectorXd origin = fixtures::gaussian(1, 16, rng);
  const Eigen::RowVectorXd dir = fixtures::gaussian(1, 16, rng);
  const TrajectoryStats straight = curvature(line(12, origin, dir));
  CHECK(std::abs(straight.curvature) < 1e-12);
  CHECK(straight.skipped_angles == 0);
  CHECK_FALSE(straight.degenerate);

  Matrix zigzag(7, 3);
  for (int k = 0; k < 7; ++k) zigzag.row(k) = (k % 2 == 0 ? 1.0 : -1.0) * Eigen::RowVector3d(1, 2, 3);
  CHECK(std::abs(curvature(zigzag).curvature - 1.0) < 1e-12);

  CHECK(std::abs(curvature(staircase(9)).curvature - 0.5) < 1e-12);
}

TEST_CASE("curvature matches the acos oracle on generic paths") {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix h = fixtures::gaussian(3 + trial, 8, rng);
    const TrajectoryStats s = curvature(h);
    CHECK(std::abs(s.curvature - oracle::curvature(h)) < 1e-12);
    CHECK(s.curvature >= 0.0);
    CHECK(s.curvature <= 1.0);
  }
}

TEST_CASE("curvature invariance") {
  std::mt19937_64 rng(203);
  const Matrix h = fixtures::gaussian(15, 12, rng);
  const double base = curvature(h).curvature;
  const Eigen::RowVectorXd c = fixtures::gaussian(1, 12, rng);
  const Eigen::MatrixXd q = fixtures::random_orthogonal(12, rng);
  const Matrix shifted = h.rowwise() + c;
  const Matrix rotated = h * q;
  const Matrix scaled = 7.5 * h;
  CHECK(std::abs(curvature(shifted).curvature - base) < 1e-9);
  CHECK(std::abs(curvature(rotated).curvature - base) < 1e-9);
  CHECK(std::abs(curvature(scaled).curvature - base) < 1e-9);
}

TEST_CASE("curvature degenerate steps") {
  SUBCASE("a repeated state skips both angles touching the zero step") {
    Matrix h = staircase(6);
    Matrix rep(7, 2);
    rep << h.topRows(3), h.row(2), h.bottomRows(3);
    const TrajectoryStats s = curvature(rep);
    CHECK(s.skipped_angles == 2);
    CHECK_FALSE(s.degenerate);
    CHECK(s.skipped_angles <= static_cast<int>(rep.rows()) - 2);
    CHECK(std::abs(s.curvature - 0.5) < 1e-12);
  }
  SUBCASE("all identical states") {
    const TrajectoryStats s = curvature(Matrix::Constant(5, 3, 2.0));
    CHECK(s.degenerate);
    CHECK(s.curvature == 0.0);
    CHECK(s.skipped_angles == 3);
  }
  SUBCASE("too few tokens") {
    CHECK_ERROR_CODE(curvature(Matrix::Ones(2, 3)), ErrorCode::TooFewTokens);
  }
}

TEST_CASE("dataset curvature averages in manifest order") {
  fixtures::TempDir dir("geometry");
  const auto src = fixtures::make_source(1, 5, 6, 204, 3, 8);
  fixtures::write_source(dir.path(), src);
  const ActivationRun run = ActivationRun::open(dir.path());
  double sum = 0.0;
  for (int i = 0; i < 5; ++i) sum += curvature(src.tokens[1][static_cast<std::size_t>(i)]).curvature;
  CHECK(dataset_curvature(run, 1) == sum / 5.0);
}

TEST_CASE("cka closed forms") {
  std::mt19937_64 rng(205);
  const Matrix hb = fixtures::gaussian(40, 16, rng);
  CHECK(std::abs(cka(hb, hb) - 1.0) < 1e-12);

  const Eigen::MatrixXd q = fixtures::random_orthogonal(16, rng);
  const Matrix rotated = 2.5 * (hb * q);
  CHECK(std::abs(cka(hb, rotated) - 1.0) < 1e-9);

  const Matrix a = fixtures::gaussian(64, 32, rng);
  const Matrix b = fixtures::gaussian(64, 32, rng);
  const double got = cka(a, b);
  CHECK(std::abs(got - oracle::cka(a, b)) < 1e-10);
  CHECK(got < 0.7);
}

TEST_CASE("cka agrees with the oracle on both computation sides") {
  std::mt19937_64 rng(206);
  for (auto [n, d] : {std::pair{10, 30}, std::pair{50, 6}, std::pair{20, 20}}) {
    const Matrix a = fixtures::gaussian(n, d, rng);
    const Matrix b = fixtures::gaussian(n, d + 3, rng) + Matrix::Constant(n, d + 3, 0.5);
    CHECK(std::abs(cka(a, b) - oracle::cka(a, b)) < 1e-10);
  }
}

TEST_CASE("cka symmetry and shift invariance") {
  std::mt19937_64 rng(207);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = fixtures::gaussian(30, 8, rng);
    const Matrix b = a + 0.5 * fixtures::gaussian(30, 8, rng);
    CHECK(std::abs(cka(a, b) - cka(b, a)) < 1e-12);
    const Eigen::RowVectorXd shift = 100.0 * fixtures::gaussian(1, 8, rng);
    const Matrix moved = b.rowwise() + shift;
    CHECK(std::abs(cka(a, moved) - cka(a, b)) < 1e-9);
    const double v = cka(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("cka errors") {
  std::mt19937_64 rng(208);
  const Matrix a = fixtures::gaussian(6, 3, rng);
  const Matrix flat = Matrix::Constant(6, 3, 4.0);
  CHECK_ERROR_CODE(cka(a, flat), ErrorCode::DegenerateGram);
  CHECK_ERROR_CODE(cka(flat, a), ErrorCode::DegenerateGram);
  CHECK_ERROR_CODE(cka(a, fixtures::gaussian(5, 3, rng)), ErrorCode::InvalidArgument);
}

TEST_CASE("cosine profile") {
  std::mt19937_64 rng(209);
  const Matrix h = fixtures::gaussian(20, 8, rng);
  CHECK(std::abs(cosine_profile(h, h) - 1.0) < 1e-12);
  const Matrix neg = -h;
  CHECK(std::abs(cosine_profile(h, neg) + 1.0) < 1e-12);

  Matrix orth(3, 2);
  Matrix orth_b(3, 2);
  orth << 1, 0, 0, 2, 3, 3;
  orth_b << 0, 5, -1, 0, 1, -1;
  CHECK(std::abs(cosine_profile(orth, orth_b)) < 1e-15);

  const Matrix other = fixtures::gaussian(20, 8, rng);
  Matrix scaled_a = h;
  Matrix scaled_b = other;
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  for (Eigen::Index i = 0; i < 20; ++i) {
    scaled_a.row(i) *= pos(rng);
    scaled_b.row(i) *= pos(rng);
  }
  CHECK(std::abs(cosine_profile(scaled_a, scaled_b) - cosine_profile(h, other)) < 1e-12);

  Matrix zero_row = h;
  zero_row.row(4).setZero();
  CHECK_ERROR_CODE(cosine_profile(h, zero_row), ErrorCode::ZeroVectorRow);
}

TEST_CASE("mean shift") {
  std::mt19937_64 rng(210);
  const Matrix h = fixtures::gaussian(25, 6, rng);
  CHECK(mean_shift(h, h) == 0.0);

  Eigen::RowVectorXd t = fixtures::gaussian(1, 6, rng);
  t *= 7.0 / t.norm();
  const Matrix moved = h.rowwise() + t;
  CHECK(std::abs(mean_shift(h, moved) - 7.0) < 1e-12);

  const Matrix other = fixtures::gaussian(25, 6, rng);
  CHECK(std::abs(mean_shift(h, other) - oracle::mean_shift(h, other)) < 1e-10);
}

TEST_CASE("mean shift is a metric on centroids") {
  std::mt19937_64 rng(211);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = fixtures::gaussian(12, 5, rng);
    const Matrix b = fixtures::gaussian(12, 5, rng, 2.0);
    const Matrix c = fixtures::gaussian(12, 5, rng, 0.5);
    CHECK(mean_shift(a, b) == mean_shift(b, a));
    CHECK(mean_shift(a, c) <= mean_shift(a, b) + mean_shift(b, c) + 1e-12);
  }
}

}  // TEST_SUITE
