#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tenmi/rand.hpp"

using namespace tenmi;

namespace {

// Kolmogorov-Smirnov distance against the standard normal CDF.
double ks_vs_normal(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-x[i] / std::sqrt(2.0));
    const double lo = static_cast<double>(i) / n;
    const double hi = static_cast<double>(i + 1) / n;
    d = std::max(d, std::max(std::abs(cdf - lo), std::abs(hi - cdf)));
  }
  return d;
}

}  // namespace

TEST_CASE("streams replay exactly under the same key", "[rand]") {
  RngStream a(7, 3), b(7, 3);
  for (int i = 0; i < 200; ++i) REQUIRE(a.normal() == b.normal());
  RngStream c(7, 3), d(7, 3);
  for (int i = 0; i < 200; ++i) {
    REQUIRE(c.uniform() == d.uniform());
    REQUIRE(c.gamma(2.5) == d.gamma(2.5));
  }
  RngStream e = a.substream(5), f = b.substream(5);
  for (int i = 0; i < 50; ++i) REQUIRE(e.normal() == f.normal());
}

TEST_CASE("distinct stream ids decorrelate", "[rand]") {
  const int n = 100000;
  RngStream a(7, 0), b(7, 1);
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (int i = 0; i < n; ++i) {
    const double x = a.normal(), y = b.normal();
    sa += x;
    sb += y;
    saa += x * x;
    sbb += y * y;
    sab += x * y;
  }
  const double ma = sa / n, mb = sb / n;
  const double corr = (sab / n - ma * mb) /
                      std::sqrt((saa / n - ma * ma) * (sbb / n - mb * mb));
  REQUIRE(std::abs(corr) < 0.01);
}

TEST_CASE("uniform stays inside the open unit interval", "[rand]") {
  RngStream rng(1, 0);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("normal and gamma moments", "[rand]") {
  const int n = 100000;
  RngStream rng(2, 0);
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    ss += x * x;
  }
  REQUIRE(std::abs(s / n) < 0.02);
  REQUIRE(std::abs(ss / n - 1.0) < 0.03);

  for (double shape : {0.3, 0.5, 1.0, 2.5, 7.0}) {
    double g = 0, gg = 0;
    for (int i = 0; i < n; ++i) {
      const double x = rng.gamma(shape);
      REQUIRE(x > 0.0);
      g += x;
      gg += x * x;
    }
    const double mean = g / n;
    const double var = gg / n - mean * mean;
    REQUIRE(std::abs(mean - shape) < 0.05 * std::max(shape, 0.5));
    REQUIRE(std::abs(var - shape) < 0.12 * std::max(shape, 0.5));
  }

  double c = 0;
  for (int i = 0; i < n; ++i) c += rng.chi_squared(5.0);
  REQUIRE(std::abs(c / n - 5.0) < 0.1);
}

TEST_CASE("pseudo-inverse on diagonal, singular, and random input", "[rand]") {
  Eigen::MatrixXd d = Eigen::Vector2d(2.0, 4.0).asDiagonal();
  const Eigen::MatrixXd dp = pseudo_inverse(d);
  REQUIRE(std::abs(dp(0, 0) - 0.5) < 1e-14);
  REQUIRE(std::abs(dp(1, 1) - 0.25) < 1e-14);
  REQUIRE(std::abs(dp(0, 1)) < 1e-14);

  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(2, 2);
  const Eigen::MatrixXd op = pseudo_inverse(ones);
  REQUIRE((op - 0.25 * ones).cwiseAbs().maxCoeff() < 1e-12);

  RngStream rng(4, 0);
  Eigen::MatrixXd base(4, 2);
  for (Index j = 0; j < 2; ++j)
    for (Index i = 0; i < 4; ++i) base(i, j) = rng.normal();
  Eigen::MatrixXd mix(2, 3);
  for (Index j = 0; j < 3; ++j)
    for (Index i = 0; i < 2; ++i) mix(i, j) = rng.normal();
  const Eigen::MatrixXd a = base * mix;  // 4x3, rank 2
  const Eigen::MatrixXd ap = pseudo_inverse(a);
  REQUIRE((a * ap * a - a).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((ap * a * ap - ap).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(((a * ap) - (a * ap).transpose()).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(((ap * a) - (ap * a).transpose()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("symmetric inverse square root", "[rand]") {
  Eigen::MatrixXd a(2, 2);
  a << 4, 1, 1, 3;
  const Eigen::MatrixXd w = sym_inverse_sqrt(a);
  REQUIRE((w * a * w - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::MatrixXd indef(2, 2);
  indef << 1, 0, 0, -1;
  REQUIRE_THROWS_AS(sym_inverse_sqrt(indef), std::runtime_error);
}

TEST_CASE("jittered cholesky policy", "[rand]") {
  Eigen::MatrixXd a(2, 2);
  a << 4, 1, 1, 3;
  const CholeskyFactor c = cholesky_jittered(a);
  REQUIRE(c.jitter == 0.0);
  REQUIRE((c.L * c.L.transpose() - a).cwiseAbs().maxCoeff() < 1e-8);

  const CholeskyFactor z = cholesky_jittered(Eigen::MatrixXd::Zero(3, 3));
  REQUIRE(z.jitter == 0.0);
  REQUIRE(z.L.cwiseAbs().maxCoeff() == 0.0);

  Eigen::MatrixXd psd(2, 2);
  psd << 1, 1, 1, 1;  // rank deficient, needs jitter
  const CholeskyFactor j = cholesky_jittered(psd);
  REQUIRE(j.jitter > 0.0);
  REQUIRE(j.jitter <= 1e-4 * psd.trace() / 2.0 + 1e-18);
  REQUIRE((j.L * j.L.transpose() - psd).cwiseAbs().maxCoeff() < 1e-3);

  Eigen::MatrixXd indef(2, 2);
  indef << 1, 0, 0, -0.5;  // positive trace but indefinite: exhausts the cap
  REQUIRE_THROWS_WITH(cholesky_jittered(indef),
                      Catch::Matchers::ContainsSubstring("jitter cap"));
  Eigen::MatrixXd neg(2, 2);
  neg << -1, 0, 0, -1;
  REQUIRE_THROWS_AS(cholesky_jittered(neg), std::runtime_error);
}

TEST_CASE("multivariate normal sample covariance", "[rand]") {
  Eigen::MatrixXd cov(2, 2);
  cov << 1.0, 0.5, 0.5, 1.0;
  const CholeskyFactor c = cholesky_jittered(cov);
  Eigen::Vector2d mean(1.0, -2.0);
  RngStream rng(8, 0);
  const int n = 100000;
  Eigen::Vector2d s = Eigen::Vector2d::Zero();
  Eigen::Matrix2d sc = Eigen::Matrix2d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = sample_mvn(mean, c, rng);
    s += x;
    sc += x * x.transpose();
  }
  const Eigen::Vector2d m = s / n;
  const Eigen::Matrix2d emp = sc / n - m * m.transpose();
  REQUIRE((m - mean).cwiseAbs().maxCoeff() < 0.02);
  REQUIRE((emp - cov).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("matrix normal reduces to iid and carries the kronecker covariance", "[rand]") {
  RngStream rng(9, 0);
  const Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(2, 2);
  const CholeskyFactor id = cholesky_jittered(Eigen::MatrixXd::Identity(2, 2));

  std::vector<double> flat;
  for (int i = 0; i < 2500; ++i) {
    const Eigen::MatrixXd x = sample_matrix_normal(mean, id, id, rng);
    for (Index j = 0; j < 4; ++j) flat.push_back(x(j / 2, j % 2));
  }
  REQUIRE(ks_vs_normal(std::move(flat)) < 0.02);  // 10^4 iid N(0,1) values

  Eigen::MatrixXd u(2, 2), v(2, 2);
  u << 1.0, 0.3, 0.3, 2.0;
  v << 1.5, -0.4, -0.4, 1.0;
  const CholeskyFactor cu = cholesky_jittered(u), cv = cholesky_jittered(v);
  const int n = 40000;
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd x = sample_matrix_normal(mean, cu, cv, rng);
    Eigen::Vector4d vec;
    vec << x(0, 0), x(1, 0), x(0, 1), x(1, 1);  // column-major vec
    acc += vec * vec.transpose();
  }
  Eigen::Matrix4d want;
  want.block<2, 2>(0, 0) = v(0, 0) * u;
  want.block<2, 2>(0, 2) = v(0, 1) * u;
  want.block<2, 2>(2, 0) = v(1, 0) * u;
  want.block<2, 2>(2, 2) = v(1, 1) * u;  // V (x) U
  REQUIRE((acc / n - want).cwiseAbs().maxCoeff() < 0.06);
}

TEST_CASE("inverse gamma mean and reciprocal law", "[rand]") {
  RngStream rng(10, 0);
  const int n = 100000;
  double s = 0, rs = 0;
  std::vector<double> recip;
  recip.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double x = sample_inverse_gamma(3.0, 4.0, rng);
    REQUIRE(x > 0.0);
    s += x;
    rs += 1.0 / x;
    recip.push_back(1.0 / x);
  }
  REQUIRE(std::abs(s / n - 2.0) < 0.02 * 2.0);       // mean rate/(shape-1)
  REQUIRE(std::abs(rs / n - 3.0 / 4.0) < 0.02);      // reciprocal is Gamma(3, rate 4)
  REQUIRE_THROWS_AS(sample_inverse_gamma(0.0, 1.0, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_inverse_gamma(1.0, -1.0, rng), std::invalid_argument);
}

TEST_CASE("inverse wishart mean, support, and marginals", "[rand]") {
  RngStream rng(11, 0);
  const Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
  const int n = 100000;
  Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
  double acc11 = 0.0, acc11inv = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd x = sample_inverse_wishart(s, 7.0, rng);
    REQUIRE(std::abs(x(0, 1) - x(1, 0)) < 1e-12);
    acc += x;
    acc11 += x(0, 0);
    acc11inv += 1.0 / x(0, 0);
    if (i < 100) {
      Eigen::LLT<Eigen::MatrixXd> llt(x);
      REQUIRE(llt.info() == Eigen::Success);  // draws are PD
    }
  }
  const Eigen::Matrix2d mean = acc / n;
  REQUIRE((mean - s / 4.0).cwiseAbs().maxCoeff() < 0.03 * 0.25);

  // diagonal marginal with identity scale: X_11 ~ IG((nu-p+1)/2, 1/2) = IG(3, 1/2),
  // so E X_11 = 1/4 and 1/X_11 ~ Gamma(3, rate 1/2) with mean 6
  REQUIRE(std::abs(acc11 / n - 0.25) < 0.03 * 0.25);
  REQUIRE(std::abs(acc11inv / n - 6.0) < 0.02 * 6.0);

  // 1x1 inverse wishart is inverse gamma: IW(s, nu) = IG(nu/2, s/2)
  Eigen::MatrixXd s1(1, 1);
  s1 << 2.0;
  double one = 0.0;
  for (int i = 0; i < n; ++i) one += sample_inverse_wishart(s1, 5.0, rng)(0, 0);
  REQUIRE(std::abs(one / n - (2.0 / 2.0) / (5.0 / 2.0 - 1.0)) < 0.03);

  REQUIRE_THROWS_AS(sample_inverse_wishart(s, 0.5, rng), std::invalid_argument);
  Eigen::MatrixXd sing(2, 2);
  sing << 1, 1, 1, 1;
  REQUIRE_THROWS_AS(sample_inverse_wishart(sing, 7.0, rng), std::runtime_error);
}
