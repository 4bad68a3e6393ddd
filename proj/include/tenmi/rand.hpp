#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

// Seeded random streams and the distribution samplers used by the Gibbs
// engines.  All randomness flows through RngStream; the engine (mt19937_64)
// is bit-exact by the standard and every transform here is written out, so a
// (seed, stream) pair reproduces byte-identical output on any toolchain.

namespace tenmi {

using Index = Eigen::Index;

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream) {
    const std::uint64_t s =
        detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(~stream));
    engine_.seed(s);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Independent child stream; tags chain, so substream(a).substream(b) and
  // substream(b).substream(a) differ.
  RngStream substream(std::uint64_t tag) const {
    return RngStream(seed_, detail::splitmix64(stream_ * 0x9e3779b97f4a7c15ull + tag + 1));
  }

  // uniform on (0, 1), never exactly 0 or 1
  double uniform() {
    for (;;) {
      const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
      if (u > 0.0) return u;
    }
  }

  // Marsaglia polar; caches the paired deviate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

  // Marsaglia-Tsang, unit rate; shape < 1 boosted through shape + 1.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double chi_squared(double dof) { return 2.0 * gamma(0.5 * dof); }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Lower-triangular factor L with L L^T = A + jitter*I.  Jitter escalates
// geometrically from base_rel*tr(A)/p to cap_rel*tr(A)/p; the exact-zero
// matrix is allowed (L = 0, degenerate draws collapse to the mean).
struct CholeskyFactor {
  Eigen::MatrixXd L;
  double jitter = 0.0;
};

inline CholeskyFactor cholesky_jittered(const Eigen::MatrixXd& a,
                                        double base_rel = 1e-10,
                                        double cap_rel = 1e-4) {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky: matrix not square");
  const Index p = a.rows();
  Eigen::MatrixXd s = 0.5 * (a + a.transpose());
  if (s.isZero(0.0)) return {Eigen::MatrixXd::Zero(p, p), 0.0};
  const double scale = s.trace() / static_cast<double>(p);
  if (!(scale > 0.0) || !s.allFinite())
    throw std::runtime_error("cholesky: matrix is not positive definite");
  const double base = base_rel * scale;
  const double cap = cap_rel * scale;
  double jitter = 0.0;
  for (;;) {
    Eigen::LLT<Eigen::MatrixXd> llt(jitter == 0.0
                                        ? s
                                        : (s + jitter * Eigen::MatrixXd::Identity(p, p)).eval());
    if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), jitter};
    const double next = jitter == 0.0 ? base : std::min(jitter * 10.0, cap);
    if (!(next > jitter))
      throw std::runtime_error("cholesky: not positive definite within jitter cap " +
                               std::to_string(cap_rel));
    jitter = next;
  }
}

// Moore-Penrose pseudo-inverse by SVD.  Negative rel_tol selects the
// machine-epsilon default eps * max(m, n); the cutoff is relative to the
// largest singular value.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& a, double rel_tol = -1.0) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double eps = std::numeric_limits<double>::epsilon();
  const double rel =
      rel_tol < 0.0 ? eps * static_cast<double>(std::max(a.rows(), a.cols())) : rel_tol;
  const double smax = svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
  const double cut = rel * smax;
  Eigen::VectorXd inv = svd.singularValues();
  for (Index i = 0; i < inv.size(); ++i) inv[i] = inv[i] > cut ? 1.0 / inv[i] : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

// Symmetric inverse square root via eigendecomposition; requires PD input.
inline Eigen::MatrixXd sym_inverse_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("sym_inverse_sqrt: eigendecomposition failed");
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double floor = std::numeric_limits<double>::epsilon() * ev.size() *
                       std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd w(ev.size());
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev[i] <= floor)
      throw std::runtime_error("sym_inverse_sqrt: matrix is not positive definite");
    w[i] = 1.0 / std::sqrt(ev[i]);
  }
  return es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::VectorXd sample_mvn(const Eigen::VectorXd& mean, const CholeskyFactor& cov,
                                  RngStream& rng) {
  if (cov.L.rows() != mean.size()) throw std::invalid_argument("sample_mvn: size mismatch");
  Eigen::VectorXd z(mean.size());
  for (Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return mean + cov.L * z;
}

// M + L_row Z L_col^T: vec of the draw has covariance col_cov (x) row_cov.
inline Eigen::MatrixXd sample_matrix_normal(const Eigen::MatrixXd& mean,
                                            const CholeskyFactor& row_cov,
                                            const CholeskyFactor& col_cov, RngStream& rng) {
  if (row_cov.L.rows() != mean.rows() || col_cov.L.rows() != mean.cols())
    throw std::invalid_argument("sample_matrix_normal: size mismatch");
  Eigen::MatrixXd z(mean.rows(), mean.cols());
  for (Index j = 0; j < z.cols(); ++j)
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  return mean + row_cov.L * z * col_cov.L.transpose();
}

// shape/rate parameterization: mean = rate / (shape - 1) for shape > 1.
inline double sample_inverse_gamma(double shape, double rate, RngStream& rng) {
  if (!(shape > 0.0) || !(rate > 0.0))
    throw std::invalid_argument("sample_inverse_gamma: shape and rate must be positive");
  return rate / rng.gamma(shape);
}

// Inverse-Wishart IW(S, nu) by Bartlett decomposition; requires nu > p - 1
// and S positive definite.  Mean is S / (nu - p - 1) when nu > p + 1.
inline Eigen::MatrixXd sample_inverse_wishart(const Eigen::MatrixXd& scale, double dof,
                                              RngStream& rng) {
  const Index p = scale.rows();
  if (scale.cols() != p) throw std::invalid_argument("sample_inverse_wishart: not square");
  if (!(dof > static_cast<double>(p) - 1.0))
    throw std::invalid_argument("sample_inverse_wishart: dof must exceed p - 1");
  const CholeskyFactor ls = cholesky_jittered(scale, 0.0, 0.0);  // no jitter: require PD
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  for (Index i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(rng.chi_squared(dof - static_cast<double>(i)));
    for (Index j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  // W = C A A^T C^T ~ Wishart(S^{-1}, nu) with C = L_S^{-T}; the inverse is
  // assembled as T^T T with T = A^{-1} L_S^T, symmetric PD by construction.
  Eigen::MatrixXd t = a.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd(ls.L.transpose()));
  return t.transpose() * t;
}

}  // namespace tenmi
