#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Alternating least squares for the CP decomposition and the EM-style
// imputation loop built on it.

namespace tenmi {

struct AlsConfig {
  Index rank = 1;
  Index max_iter = 500;
  double rel_tol = 1e-8;
  std::optional<CPModel> init;  // warm start; random when absent
};

struct AlsResult {
  CPModel model;
  Index iterations = 0;
  bool converged = false;
  double sse = 0.0;  // squared Frobenius residual at exit
};

namespace detail {

inline double cp_sse(const Tensor& x, const CPModel& model) {
  return (x.values - cp_reconstruct(model).values).squaredNorm();
}

// Balance column scales evenly across modes; leaves the reconstruction
// unchanged and keeps factor magnitudes from drifting apart.
inline void rebalance(std::vector<Eigen::MatrixXd>& factors) {
  const Index r = factors[0].cols();
  const auto n = static_cast<double>(factors.size());
  for (Index c = 0; c < r; ++c) {
    double total = 1.0;
    bool dead = false;
    for (const auto& u : factors) {
      const double nrm = u.col(c).norm();
      if (nrm == 0.0) {
        dead = true;
        break;
      }
      total *= nrm;
    }
    if (dead) continue;
    const double target = std::pow(total, 1.0 / n);
    for (auto& u : factors) u.col(c) *= target / u.col(c).norm();
  }
}

}  // namespace detail

inline AlsResult als_fit(const Tensor& x, const AlsConfig& cfg, RngStream& rng) {
  const int order = x.order();
  if (cfg.rank < 1) throw std::invalid_argument("als_fit: rank must be >= 1");
  for (int n = 0; n < order; ++n) {
    if (cfg.rank > x.size() / x.dims[n])
      throw std::invalid_argument("als_fit: rank exceeds the mode-" + std::to_string(n + 1) +
                                  " design size");
  }

  std::vector<Eigen::MatrixXd> factors;
  if (cfg.init) {
    if (cfg.init->order() != order || cfg.init->rank() != cfg.rank ||
        cfg.init->dims() != x.dims)
      throw std::invalid_argument("als_fit: init shape mismatch");
    factors = cfg.init->factors;
  } else {
    factors.resize(order);
    for (int n = 0; n < order; ++n) {
      factors[n].resize(x.dims[n], cfg.rank);
      for (Index j = 0; j < cfg.rank; ++j)
        for (Index i = 0; i < x.dims[n]; ++i) factors[n](i, j) = rng.normal();
    }
  }

  std::vector<Eigen::MatrixXd> grams(order);
  for (int n = 0; n < order; ++n) grams[n] = factors[n].transpose() * factors[n];

  const double xnorm = std::max(x.values.norm(), 1e-300);
  AlsResult out;
  double prev_fit = -std::numeric_limits<double>::infinity();
  for (Index it = 1; it <= cfg.max_iter; ++it) {
    for (int n = 0; n < order; ++n) {
      Eigen::MatrixXd v = Eigen::MatrixXd::Ones(cfg.rank, cfg.rank);
      for (int k = 0; k < order; ++k)
        if (k != n) v = hadamard(v, grams[k]).eval();
      const Eigen::MatrixXd a = design_matrix(factors, n);
      factors[n] = matricize(x, n) * a * pseudo_inverse(v);
      grams[n] = factors[n].transpose() * factors[n];
    }
    detail::rebalance(factors);
    for (int n = 0; n < order; ++n) grams[n] = factors[n].transpose() * factors[n];

    out.sse = detail::cp_sse(x, CPModel(factors));
    out.iterations = it;
    const double fit = 1.0 - std::sqrt(out.sse) / xnorm;
    if (std::abs(fit - prev_fit) < cfg.rel_tol) {
      out.converged = true;
      break;
    }
    prev_fit = fit;
  }
  out.model = CPModel(factors);
  return out;
}

struct EmConfig {
  AlsConfig als;
  double tol = 1e-6;
  Index max_iter = 200;
};

struct EmResult {
  Tensor completed;  // original scale: observed entries pinned, imputations filled
  CPModel model;     // fitted on the centered scale
  double offset = 0.0;
  Index iterations = 0;
  bool converged = false;
};

// Center on the observed entries, initialize the missing ones at zero, then
// alternate ALS fits with overwriting the missing entries by the current
// reconstruction.  Convergence is measured on the imputed entries only.
inline EmResult em_impute(const MaskedTensor& t, const EmConfig& cfg, RngStream& rng) {
  const CenteredTensor centered = center_observed(t);
  EmResult out;
  out.offset = centered.offset;

  Tensor work = centered.data.data;
  for (Index m : t.missing) work.values[m] = 0.0;

  AlsConfig als = cfg.als;
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(t.n_missing());
  if (t.n_missing() == 0) {
    const AlsResult fit = als_fit(work, als, rng);
    out.model = fit.model;
    out.converged = fit.converged;
    out.iterations = 0;
    out.completed = t.data;
    return out;
  }

  for (Index it = 1; it <= cfg.max_iter; ++it) {
    const AlsResult fit = als_fit(work, als, rng);
    als.init = fit.model;  // warm start the next sweep
    const Tensor recon = cp_reconstruct(fit.model);
    Eigen::VectorXd cur(t.n_missing());
    for (Index j = 0; j < t.n_missing(); ++j) cur[j] = recon.values[t.missing[j]];
    for (Index j = 0; j < t.n_missing(); ++j) work.values[t.missing[j]] = cur[j];
    out.model = fit.model;
    out.iterations = it;
    const double denom = std::max(prev.norm(), 1e-12);
    if (it > 1 && (cur - prev).norm() / denom < cfg.tol) {
      out.converged = true;
      break;
    }
    prev = cur;
  }

  out.completed = t.data;
  for (Index j = 0; j < t.n_missing(); ++j)
    out.completed.values[t.missing[j]] = work.values[t.missing[j]] + out.offset;
  return out;
}

}  // namespace tenmi
