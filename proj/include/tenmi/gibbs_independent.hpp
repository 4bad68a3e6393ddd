#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>
#include <vector>

#include "tenmi/cp_fit.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Gibbs sampler for CP imputation under i.i.d. Gaussian noise with flat
// priors on the factors and p(sigma^2) ~ 1/sigma^2.  One sweep:
//   for each mode n:  rows of U^n ~ N(X_(n) A (A^T A)^{-1},  sigma^2 (A^T A)^{-1})
//                     with A the Khatri-Rao design over the other modes
//   sigma^2 | rest ~ InvGamma(prod(I)/2, ||X - Xhat||_F^2 / 2)   (completed X)
//   X_m ~ N(Xhat_m, sigma^2) for every missing entry m
// Data are centered on the observed mean before sampling; recorded draws are
// shifted back to the original scale.

namespace tenmi {

struct IndepChainState {
  std::vector<Eigen::MatrixXd> factors;
  double sigma2 = 1.0;
  Tensor completed;  // centered scale; observed entries fixed, missing imputed
  Tensor lowrank;    // reconstruction at the current factors
  RngStream rng;
  Index iteration = 0;
  bool singular_flagged = false;

  IndepChainState(RngStream r) : rng(r) {}
};

namespace detail {

// Row-conditional draw U = M + s Z L^{-1}; rows get covariance s^2 (L L^T)^{-1}.
inline Eigen::MatrixXd draw_rows(const Eigen::MatrixXd& mean, double s,
                                 const Eigen::MatrixXd& chol_gram, RngStream& rng) {
  Eigen::MatrixXd z(mean.rows(), mean.cols());
  for (Index j = 0; j < z.cols(); ++j)
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  Eigen::MatrixXd w = chol_gram.transpose()
                          .triangularView<Eigen::Upper>()
                          .solve(Eigen::MatrixXd(z.transpose()));
  return mean + s * w.transpose();
}

// Least-squares mean and a sampling factor for (A^T A)^{-1}; falls back to
// the pseudo-inverse route when the Gram is singular beyond the jitter cap.
struct GramSolve {
  Eigen::MatrixXd mean;       // X_(n) A (A^T A)^{-1}
  Eigen::MatrixXd half;       // B with B B^T = (A^T A)^{-1} (transposed draw side)
  bool used_pseudo = false;
  bool jittered = false;
};

inline GramSolve gram_solve(const Eigen::MatrixXd& xn, const Eigen::MatrixXd& a) {
  GramSolve out;
  const Eigen::MatrixXd gram = a.transpose() * a;
  const Eigen::MatrixXd xta = xn * a;
  try {
    // an all-zero design (constant data collapses to zero after centering)
    // must take the pseudo-inverse route; its jitter-free factor L = 0 is not
    // solvable
    if (gram.isZero(0.0)) throw std::runtime_error("gram_solve: zero design");
    const CholeskyFactor c = cholesky_jittered(gram);
    out.jittered = c.jitter > 0.0;
    Eigen::MatrixXd y = c.L.triangularView<Eigen::Lower>().solve(
        Eigen::MatrixXd(xta.transpose()));
    out.mean = c.L.transpose().triangularView<Eigen::Upper>().solve(y).transpose();
    out.half = c.L;  // caller draws via L^{-1}
    return out;
  } catch (const std::runtime_error&) {
    out.used_pseudo = true;
    const Eigen::MatrixXd ginv = pseudo_inverse(gram);
    out.mean = xta * ginv;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ginv);
    Eigen::VectorXd w = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    out.half = es.eigenvectors() * w.asDiagonal();
    return out;
  }
}

}  // namespace detail

inline IndepChainState init_indep(const MaskedTensor& centered, Index rank,
                                  InitStrategy strategy, RngStream rng) {
  IndepChainState st(rng);
  st.completed = centered.data;
  for (Index m : centered.missing) st.completed.values[m] = 0.0;

  const int order = centered.data.order();
  if (strategy == InitStrategy::em) {
    EmConfig ec;
    ec.als.rank = rank;
    ec.als.max_iter = 100;
    ec.als.rel_tol = 1e-6;
    ec.tol = 1e-4;
    ec.max_iter = 50;
    const EmResult em = em_impute(centered, ec, st.rng);
    st.factors = em.model.factors;
  } else {
    st.factors.resize(order);
    for (int n = 0; n < order; ++n) {
      st.factors[n].resize(centered.dims()[n], rank);
      for (Index j = 0; j < rank; ++j)
        for (Index i = 0; i < centered.dims()[n]; ++i) st.factors[n](i, j) = st.rng.normal();
    }
  }

  st.lowrank = cp_reconstruct(CPModel(st.factors));
  const double ssr = (st.completed.values - st.lowrank.values).squaredNorm();
  const double rate = std::max(0.5 * ssr, std::numeric_limits<double>::min());
  st.sigma2 = sample_inverse_gamma(0.5 * static_cast<double>(centered.size()), rate, st.rng);
  return st;
}

inline void step_indep(IndepChainState& st, const MaskedTensor& centered) {
  const int order = st.completed.order();
  const double s = std::sqrt(st.sigma2);
  for (int n = 0; n < order; ++n) {
    const Eigen::MatrixXd a = design_matrix(st.factors, n);
    const detail::GramSolve gs = detail::gram_solve(matricize(st.completed, n), a);
    if (gs.used_pseudo || gs.jittered) st.singular_flagged = true;
    if (gs.used_pseudo) {
      Eigen::MatrixXd z(gs.mean.rows(), gs.mean.cols());
      for (Index j = 0; j < z.cols(); ++j)
        for (Index i = 0; i < z.rows(); ++i) z(i, j) = st.rng.normal();
      st.factors[n] = gs.mean + s * z * gs.half.transpose();
    } else {
      st.factors[n] = detail::draw_rows(gs.mean, s, gs.half, st.rng);
    }
  }

  st.lowrank = cp_reconstruct(CPModel(st.factors));
  const double ssr = (st.completed.values - st.lowrank.values).squaredNorm();
  const double rate = std::max(0.5 * ssr, std::numeric_limits<double>::min());
  st.sigma2 =
      sample_inverse_gamma(0.5 * static_cast<double>(st.completed.size()), rate, st.rng);

  const double sd = std::sqrt(st.sigma2);
  for (Index m : centered.missing)
    st.completed.values[m] = st.lowrank.values[m] + sd * st.rng.normal();
  ++st.iteration;
}

struct IndepRunResult {
  ImputationDraws draws;
  double offset = 0.0;
  Index rank = 0;
  bool singular_flagged = false;
  double wall_seconds = 0.0;
};

inline IndepRunResult run_indep(const MaskedTensor& t, Index rank, const McmcConfig& cfg,
                                int threads = 1) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const CenteredTensor centered = center_observed(t);
  const Index burn = cfg.effective_burn_in();
  const Index n_ret = cfg.n_retained();
  const Index n_miss = t.n_missing();

  IndepRunResult out;
  out.offset = centered.offset;
  out.rank = rank;
  out.draws.dims = t.dims();
  out.draws.missing = t.missing;
  out.draws.structural.assign(cfg.chains, Eigen::MatrixXd(n_ret, n_miss));
  out.draws.predictive.assign(cfg.chains, Eigen::MatrixXd(n_ret, n_miss));
  out.draws.scalar_traces.resize(cfg.chains);

  std::vector<char> flagged(cfg.chains, 0);
  auto run_chain = [&](Index c) {
    IndepChainState st = init_indep(centered.data, rank,
                                    cfg.init, RngStream(cfg.seed, static_cast<std::uint64_t>(c)));
    Eigen::VectorXd sigma_trace(n_ret);
    Index kept = 0;
    for (Index r = 1; r <= cfg.iterations; ++r) {
      step_indep(st, centered.data);
      if (r > burn && (r - burn - 1) % cfg.thin == 0) {
        for (Index j = 0; j < n_miss; ++j) {
          const Index m = t.missing[j];
          out.draws.structural[c](kept, j) = st.lowrank.values[m] + centered.offset;
          out.draws.predictive[c](kept, j) = st.completed.values[m] + centered.offset;
        }
        sigma_trace[kept] = st.sigma2;
        ++kept;
      }
    }
    out.draws.scalar_traces[c]["sigma2"] = sigma_trace;
    flagged[c] = st.singular_flagged ? 1 : 0;
  };

  if (threads <= 1 || cfg.chains == 1) {
    for (Index c = 0; c < cfg.chains; ++c) run_chain(c);
  } else {
    std::vector<std::thread> pool;
    for (Index c = 0; c < cfg.chains; ++c) pool.emplace_back(run_chain, c);
    for (auto& th : pool) th.join();
  }

  for (char f : flagged) out.singular_flagged |= (f != 0);
  out.draws.compute_summaries();
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace tenmi
