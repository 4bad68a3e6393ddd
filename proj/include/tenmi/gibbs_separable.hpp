#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "tenmi/cp_fit.hpp"
#include "tenmi/gibbs_independent.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Gibbs sampler for CP imputation under separable (Kronecker) noise: the
// error tensor has per-mode covariances Sigma_1..Sigma_N, so the vectorized
// noise covariance is Sigma_N (x) ... (x) Sigma_1 under mode-1-fastest
// layout.  Each mode is either pinned to the identity or given an
// inverse-Wishart prior IW(I, I_n + 2) and sampled.
//
// Per mode n the data and design are whitened by Sigma_{-n}^{-1/2}, applied
// factor-by-factor and via mode-k products — the Kronecker product is never
// materialized:
//   Aw = khatri_rao chain of Sigma_k^{-1/2} U^k   (k != n, largest first)
//   Xw = matricize(X ×_k Sigma_k^{-1/2}, n)
//   Uhat = Xw Aw (Aw^T Aw)^{-1}
//   Sigma_n | rest ~ IW(I + R R^T, I_n + 2 + I_{-n}),  R = Xw - Uhat Aw^T
//   U^n | Sigma_n  ~ MatrixNormal(Uhat, Sigma_n, (Aw^T Aw)^{-1})
// Missing entries are then drawn jointly from their conditional normal given
// the observed entries, decomposed into independent blocks across
// identity-mode slices.
//
// The sampled mode covariances carry the overall noise scale.  When every
// mode is pinned to identity nothing else can, so a global sigma2 with the
// usual conjugate inverse-gamma update takes over and the sampler coincides
// with the independent-noise one.

namespace tenmi {

enum class ModePolicy { identity, wishart };

struct SeparableCovariance {
  Dims dims;
  std::vector<ModePolicy> policy;
  std::vector<Eigen::MatrixXd> sigma;  // dense for wishart modes, empty for identity

  SeparableCovariance() = default;

  SeparableCovariance(Dims d, std::vector<ModePolicy> p)
      : dims(std::move(d)), policy(std::move(p)) {
    if (policy.size() != dims.size())
      throw std::invalid_argument("separable covariance: policy count mismatch");
    sigma.resize(dims.size());
    inv_sqrt_.resize(dims.size());
    inv_sqrt_ok_.assign(dims.size(), 0);
    for (std::size_t n = 0; n < dims.size(); ++n)
      if (policy[n] == ModePolicy::wishart)
        sigma[n] = Eigen::MatrixXd::Identity(dims[n], dims[n]);
  }

  int order() const { return static_cast<int>(dims.size()); }
  bool is_identity(int n) const { return policy[n] == ModePolicy::identity; }
  bool all_identity() const {
    for (ModePolicy p : policy)
      if (p != ModePolicy::identity) return false;
    return true;
  }

  double entry(int n, Index i, Index j) const {
    if (is_identity(n)) return i == j ? 1.0 : 0.0;
    return sigma[n](i, j);
  }

  void set_mode(int n, Eigen::MatrixXd s) {
    if (is_identity(n))
      throw std::invalid_argument("separable covariance: mode is pinned to identity");
    if (s.rows() != dims[n] || s.cols() != dims[n])
      throw std::invalid_argument("separable covariance: shape mismatch");
    sigma[n] = std::move(s);
    inv_sqrt_ok_[n] = 0;
  }

  const Eigen::MatrixXd& inv_sqrt(int n) const {
    if (!inv_sqrt_ok_[n]) {
      inv_sqrt_[n] = is_identity(n) ? Eigen::MatrixXd::Identity(dims[n], dims[n])
                                    : sym_inverse_sqrt(sigma[n]);
      inv_sqrt_ok_[n] = 1;
    }
    return inv_sqrt_[n];
  }

  double logdet(int n) const {
    if (is_identity(n)) return 0.0;
    const CholeskyFactor c = cholesky_jittered(sigma[n]);
    double ld = 0.0;
    for (Index i = 0; i < c.L.rows(); ++i) ld += std::log(c.L(i, i));
    return 2.0 * ld;
  }

 private:
  mutable std::vector<Eigen::MatrixXd> inv_sqrt_;
  mutable std::vector<char> inv_sqrt_ok_;
};

struct SepChainState {
  std::vector<Eigen::MatrixXd> factors;
  SeparableCovariance cov;
  Tensor completed;  // centered scale
  Tensor lowrank;
  // Global noise scale.  Sampled only when every mode is pinned to identity;
  // any sampled mode covariance carries the scale itself, so this stays 1.
  double sigma2 = 1.0;
  RngStream rng;
  Index iteration = 0;
  bool singular_flagged = false;

  SepChainState(RngStream r) : rng(r) {}
};

struct WhitenedMode {
  Eigen::MatrixXd atilde;  // I_{-n} x R, whitened design
  Eigen::MatrixXd xtilde;  // I_n x I_{-n}, whitened matricization
};

inline WhitenedMode whiten_mode(const std::vector<Eigen::MatrixXd>& factors,
                                const Tensor& completed, const SeparableCovariance& cov,
                                int n) {
  const int order = static_cast<int>(factors.size());
  std::vector<Eigen::MatrixXd> wf(factors.size());
  Tensor wx = completed;
  for (int k = 0; k < order; ++k) {
    if (k == n) {
      wf[k] = factors[k];
      continue;
    }
    if (cov.is_identity(k)) {
      wf[k] = factors[k];
    } else {
      wf[k] = cov.inv_sqrt(k) * factors[k];
      wx = ttm(wx, cov.inv_sqrt(k), k);
    }
  }
  return {design_matrix(wf, n), matricize(wx, n)};
}

inline WhitenedMode whiten_mode(const SepChainState& st, int n) {
  return whiten_mode(st.factors, st.completed, st.cov, n);
}

struct ModePrep {
  WhitenedMode w;
  Eigen::MatrixXd uhat;  // Xw Aw (Aw^T Aw)^{-1}
  Eigen::MatrixXd gram_half;  // chol L of Aw^T Aw, or pseudo half on fallback
  bool used_pseudo = false;
  bool jittered = false;
};

inline ModePrep prepare_mode(const SepChainState& st, int n) {
  ModePrep p;
  p.w = whiten_mode(st, n);
  const detail::GramSolve gs = detail::gram_solve(p.w.xtilde, p.w.atilde);
  p.uhat = gs.mean;
  p.gram_half = gs.half;
  p.used_pseudo = gs.used_pseudo;
  p.jittered = gs.jittered;
  return p;
}

// S_n = I + R R^T with R the whitened residual at the conditional-mean
// factor; exposed separately so the update can be checked directly.
inline Eigen::MatrixXd sigma_scale_matrix(const ModePrep& p) {
  const Eigen::MatrixXd r = p.w.xtilde - p.uhat * p.w.atilde.transpose();
  return Eigen::MatrixXd::Identity(r.rows(), r.rows()) + r * r.transpose();
}

inline void sample_sigma_mode(SepChainState& st, const ModePrep& p, int n) {
  if (st.cov.is_identity(n))
    throw std::invalid_argument("sample_sigma_mode: mode is pinned to identity");
  const Index in = st.completed.dims[n];
  const Index iminus = st.completed.size() / in;
  const double dof = static_cast<double>(in) + 2.0 + static_cast<double>(iminus);
  st.cov.set_mode(n, sample_inverse_wishart(sigma_scale_matrix(p), dof, st.rng));
}

inline void sample_sigma_mode(SepChainState& st, int n) {
  sample_sigma_mode(st, prepare_mode(st, n), n);
}

inline void sample_factor_mode(SepChainState& st, const ModePrep& p, int n) {
  if (p.used_pseudo || p.jittered) st.singular_flagged = true;
  Eigen::MatrixXd z(p.uhat.rows(), p.uhat.cols());
  for (Index j = 0; j < z.cols(); ++j)
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = st.rng.normal();
  Eigen::MatrixXd right;  // B^T with B B^T = (Aw^T Aw)^{-1}
  if (p.used_pseudo) {
    right = p.gram_half.transpose();
  } else {
    right = p.gram_half.transpose()
                .triangularView<Eigen::Upper>()
                .solve(Eigen::MatrixXd::Identity(p.gram_half.rows(), p.gram_half.rows()))
                .transpose();
    // right = L^{-1}; Z L^{-1} has row covariance (L L^T)^{-1}
  }
  Eigen::MatrixXd noise = std::sqrt(st.sigma2) * (z * right);
  if (!st.cov.is_identity(n)) {
    const CholeskyFactor lr = cholesky_jittered(st.cov.sigma[n]);
    noise = lr.L * noise;
  }
  st.factors[n] = p.uhat + noise;
}

inline void sample_factor_mode(SepChainState& st, int n) {
  sample_factor_mode(st, prepare_mode(st, n), n);
}

// Groups of entries that are conditionally independent given the parameters:
// the cross-product of identity-mode slices.  With no identity mode the whole
// tensor is one block, admitted only below dense_cap entries.
struct ConditionalPlan {
  struct Block {
    std::vector<Index> missing;   // global linear indices
    std::vector<Index> observed;
    std::vector<std::vector<Index>> miss_coords;  // per entry: dense-mode indices
    std::vector<std::vector<Index>> obs_coords;
  };
  std::vector<Block> blocks;
  std::vector<int> dense_modes;
  Index dense_cap = 4096;
};

inline ConditionalPlan build_conditional_plan(const MaskedTensor& t,
                                              const std::vector<ModePolicy>& policy,
                                              Index dense_cap = 4096) {
  const int order = t.data.order();
  if (static_cast<int>(policy.size()) != order)
    throw std::invalid_argument("conditional plan: policy count mismatch");
  ConditionalPlan plan;
  plan.dense_cap = dense_cap;
  std::vector<int> id_modes;
  for (int n = 0; n < order; ++n) {
    if (policy[n] == ModePolicy::identity)
      id_modes.push_back(n);
    else
      plan.dense_modes.push_back(n);
  }
  Index n_blocks = 1;
  for (int n : id_modes) n_blocks *= t.dims()[n];
  if (id_modes.empty() && t.size() > dense_cap)
    throw std::runtime_error(
        "conditional plan: no identity mode and tensor exceeds the dense cap of " +
        std::to_string(dense_cap) + " entries");
  plan.blocks.resize(n_blocks);

  std::vector<Index> idx(order);
  for (Index lin = 0; lin < t.size(); ++lin) {
    from_linear(t.dims(), lin, idx);
    Index key = 0, stride = 1;
    for (int n : id_modes) {
      key += idx[n] * stride;
      stride *= t.dims()[n];
    }
    std::vector<Index> dense(plan.dense_modes.size());
    for (std::size_t k = 0; k < plan.dense_modes.size(); ++k)
      dense[k] = idx[plan.dense_modes[k]];
    auto& b = plan.blocks[key];
    if (t.is_missing(lin)) {
      b.missing.push_back(lin);
      b.miss_coords.push_back(std::move(dense));
    } else {
      b.observed.push_back(lin);
      b.obs_coords.push_back(std::move(dense));
    }
  }
  return plan;
}

namespace detail {

inline Eigen::MatrixXd block_cov(const std::vector<std::vector<Index>>& rows,
                                 const std::vector<std::vector<Index>>& cols,
                                 const std::vector<int>& dense_modes,
                                 const SeparableCovariance& cov) {
  Eigen::MatrixXd out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      double v = 1.0;
      for (std::size_t k = 0; k < dense_modes.size(); ++k)
        v *= cov.sigma[static_cast<std::size_t>(dense_modes[k])](rows[i][k], cols[j][k]);
      out(i, j) = v;
    }
  }
  return out;
}

}  // namespace detail

struct BlockMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Conditional law of the block's missing entries given its observed entries,
// with the low-rank reconstruction as the unconditional mean.
inline BlockMoments conditional_moments(const Tensor& lowrank, const Tensor& completed,
                                        const ConditionalPlan::Block& block,
                                        const std::vector<int>& dense_modes,
                                        const SeparableCovariance& cov) {
  BlockMoments out;
  const auto nm = static_cast<Index>(block.missing.size());
  out.mean.resize(nm);
  for (Index i = 0; i < nm; ++i) out.mean[i] = lowrank.values[block.missing[i]];
  out.cov = detail::block_cov(block.miss_coords, block.miss_coords, dense_modes, cov);
  if (block.observed.empty()) return out;

  const auto no = static_cast<Index>(block.observed.size());
  Eigen::VectorXd resid(no);
  for (Index i = 0; i < no; ++i)
    resid[i] = completed.values[block.observed[i]] - lowrank.values[block.observed[i]];
  const Eigen::MatrixXd soo =
      detail::block_cov(block.obs_coords, block.obs_coords, dense_modes, cov);
  const Eigen::MatrixXd smo =
      detail::block_cov(block.miss_coords, block.obs_coords, dense_modes, cov);
  const CholeskyFactor c = cholesky_jittered(soo);
  const Eigen::MatrixXd y = c.L.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd(smo.transpose()));  // y = L^{-1} S_om
  Eigen::VectorXd w = c.L.triangularView<Eigen::Lower>().solve(resid);
  out.mean += y.transpose() * w;
  out.cov -= y.transpose() * y;
  return out;
}

inline void predictive_impute(SepChainState& st, const ConditionalPlan& plan) {
  // BlockMoments is the unit-scale kron law; the global scale enters here.
  const double sd = std::sqrt(st.sigma2);
  for (const auto& block : plan.blocks) {
    if (block.missing.empty()) continue;
    BlockMoments m =
        conditional_moments(st.lowrank, st.completed, block, plan.dense_modes, st.cov);
    const CholeskyFactor c = cholesky_jittered(m.cov);
    Eigen::VectorXd z(m.mean.size());
    for (Index i = 0; i < z.size(); ++i) z[i] = st.rng.normal();
    const Eigen::VectorXd draw = m.mean + sd * (c.L * z);
    for (Index i = 0; i < draw.size(); ++i) st.completed.values[block.missing[i]] = draw[i];
  }
}

inline SepChainState init_sep(const MaskedTensor& centered, Index rank,
                              const std::vector<ModePolicy>& policy, InitStrategy strategy,
                              RngStream rng) {
  SepChainState st(rng);
  st.cov = SeparableCovariance(centered.dims(), policy);
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
  return st;
}

inline void step_sep(SepChainState& st, const ConditionalPlan& plan) {
  const int order = st.completed.order();
  for (int n = 0; n < order; ++n) {
    const ModePrep prep = prepare_mode(st, n);
    if (!st.cov.is_identity(n)) sample_sigma_mode(st, prep, n);
    sample_factor_mode(st, prep, n);
  }
  st.lowrank = cp_reconstruct(CPModel(st.factors));
  if (st.cov.all_identity()) {
    const double ssr = (st.completed.values - st.lowrank.values).squaredNorm();
    const double rate = std::max(0.5 * ssr, std::numeric_limits<double>::min());
    st.sigma2 =
        sample_inverse_gamma(0.5 * static_cast<double>(st.completed.size()), rate, st.rng);
  }
  predictive_impute(st, plan);
  ++st.iteration;
}

struct SepRunResult {
  ImputationDraws draws;
  double offset = 0.0;
  Index rank = 0;
  bool singular_flagged = false;
  double wall_seconds = 0.0;
  std::vector<int> wishart_modes;
  // retained covariance draws and pooled posterior means, one slot per
  // wishart mode, in wishart_modes order
  std::vector<std::vector<std::vector<Eigen::MatrixXd>>> sigma_draws;  // [chain][w][ret]
  std::vector<Eigen::MatrixXd> sigma_mean;
};

inline SepRunResult run_sep(const MaskedTensor& t, Index rank,
                            const std::vector<ModePolicy>& policy, const McmcConfig& cfg,
                            int threads = 1, Index dense_cap = 4096) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const CenteredTensor centered = center_observed(t);
  const ConditionalPlan plan = build_conditional_plan(centered.data, policy, dense_cap);
  const Index burn = cfg.effective_burn_in();
  const Index n_ret = cfg.n_retained();
  const Index n_miss = t.n_missing();

  SepRunResult out;
  out.offset = centered.offset;
  out.rank = rank;
  for (std::size_t n = 0; n < policy.size(); ++n)
    if (policy[n] == ModePolicy::wishart) out.wishart_modes.push_back(static_cast<int>(n));
  out.draws.dims = t.dims();
  out.draws.missing = t.missing;
  out.draws.structural.assign(cfg.chains, Eigen::MatrixXd(n_ret, n_miss));
  out.draws.predictive.assign(cfg.chains, Eigen::MatrixXd(n_ret, n_miss));
  out.draws.scalar_traces.resize(cfg.chains);
  out.sigma_draws.assign(cfg.chains,
                         std::vector<std::vector<Eigen::MatrixXd>>(out.wishart_modes.size()));

  std::vector<char> flagged(cfg.chains, 0);
  auto run_chain = [&](Index c) {
    SepChainState st = init_sep(centered.data, rank, policy, cfg.init,
                                RngStream(cfg.seed, static_cast<std::uint64_t>(c)));
    std::vector<Eigen::VectorXd> logdet(out.wishart_modes.size(), Eigen::VectorXd(n_ret));
    Eigen::VectorXd sigma_trace(n_ret);
    Index kept = 0;
    for (Index r = 1; r <= cfg.iterations; ++r) {
      step_sep(st, plan);
      if (r > burn && (r - burn - 1) % cfg.thin == 0) {
        for (Index j = 0; j < n_miss; ++j) {
          const Index m = t.missing[j];
          out.draws.structural[c](kept, j) = st.lowrank.values[m] + centered.offset;
          out.draws.predictive[c](kept, j) = st.completed.values[m] + centered.offset;
        }
        for (std::size_t w = 0; w < out.wishart_modes.size(); ++w) {
          logdet[w][kept] = st.cov.logdet(out.wishart_modes[w]);
          out.sigma_draws[c][w].push_back(st.cov.sigma[out.wishart_modes[w]]);
        }
        sigma_trace[kept] = st.sigma2;
        ++kept;
      }
    }
    for (std::size_t w = 0; w < out.wishart_modes.size(); ++w)
      out.draws.scalar_traces[c]["logdet_mode" + std::to_string(out.wishart_modes[w] + 1)] =
          logdet[w];
    if (out.wishart_modes.empty()) out.draws.scalar_traces[c]["sigma2"] = sigma_trace;
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
  out.sigma_mean.resize(out.wishart_modes.size());
  for (std::size_t w = 0; w < out.wishart_modes.size(); ++w) {
    const int mode = out.wishart_modes[w];
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(t.dims()[mode], t.dims()[mode]);
    Index count = 0;
    for (Index c = 0; c < cfg.chains; ++c)
      for (const auto& s : out.sigma_draws[c][w]) {
        acc += s;
        ++count;
      }
    out.sigma_mean[w] = acc / static_cast<double>(std::max<Index>(count, 1));
  }
  out.draws.compute_summaries();
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace tenmi
