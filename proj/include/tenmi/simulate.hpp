#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "tenmi/cp_fit.hpp"
#include "tenmi/gibbs_independent.hpp"
#include "tenmi/gibbs_separable.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/model_select.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Synthetic study designs, masking, and the two-track evaluation used to
// benchmark the imputation engines.
//
// Every generated dataset carries two truths and each engine output is scored
// against the one it targets:
//   structural track: low-rank draws against the noise-free signal;
//   predictive track: posterior-predictive draws against the realized data.
// Within a replicate the headline MSE is the median over masked entries of
// the squared error of the posterior mean (the mean is recorded alongside),
// and coverage is the percentage of masked entries whose equal-tailed 95%
// interval contains the target.  Across replicates the harness reports
// medians over the replicates whose chains agreed.

namespace tenmi {

enum class Missingness { entry, fiber };

struct SimDesign {
  int study = 1;          // 1: iid noise, 2: two dense mode covariances, 3: one
  Dims dims{10, 10, 10};
  Index rank = 3;
  double sigma = 1.0;     // study 1 noise scale
  Missingness missing = Missingness::entry;
  double prob = 0.2;
  int fiber_mode = 2;     // 0-based; fibers run along this mode
  std::uint64_t seed = 0;
};

struct SimData {
  Tensor signal;                        // noise-free low-rank part
  Tensor data;                          // signal + noise
  MaskedTensor masked;                  // data with the mask applied
  std::vector<Eigen::MatrixXd> true_cov;  // generating mode covariances
};

namespace detail {

inline CPModel sim_factors(const Dims& dims, Index rank, RngStream& rng) {
  CPModel model;
  for (Index d : dims) {
    Eigen::MatrixXd u(d, rank);
    for (Index j = 0; j < rank; ++j)
      for (Index i = 0; i < d; ++i) u(i, j) = rng.normal();
    model.factors.push_back(std::move(u));
  }
  return model;
}

inline Tensor sim_noise(const Dims& dims, RngStream& rng) {
  Tensor z(dims);
  for (Index i = 0; i < z.size(); ++i) z.values[i] = rng.normal();
  return z;
}

inline std::vector<Index> sim_mask(const SimDesign& d, RngStream& rng) {
  std::vector<Index> missing;
  if (d.missing == Missingness::entry) {
    const Index n = num_elements(d.dims);
    for (Index i = 0; i < n; ++i)
      if (rng.uniform() < d.prob) missing.push_back(i);
    return missing;
  }
  const int order = static_cast<int>(d.dims.size());
  if (d.fiber_mode < 0 || d.fiber_mode >= order)
    throw std::invalid_argument("simulate: fiber mode out of range");
  Dims other = d.dims;
  other.erase(other.begin() + d.fiber_mode);
  const Index n_fibers = num_elements(other);
  std::vector<Index> oidx(other.size());
  Dims full(order);
  for (Index f = 0; f < n_fibers; ++f) {
    if (!(rng.uniform() < d.prob)) continue;
    from_linear(other, f, oidx);
    for (int k = 0, o = 0; k < order; ++k)
      if (k != d.fiber_mode) full[k] = oidx[o++];
    for (Index i = 0; i < d.dims[d.fiber_mode]; ++i) {
      full[d.fiber_mode] = i;
      missing.push_back(to_linear(d.dims, full));
    }
  }
  return missing;
}

// Symmetric mixing matrix with 0.9 on the diagonal and +-0.3 off it; the
// mode covariance it induces is M M^T = M^2.
inline Eigen::MatrixXd sim_sign_mixer(Index n, RngStream& rng) {
  Eigen::MatrixXd m = 0.9 * Eigen::MatrixXd::Identity(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const double v = rng.uniform() < 0.5 ? -0.3 : 0.3;
      m(i, j) = v;
      m(j, i) = v;
    }
  return m;
}

}  // namespace detail

// Low-rank signal plus iid N(0, sigma^2) noise.
inline SimData gen_study1(const SimDesign& d) {
  RngStream root(d.seed, 0x73696d31ull);
  RngStream frng = root.substream(1), nrng = root.substream(2), mrng = root.substream(3);
  SimData out;
  out.signal = cp_reconstruct(detail::sim_factors(d.dims, d.rank, frng));
  Tensor noise = detail::sim_noise(d.dims, nrng);
  out.data = out.signal;
  out.data.values += d.sigma * noise.values;
  out.masked = MaskedTensor(out.data, detail::sim_mask(d, mrng));
  for (std::size_t k = 0; k < d.dims.size(); ++k) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(d.dims[k], d.dims[k]);
    if (k == 0) s *= d.sigma * d.sigma;
    out.true_cov.push_back(std::move(s));
  }
  return out;
}

// Separable noise with dense covariance on modes 2 and 3 (M^2 with random
// off-diagonal signs) and 0.5 I on mode 1.  Requires order 3.
inline SimData gen_study2(const SimDesign& d) {
  if (d.dims.size() != 3) throw std::invalid_argument("gen_study2: order-3 design required");
  RngStream root(d.seed, 0x73696d32ull);
  RngStream frng = root.substream(1), nrng = root.substream(2), mrng = root.substream(3),
            crng = root.substream(4);
  SimData out;
  out.signal = cp_reconstruct(detail::sim_factors(d.dims, d.rank, frng));
  const Eigen::MatrixXd m2 = detail::sim_sign_mixer(d.dims[1], crng);
  const Eigen::MatrixXd m3 = detail::sim_sign_mixer(d.dims[2], crng);
  Tensor noise = detail::sim_noise(d.dims, nrng);
  noise.values *= std::sqrt(0.5);
  noise = ttm(noise, m2, 1);
  noise = ttm(noise, m3, 2);
  out.data = out.signal;
  out.data.values += noise.values;
  out.masked = MaskedTensor(out.data, detail::sim_mask(d, mrng));
  out.true_cov.push_back(0.5 * Eigen::MatrixXd::Identity(d.dims[0], d.dims[0]));
  out.true_cov.push_back(m2 * m2);
  out.true_cov.push_back(m3 * m3);
  return out;
}

// Separable noise with a compound-symmetric covariance (unit diagonal,
// off-diagonal 0.15) on mode 2 and identity elsewhere.  Requires order 3.
inline SimData gen_study3(const SimDesign& d) {
  if (d.dims.size() != 3) throw std::invalid_argument("gen_study3: order-3 design required");
  RngStream root(d.seed, 0x73696d33ull);
  RngStream frng = root.substream(1), nrng = root.substream(2), mrng = root.substream(3);
  SimData out;
  out.signal = cp_reconstruct(detail::sim_factors(d.dims, d.rank, frng));
  Eigen::MatrixXd s2 =
      Eigen::MatrixXd::Constant(d.dims[1], d.dims[1], 0.15);
  s2.diagonal().setConstant(1.0);
  Tensor noise = detail::sim_noise(d.dims, nrng);
  noise = ttm(noise, cholesky_jittered(s2, 0.0, 0.0).L, 1);
  out.data = out.signal;
  out.data.values += noise.values;
  out.masked = MaskedTensor(out.data, detail::sim_mask(d, mrng));
  out.true_cov.push_back(Eigen::MatrixXd::Identity(d.dims[0], d.dims[0]));
  out.true_cov.push_back(std::move(s2));
  out.true_cov.push_back(Eigen::MatrixXd::Identity(d.dims[2], d.dims[2]));
  return out;
}

inline SimData gen_study(const SimDesign& d) {
  switch (d.study) {
    case 1: return gen_study1(d);
    case 2: return gen_study2(d);
    case 3: return gen_study3(d);
    default: throw std::invalid_argument("gen_study: study must be 1, 2, or 3");
  }
}

// Random linear functionals of a fiber: column b of beta contracts a fiber
// along `mode` to the scalar sum_i beta(i, b) * x_i.
struct FiberFunctional {
  int mode = 2;
  Eigen::MatrixXd beta;  // dims[mode] x count
};

inline FiberFunctional make_fiber_functional(int mode, Index dim, Index count = 100,
                                             std::uint64_t seed = 0) {
  FiberFunctional f;
  f.mode = mode;
  f.beta.resize(dim, count);
  RngStream rng(seed, 0x66756e63ull);
  for (Index b = 0; b < count; ++b)
    for (Index i = 0; i < dim; ++i) f.beta(i, b) = rng.normal();
  return f;
}

struct RunMetrics {
  // *_mse is the median over masked entries of the squared error of the
  // posterior mean; *_mse_mean averages the same squared errors.
  double structural_mse = std::numeric_limits<double>::quiet_NaN();
  double structural_mse_mean = std::numeric_limits<double>::quiet_NaN();
  double structural_coverage = std::numeric_limits<double>::quiet_NaN();  // percent
  double predictive_mse = std::numeric_limits<double>::quiet_NaN();
  double predictive_mse_mean = std::numeric_limits<double>::quiet_NaN();
  double predictive_coverage = std::numeric_limits<double>::quiet_NaN();  // percent
  double fiber_mse = std::numeric_limits<double>::quiet_NaN();  // mean over functionals
  double fiber_coverage = std::numeric_limits<double>::quiet_NaN();  // percent
  bool has_fiber = false;
};

namespace detail {

struct TrackScore {
  double mse_median = 0.0;
  double mse_mean = 0.0;
  double coverage = 0.0;
};

inline TrackScore score_track(const std::vector<EntrySummary>& summary,
                              const std::vector<Index>& missing,
                              const Eigen::VectorXd& target) {
  TrackScore s;
  if (missing.empty()) {
    s.mse_median = s.mse_mean = s.coverage = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  Index covered = 0;
  std::vector<double> sq(missing.size());
  for (std::size_t j = 0; j < missing.size(); ++j) {
    const double truth = target[missing[j]];
    const double d = summary[j].mean - truth;
    sq[j] = d * d;
    s.mse_mean += sq[j];
    if (summary[j].q025 <= truth && truth <= summary[j].q975) ++covered;
  }
  const double n = static_cast<double>(missing.size());
  s.mse_median = quantile_type1(sq, 0.5);
  s.mse_mean /= n;
  s.coverage = 100.0 * static_cast<double>(covered) / n;
  return s;
}

}  // namespace detail

// Scores one engine run against both truths.  When a functional is supplied,
// every fiber along functional->mode that contains at least one masked entry
// contributes `count` linear summaries, each scored against the realized
// data with pooled posterior-predictive draws (observed entries enter all
// draws as constants, so only the masked part of the fiber varies).
inline RunMetrics evaluate_run(const SimData& truth, const ImputationDraws& draws,
                               const FiberFunctional* functional = nullptr) {
  if (draws.n_missing() != static_cast<Index>(truth.masked.missing.size()))
    throw std::invalid_argument("evaluate_run: draws do not match the mask");
  RunMetrics m;
  const auto structural =
      detail::score_track(draws.structural_summary, truth.masked.missing,
                          truth.signal.values);
  const auto predictive =
      detail::score_track(draws.predictive_summary, truth.masked.missing,
                          truth.data.values);
  m.structural_mse = structural.mse_median;
  m.structural_mse_mean = structural.mse_mean;
  m.structural_coverage = structural.coverage;
  m.predictive_mse = predictive.mse_median;
  m.predictive_mse_mean = predictive.mse_mean;
  m.predictive_coverage = predictive.coverage;
  if (functional == nullptr) return m;

  const Dims& dims = truth.masked.dims();
  const int mode = functional->mode;
  const Index fiber_len = dims[mode];
  if (functional->beta.rows() != fiber_len)
    throw std::invalid_argument("evaluate_run: functional length mismatch");
  const Index n_b = functional->beta.cols();

  Index n_pooled = 0;
  for (Index c = 0; c < draws.n_chains(); ++c) n_pooled += draws.predictive[c].rows();
  Eigen::MatrixXd pooled(n_pooled, draws.n_missing());
  Index at = 0;
  for (Index c = 0; c < draws.n_chains(); ++c) {
    pooled.middleRows(at, draws.predictive[c].rows()) = draws.predictive[c];
    at += draws.predictive[c].rows();
  }

  Dims other = dims;
  other.erase(other.begin() + mode);
  const Index n_fibers = num_elements(other);
  std::vector<Index> oidx(other.size());
  Dims full(dims.size());

  double err = 0.0;
  Index covered = 0, scored = 0;
  std::vector<double> col(n_pooled);
  for (Index f = 0; f < n_fibers; ++f) {
    from_linear(other, f, oidx);
    for (std::size_t k = 0, o = 0; k < dims.size(); ++k)
      if (static_cast<int>(k) != mode) full[k] = oidx[o++];
    std::vector<Index> miss_rows, miss_cols;
    Eigen::VectorXd truth_vals(n_b);
    truth_vals.setZero();
    Eigen::VectorXd obs_base = Eigen::VectorXd::Zero(n_b);
    for (Index i = 0; i < fiber_len; ++i) {
      full[mode] = i;
      const Index lin = to_linear(dims, full);
      truth_vals += functional->beta.row(i).transpose() * truth.data.values[lin];
      if (truth.masked.is_missing(lin)) {
        miss_rows.push_back(i);
        miss_cols.push_back(draws.entry_column(lin));
      } else {
        obs_base += functional->beta.row(i).transpose() * truth.data.values[lin];
      }
    }
    if (miss_rows.empty()) continue;

    Eigen::MatrixXd d(n_pooled, static_cast<Index>(miss_cols.size()));
    Eigen::MatrixXd w(static_cast<Index>(miss_rows.size()), n_b);
    for (std::size_t j = 0; j < miss_cols.size(); ++j) {
      d.col(static_cast<Index>(j)) = pooled.col(miss_cols[j]);
      w.row(static_cast<Index>(j)) = functional->beta.row(miss_rows[j]);
    }
    Eigen::MatrixXd vals = d * w;  // n_pooled x n_b
    vals.rowwise() += obs_base.transpose();
    for (Index b = 0; b < n_b; ++b) {
      const double mean = vals.col(b).mean();
      const double delta = mean - truth_vals[b];
      err += delta * delta;
      Eigen::VectorXd::Map(col.data(), n_pooled) = vals.col(b);
      const double lo = quantile_type1(col, 0.025);
      const double hi = quantile_type1(col, 0.975);
      if (lo <= truth_vals[b] && truth_vals[b] <= hi) ++covered;
      ++scored;
    }
  }
  if (scored > 0) {
    m.has_fiber = true;
    m.fiber_mse = err / static_cast<double>(scored);
    m.fiber_coverage = 100.0 * static_cast<double>(covered) / static_cast<double>(scored);
  }
  return m;
}

struct StudyConfig {
  SimDesign design;
  Engine engine = Engine::independent;
  Index rank = 3;
  McmcConfig mcmc;
  std::vector<ModePolicy> policy;  // correlated engine only
  Index dense_cap = 4096;
  int replicates = 20;
  double srf_threshold = 1.1;
  bool fiber_metrics = false;
  int functional_mode = 1;  // 0-based; fibers the functionals contract
  Index functional_count = 100;
  EmConfig em;  // em engine only
};

struct ReplicateResult {
  RunMetrics metrics;
  bool converged = true;
  double max_srf = 0.0;
  bool failed = false;
  std::string error;
};

// Runs `replicates` independent datasets through the configured engine.
// Replicate r derives both its data seed and its sampler seed from the base
// seeds, so a study is reproducible end to end from the config alone.
inline std::vector<ReplicateResult> run_study(const StudyConfig& cfg) {
  std::vector<ReplicateResult> out;
  out.reserve(cfg.replicates);
  for (int r = 0; r < cfg.replicates; ++r) {
    ReplicateResult res;
    try {
      SimDesign d = cfg.design;
      d.seed = detail::splitmix64(cfg.design.seed ^
                                  detail::splitmix64(static_cast<std::uint64_t>(r) + 1));
      const SimData sim = gen_study(d);
      FiberFunctional functional;
      const FiberFunctional* fptr = nullptr;
      if (cfg.fiber_metrics) {
        functional = make_fiber_functional(cfg.functional_mode, d.dims[cfg.functional_mode],
                                           cfg.functional_count, d.seed);
        fptr = &functional;
      }
      McmcConfig mc = cfg.mcmc;
      mc.seed = detail::splitmix64(cfg.mcmc.seed +
                                   0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(r) + 1));
      if (cfg.engine == Engine::em) {
        EmConfig ec = cfg.em;
        ec.als.rank = cfg.rank;
        RngStream rng(mc.seed, 0);
        const EmResult em = em_impute(sim.masked, ec, rng);
        const std::size_t nm = sim.masked.missing.size();
        std::vector<double> sq_sig(nm), sq_dat(nm);
        double sse_sig = 0.0, sse_dat = 0.0;
        for (std::size_t j = 0; j < nm; ++j) {
          const Index e = sim.masked.missing[j];
          const double v = em.completed.values[e];
          sq_sig[j] = (v - sim.signal.values[e]) * (v - sim.signal.values[e]);
          sq_dat[j] = (v - sim.data.values[e]) * (v - sim.data.values[e]);
          sse_sig += sq_sig[j];
          sse_dat += sq_dat[j];
        }
        const double n = static_cast<double>(nm);
        res.metrics.structural_mse = quantile_type1(sq_sig, 0.5);
        res.metrics.structural_mse_mean = sse_sig / n;
        res.metrics.predictive_mse = quantile_type1(sq_dat, 0.5);
        res.metrics.predictive_mse_mean = sse_dat / n;
        res.converged = em.converged;
      } else {
        ImputationDraws draws;
        if (cfg.engine == Engine::independent) {
          draws = run_indep(sim.masked, cfg.rank, mc).draws;
        } else {
          draws = run_sep(sim.masked, cfg.rank, cfg.policy, mc, 1, cfg.dense_cap).draws;
        }
        res.metrics = evaluate_run(sim, draws, fptr);
        if (draws.n_chains() >= 2) {
          const ConvergenceReport rep = convergence_report(draws, cfg.srf_threshold);
          res.converged = rep.converged;
          res.max_srf = rep.max_srf;
        }
      }
    } catch (const std::exception& e) {
      res.failed = true;
      res.error = e.what();
    }
    out.push_back(std::move(res));
  }
  return out;
}

struct StudySummary {
  double value = std::numeric_limits<double>::quiet_NaN();
  int n_used = 0;
  int n_converged = 0;
  int n_failed = 0;
};

// Median of one metric over converged replicates; falls back to every
// successful replicate when none converged so a study never reports NaN
// silently (n_converged exposes the fallback).
template <typename Selector>
inline StudySummary study_median(const std::vector<ReplicateResult>& reps, Selector select) {
  StudySummary s;
  std::vector<double> conv, all;
  for (const auto& r : reps) {
    if (r.failed) {
      ++s.n_failed;
      continue;
    }
    const double v = select(r.metrics);
    if (std::isnan(v)) continue;
    all.push_back(v);
    if (r.converged) {
      conv.push_back(v);
      ++s.n_converged;
    }
  }
  std::vector<double>& use = conv.empty() ? all : conv;
  s.n_used = static_cast<int>(use.size());
  if (!use.empty()) s.value = quantile_type1(use, 0.5);
  return s;
}

}  // namespace tenmi
