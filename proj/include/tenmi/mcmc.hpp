#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tenmi/tensor.hpp"

// Shared sampler configuration and the retained-draw container both Gibbs
// engines fill.  Two tracks are kept per missing entry:
//   structural — the low-rank value at the entry per retained sweep
//   predictive — the simulated imputation (low-rank + noise, or the
//                conditional draw for the correlated engine)
// Summaries pool retained draws across chains.

namespace tenmi {

enum class InitStrategy { em, random };

struct McmcConfig {
  Index iterations = 1000;
  Index burn_in = -1;  // negative: iterations / 2
  Index chains = 2;
  Index thin = 1;
  std::uint64_t seed = 0;
  InitStrategy init = InitStrategy::em;

  Index effective_burn_in() const { return burn_in < 0 ? iterations / 2 : burn_in; }

  void validate() const {
    const Index b = effective_burn_in();
    if (iterations < 1) throw std::invalid_argument("mcmc: iterations must be >= 1");
    if (b < 0 || b >= iterations)
      throw std::invalid_argument("mcmc: burn_in must satisfy 0 <= burn_in < iterations");
    if (chains < 1) throw std::invalid_argument("mcmc: chains must be >= 1");
    if (thin < 1) throw std::invalid_argument("mcmc: thin must be >= 1");
  }

  // sweeps r = 1..iterations are retained when r > burn_in and
  // (r - burn_in - 1) % thin == 0
  Index n_retained() const {
    const Index kept = iterations - effective_burn_in();
    return (kept + thin - 1) / thin;
  }
};

// Exact empirical type-1 (lower) quantile: k = ceil(n*p), 1-based order
// statistic.  The 1e-9 nudge keeps n*p from landing an ulp above an integer.
inline double quantile_type1(std::vector<double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
  if (!(p > 0.0) || !(p <= 1.0))
    throw std::invalid_argument("quantile: p must be in (0, 1]");
  const auto n = static_cast<double>(sorted.size());
  Index k = static_cast<Index>(std::ceil(n * p - 1e-9));
  k = std::max<Index>(1, std::min<Index>(k, sorted.size()));
  std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
  return sorted[k - 1];
}

struct EntrySummary {
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
};

inline EntrySummary summarize(const std::vector<double>& draws) {
  if (draws.empty()) throw std::invalid_argument("summarize: no draws");
  EntrySummary s;
  double sum = 0.0;
  for (double d : draws) sum += d;
  s.mean = sum / static_cast<double>(draws.size());
  double ss = 0.0;
  for (double d : draws) ss += (d - s.mean) * (d - s.mean);
  s.sd = draws.size() > 1 ? std::sqrt(ss / static_cast<double>(draws.size() - 1)) : 0.0;
  s.q025 = quantile_type1(draws, 0.025);
  s.q975 = quantile_type1(draws, 0.975);
  return s;
}

struct ImputationDraws {
  Dims dims;
  std::vector<Index> missing;  // sorted linear indices, column order of the draw matrices

  // one matrix per chain, n_retained x |missing|, original (uncentered) scale
  std::vector<Eigen::MatrixXd> structural;
  std::vector<Eigen::MatrixXd> predictive;

  // per chain, named scalar traces (error variance, log-determinants, ...)
  std::vector<std::map<std::string, Eigen::VectorXd>> scalar_traces;

  std::vector<EntrySummary> structural_summary;
  std::vector<EntrySummary> predictive_summary;

  Index n_chains() const { return static_cast<Index>(structural.size()); }
  Index n_missing() const { return static_cast<Index>(missing.size()); }

  Index entry_column(Index linear) const {
    const auto it = std::lower_bound(missing.begin(), missing.end(), linear);
    if (it == missing.end() || *it != linear)
      throw std::invalid_argument("entry_column: index is not a missing entry");
    return static_cast<Index>(it - missing.begin());
  }

  std::vector<double> pooled(const std::vector<Eigen::MatrixXd>& track, Index col) const {
    std::vector<double> out;
    for (const auto& m : track)
      for (Index r = 0; r < m.rows(); ++r) out.push_back(m(r, col));
    return out;
  }

  void compute_summaries() {
    structural_summary.resize(missing.size());
    predictive_summary.resize(missing.size());
    for (Index j = 0; j < n_missing(); ++j) {
      structural_summary[j] = summarize(pooled(structural, j));
      predictive_summary[j] = summarize(pooled(predictive, j));
    }
  }
};

}  // namespace tenmi
