#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tenmi/cp_fit.hpp"
#include "tenmi/gibbs_independent.hpp"
#include "tenmi/gibbs_separable.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Chain-agreement diagnostic and K-fold cross-validated rank selection.

namespace tenmi {

// Scale-reduction factor across chains: m * pooled variance / sum of
// within-chain variances (all with n-1 divisors).  For two chains this is
//   [2 * sum (x - xbar)^2 / (n1 + n2 - 1)] /
//   [sum (x1 - xbar1)^2 / (n1 - 1) + sum (x2 - xbar2)^2 / (n2 - 1)]
// Zero within-chain variance is degenerate, not a number.
struct SrfResult {
  double value = 0.0;
  bool degenerate = false;
};

inline SrfResult srf(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("srf: need at least two chains");
  Index total = 0;
  for (const auto& c : chains) {
    if (c.size() < 2) throw std::invalid_argument("srf: chains need at least two draws");
    total += c.size();
  }
  double pooled_mean = 0.0;
  for (const auto& c : chains) pooled_mean += c.sum();
  pooled_mean /= static_cast<double>(total);

  double pooled_ss = 0.0;
  double within = 0.0;
  for (const auto& c : chains) {
    const double mean = c.mean();
    double ss = 0.0;
    for (Index i = 0; i < c.size(); ++i) {
      ss += (c[i] - mean) * (c[i] - mean);
      pooled_ss += (c[i] - pooled_mean) * (c[i] - pooled_mean);
    }
    within += ss / static_cast<double>(c.size() - 1);
  }
  SrfResult out;
  if (within == 0.0) {
    out.degenerate = true;
    return out;
  }
  const double pooled_var = pooled_ss / static_cast<double>(total - 1);
  out.value = static_cast<double>(chains.size()) * pooled_var / within;
  return out;
}

inline SrfResult srf(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return srf(std::vector<Eigen::VectorXd>{a, b});
}

struct ConvergenceReport {
  struct Item {
    std::string name;
    double srf = 0.0;
    bool degenerate = false;
  };
  std::vector<Item> items;
  double threshold = 1.1;
  double max_srf = 0.0;
  bool converged = false;
  std::uint64_t roster_seed = 0;
};

// Monitors every named scalar trace plus a seeded subset of at most
// max_entries missing-entry predictive traces.
inline ConvergenceReport convergence_report(const ImputationDraws& draws,
                                            double threshold = 1.1, Index max_entries = 100,
                                            std::uint64_t roster_seed = 0) {
  if (draws.n_chains() < 2)
    throw std::invalid_argument("convergence_report: need at least two chains");
  ConvergenceReport rep;
  rep.threshold = threshold;
  rep.roster_seed = roster_seed;

  for (const auto& [name, first_trace] : draws.scalar_traces[0]) {
    std::vector<Eigen::VectorXd> chains;
    chains.push_back(first_trace);
    for (Index c = 1; c < draws.n_chains(); ++c)
      chains.push_back(draws.scalar_traces[c].at(name));
    const SrfResult r = srf(chains);
    rep.items.push_back({name, r.value, r.degenerate});
  }

  std::vector<Index> cols(draws.n_missing());
  std::iota(cols.begin(), cols.end(), Index{0});
  if (static_cast<Index>(cols.size()) > max_entries) {
    RngStream rng(roster_seed, 0x726f73746572ull);  // fixed roster stream
    for (Index i = 0; i < max_entries; ++i) {
      const auto j =
          i + static_cast<Index>(rng.uniform() * static_cast<double>(cols.size() - i));
      std::swap(cols[i], cols[std::min<Index>(j, cols.size() - 1)]);
    }
    cols.resize(max_entries);
    std::sort(cols.begin(), cols.end());
  }
  for (Index j : cols) {
    std::vector<Eigen::VectorXd> chains;
    for (Index c = 0; c < draws.n_chains(); ++c)
      chains.push_back(draws.predictive[c].col(j));
    const SrfResult r = srf(chains);
    rep.items.push_back({"entry_" + std::to_string(draws.missing[j] + 1), r.value,
                         r.degenerate});
  }

  rep.max_srf = 0.0;
  for (const auto& it : rep.items)
    if (!it.degenerate) rep.max_srf = std::max(rep.max_srf, it.srf);
  rep.converged = rep.max_srf < threshold;
  return rep;
}

enum class Engine { independent, correlated, em };
enum class HoldoutUnit { entry, fiber };

struct CvConfig {
  std::vector<Index> ranks;
  Index folds = 4;
  HoldoutUnit unit = HoldoutUnit::entry;
  int fiber_mode = 2;  // 0-based mode whose fibers are withheld together
  std::uint64_t seed = 0;
  Engine engine = Engine::independent;
  McmcConfig mcmc;
  EmConfig em;
  std::vector<ModePolicy> policy;  // correlated engine only
  Index dense_cap = 4096;
};

struct CvResult {
  Index selected_rank = 0;
  std::vector<Index> ranks;
  Eigen::MatrixXd fold_mse;          // ranks x folds; NaN where the fit failed
  std::vector<double> mean_mse;      // per rank, over successful folds
  std::vector<char> rank_ok;
  std::vector<std::string> failures;
};

namespace detail {

// Observed units (entries, or whole fibers along fiber_mode) dealt
// round-robin into folds after a seeded shuffle.
inline std::vector<std::vector<Index>> cv_folds(const MaskedTensor& t, const CvConfig& cfg) {
  std::vector<std::vector<Index>> unit_entries;
  if (cfg.unit == HoldoutUnit::entry) {
    for (Index i = 0; i < t.size(); ++i)
      if (!t.is_missing(i)) unit_entries.push_back({i});
  } else {
    const int order = t.data.order();
    if (cfg.fiber_mode < 0 || cfg.fiber_mode >= order)
      throw std::invalid_argument("cv: fiber mode out of range");
    Dims other = t.dims();
    other.erase(other.begin() + cfg.fiber_mode);
    const Index n_fibers = num_elements(other);
    std::vector<std::vector<Index>> by_fiber(n_fibers);
    std::vector<Index> idx(order);
    for (Index lin = 0; lin < t.size(); ++lin) {
      if (t.is_missing(lin)) continue;
      from_linear(t.dims(), lin, idx);
      Index key = 0, stride = 1;
      for (int k = 0; k < order; ++k) {
        if (k == cfg.fiber_mode) continue;
        key += idx[k] * stride;
        stride *= t.dims()[k];
      }
      by_fiber[key].push_back(lin);
    }
    for (auto& f : by_fiber)
      if (!f.empty()) unit_entries.push_back(std::move(f));
  }

  if (static_cast<Index>(unit_entries.size()) < cfg.folds)
    throw std::invalid_argument("cv: fewer observed units than folds");
  RngStream rng(cfg.seed, 0x63767368ull);  // fold-shuffle stream
  for (Index i = static_cast<Index>(unit_entries.size()) - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.uniform() * static_cast<double>(i + 1));
    std::swap(unit_entries[i], unit_entries[std::min(j, i)]);
  }
  std::vector<std::vector<Index>> folds(cfg.folds);
  for (std::size_t u = 0; u < unit_entries.size(); ++u)
    for (Index e : unit_entries[u])
      folds[u % static_cast<std::size_t>(cfg.folds)].push_back(e);
  return folds;
}

inline std::uint64_t cv_run_seed(std::uint64_t seed, Index rank, Index fold) {
  return splitmix64(splitmix64(seed) ^
                    splitmix64(0x100000001b3ull * static_cast<std::uint64_t>(rank) +
                               static_cast<std::uint64_t>(fold)));
}

}  // namespace detail

inline CvResult cv_select_rank(const MaskedTensor& t, const CvConfig& cfg) {
  if (cfg.ranks.empty()) throw std::invalid_argument("cv: no candidate ranks");
  if (cfg.folds < 2) throw std::invalid_argument("cv: need at least two folds");
  const auto folds = detail::cv_folds(t, cfg);

  CvResult out;
  out.ranks = cfg.ranks;
  out.fold_mse = Eigen::MatrixXd::Constant(cfg.ranks.size(), cfg.folds,
                                           std::numeric_limits<double>::quiet_NaN());
  out.mean_mse.assign(cfg.ranks.size(), std::numeric_limits<double>::quiet_NaN());
  out.rank_ok.assign(cfg.ranks.size(), 1);
  out.failures.assign(cfg.ranks.size(), "");

  for (std::size_t ri = 0; ri < cfg.ranks.size(); ++ri) {
    const Index rank = cfg.ranks[ri];
    double total = 0.0;
    Index n_folds_ok = 0;
    for (Index k = 0; k < cfg.folds; ++k) {
      try {
        std::vector<Index> miss = t.missing;
        miss.insert(miss.end(), folds[k].begin(), folds[k].end());
        const MaskedTensor held(t.data, std::move(miss));

        McmcConfig mc = cfg.mcmc;
        mc.seed = detail::cv_run_seed(cfg.mcmc.seed, rank, k);
        double sse = 0.0;
        if (cfg.engine == Engine::em) {
          EmConfig ec = cfg.em;
          ec.als.rank = rank;
          RngStream rng(mc.seed, 0);
          const EmResult em = em_impute(held, ec, rng);
          for (Index e : folds[k]) {
            const double d = em.completed.values[e] - t.data.values[e];
            sse += d * d;
          }
        } else if (cfg.engine == Engine::independent) {
          const IndepRunResult run = run_indep(held, rank, mc);
          for (Index e : folds[k]) {
            const Index col = run.draws.entry_column(e);
            const double d =
                run.draws.structural_summary[col].mean - t.data.values[e];
            sse += d * d;
          }
        } else {
          const SepRunResult run = run_sep(held, rank, cfg.policy, mc, 1, cfg.dense_cap);
          for (Index e : folds[k]) {
            const Index col = run.draws.entry_column(e);
            const double d =
                run.draws.predictive_summary[col].mean - t.data.values[e];
            sse += d * d;
          }
        }
        out.fold_mse(ri, k) = sse / static_cast<double>(folds[k].size());
        total += out.fold_mse(ri, k);
        ++n_folds_ok;
      } catch (const std::exception& e) {
        out.rank_ok[ri] = 0;
        out.failures[ri] += std::string(out.failures[ri].empty() ? "" : "; ") +
                            "fold " + std::to_string(k + 1) + ": " + e.what();
      }
    }
    if (n_folds_ok == cfg.folds) out.mean_mse[ri] = total / static_cast<double>(cfg.folds);
    else out.rank_ok[ri] = 0;
  }

  bool any = false;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t ri = 0; ri < cfg.ranks.size(); ++ri) {
    if (!out.rank_ok[ri]) continue;
    // exact ties resolve toward the smaller rank, whatever the input order
    if (!any || out.mean_mse[ri] < best ||
        (out.mean_mse[ri] == best && cfg.ranks[ri] < out.selected_rank)) {
      best = out.mean_mse[ri];
      out.selected_rank = cfg.ranks[ri];
      any = true;
    }
  }
  if (!any) throw std::runtime_error("cv: every candidate rank failed");
  return out;
}

}  // namespace tenmi
