#pragma once

#include <Eigen/Dense>

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tenmi/mcmc.hpp"
#include "tenmi/rand.hpp"
#include "tenmi/tensor.hpp"

// Compositional analysis of longitudinal count data on a subject x taxa x
// time tensor: centered log-ratio transform, a diversity index computed from
// values already on the log-ratio scale, per-timepoint diversity trends with
// three interval constructions, and plain data diagnostics.

namespace tenmi {

// Centered log-ratio per column (sample): log(x + pseudo) minus its mean.
// Rows are taxa; counts must be nonnegative and the pseudocount positive.
inline Eigen::MatrixXd clr_transform(const Eigen::MatrixXd& counts, double pseudo = 0.5) {
  if (!(pseudo > 0.0)) throw std::invalid_argument("clr_transform: pseudocount must be positive");
  if ((counts.array() < 0.0).any())
    throw std::invalid_argument("clr_transform: counts must be nonnegative");
  Eigen::MatrixXd logc = (counts.array() + pseudo).log().matrix();
  const Eigen::RowVectorXd colmean = logc.colwise().mean();
  logc.rowwise() -= colmean;
  return logc;
}

// Shannon index of the composition recovered from log-ratio values by a
// max-subtracted softmax; lies in [0, log J] for J taxa.
inline double shannon_diversity(const Eigen::VectorXd& clr_values) {
  if (clr_values.size() == 0)
    throw std::invalid_argument("shannon_diversity: empty fiber");
  const double m = clr_values.maxCoeff();
  Eigen::ArrayXd p = (clr_values.array() - m).exp();
  p /= p.sum();
  double h = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

enum class DiversityMethod {
  imputed_mean,   // complete data with posterior-predictive means, then a t interval
  observed_only,  // subjects with a fully observed fiber at that timepoint
  posterior       // per-draw subject spread propagated through the posterior
};

struct DiversityRow {
  Index time = 0;  // 1-based position along the time mode
  double point = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  bool bounds_available = false;
  Index n_subjects = 0;
};

struct DiversityTrend {
  DiversityMethod method = DiversityMethod::imputed_mean;
  double level = 0.95;
  bool spread_only = false;
  std::vector<DiversityRow> rows;
};

namespace detail {

inline void check_modes(const Dims& dims, int subject_mode, int taxa_mode, int time_mode) {
  if (dims.size() != 3)
    throw std::invalid_argument("diversity: order-3 tensor required");
  const int order = 3;
  for (int m : {subject_mode, taxa_mode, time_mode})
    if (m < 0 || m >= order) throw std::invalid_argument("diversity: mode out of range");
  if (subject_mode == taxa_mode || subject_mode == time_mode || taxa_mode == time_mode)
    throw std::invalid_argument("diversity: modes must be distinct");
}

// Mean +- t-quantile * sd / sqrt(n) with the n-1 divisor in sd.
inline void t_interval(const std::vector<double>& x, double level, DiversityRow& row) {
  const Index n = static_cast<Index>(x.size());
  row.n_subjects = n;
  if (n == 0) return;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  row.point = mean;
  if (n < 2) return;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
  const double q = boost::math::quantile(dist, 0.5 + 0.5 * level);
  const double half = q * sd / std::sqrt(static_cast<double>(n));
  row.lo = mean - half;
  row.hi = mean + half;
  row.bounds_available = true;
}

}  // namespace detail

// Per-timepoint mean diversity across subjects with an interval.
//   imputed_mean  fills masked entries with the posterior-predictive mean and
//                 uses all subjects (draws required);
//   observed_only uses only subjects whose whole taxa fiber is observed at
//                 that timepoint (draws unused; a timepoint with no such
//                 subject gets an empty row, one subject a point only);
//   posterior     recomputes the subject mean m_t and spread s_t under every
//                 pooled predictive draw and records quantiles of
//                 m_t + s_t / sqrt(n) * T with T ~ t(n-1) (draws required).
// spread_only drops the 1/sqrt(n) factor in the posterior method, widening
// the band from a mean interval to a population-spread interval.
inline DiversityTrend diversity_trend(const MaskedTensor& data, const ImputationDraws* draws,
                                      DiversityMethod method, int subject_mode, int taxa_mode,
                                      int time_mode, double level = 0.95,
                                      bool spread_only = false, std::uint64_t seed = 0) {
  detail::check_modes(data.dims(), subject_mode, taxa_mode, time_mode);
  if (!(level > 0.0) || !(level < 1.0))
    throw std::invalid_argument("diversity: level must lie in (0, 1)");
  const bool needs_draws = method != DiversityMethod::observed_only;
  if (needs_draws) {
    if (draws == nullptr)
      throw std::invalid_argument("diversity: this method requires posterior draws");
    if (draws->n_missing() != static_cast<Index>(data.missing.size()))
      throw std::invalid_argument("diversity: draws do not match the mask");
  }

  const Dims& dims = data.dims();
  const Index n_subj = dims[subject_mode];
  const Index n_taxa = dims[taxa_mode];
  const Index n_time = dims[time_mode];

  // fiber(s, t) -> taxa-ordered linear indices
  std::vector<std::vector<Index>> fiber(static_cast<std::size_t>(n_subj * n_time));
  Dims idx(3);
  for (Index s = 0; s < n_subj; ++s)
    for (Index t = 0; t < n_time; ++t) {
      auto& f = fiber[static_cast<std::size_t>(s * n_time + t)];
      f.resize(n_taxa);
      idx[subject_mode] = s;
      idx[time_mode] = t;
      for (Index j = 0; j < n_taxa; ++j) {
        idx[taxa_mode] = j;
        f[j] = to_linear(dims, idx);
      }
    }

  DiversityTrend out;
  out.method = method;
  out.level = level;
  out.spread_only = spread_only;
  out.rows.resize(n_time);
  for (Index t = 0; t < n_time; ++t) out.rows[t].time = t + 1;

  if (method == DiversityMethod::imputed_mean) {
    Eigen::VectorXd completed = data.data.values;
    for (Index j = 0; j < draws->n_missing(); ++j)
      completed[draws->missing[j]] = draws->predictive_summary[j].mean;
    Eigen::VectorXd vals(n_taxa);
    for (Index t = 0; t < n_time; ++t) {
      std::vector<double> alpha;
      alpha.reserve(n_subj);
      for (Index s = 0; s < n_subj; ++s) {
        const auto& f = fiber[static_cast<std::size_t>(s * n_time + t)];
        for (Index j = 0; j < n_taxa; ++j) vals[j] = completed[f[j]];
        alpha.push_back(shannon_diversity(vals));
      }
      detail::t_interval(alpha, level, out.rows[t]);
    }
    return out;
  }

  if (method == DiversityMethod::observed_only) {
    Eigen::VectorXd vals(n_taxa);
    for (Index t = 0; t < n_time; ++t) {
      std::vector<double> alpha;
      for (Index s = 0; s < n_subj; ++s) {
        const auto& f = fiber[static_cast<std::size_t>(s * n_time + t)];
        bool complete = true;
        for (Index j = 0; j < n_taxa && complete; ++j)
          complete = !data.is_missing(f[j]);
        if (!complete) continue;
        for (Index j = 0; j < n_taxa; ++j) vals[j] = data.data.values[f[j]];
        alpha.push_back(shannon_diversity(vals));
      }
      detail::t_interval(alpha, level, out.rows[t]);
    }
    return out;
  }

  // posterior: pool retained draws across chains
  Index n_pooled = 0;
  for (Index c = 0; c < draws->n_chains(); ++c) n_pooled += draws->predictive[c].rows();
  if (n_pooled == 0) throw std::invalid_argument("diversity: no retained draws");

  // column of each masked entry, by linear index, for fiber lookup
  std::vector<std::vector<std::pair<Index, Index>>> miss_in_fiber(fiber.size());
  for (std::size_t fi = 0; fi < fiber.size(); ++fi)
    for (Index j = 0; j < n_taxa; ++j)
      if (data.is_missing(fiber[fi][j]))
        miss_in_fiber[fi].push_back({j, draws->entry_column(fiber[fi][j])});

  RngStream rng(seed, 0x646976ull);  // t-noise stream for the posterior method
  const double df = static_cast<double>(n_subj - 1);
  std::vector<std::vector<double>> alpha_bar(n_time);
  std::vector<std::vector<double>> m_draws(n_time);
  Eigen::VectorXd vals(n_taxa);
  std::vector<double> alpha(n_subj);
  for (Index c = 0; c < draws->n_chains(); ++c) {
    const Eigen::MatrixXd& rows = draws->predictive[c];
    for (Index r = 0; r < rows.rows(); ++r) {
      for (Index t = 0; t < n_time; ++t) {
        for (Index s = 0; s < n_subj; ++s) {
          const std::size_t fi = static_cast<std::size_t>(s * n_time + t);
          const auto& f = fiber[fi];
          for (Index j = 0; j < n_taxa; ++j) vals[j] = data.data.values[f[j]];
          for (const auto& [j, col] : miss_in_fiber[fi]) vals[j] = rows(r, col);
          alpha[s] = shannon_diversity(vals);
        }
        double m = 0.0;
        for (Index s = 0; s < n_subj; ++s) m += alpha[s];
        m /= static_cast<double>(n_subj);
        m_draws[t].push_back(m);
        if (n_subj < 2) continue;
        double ss = 0.0;
        for (Index s = 0; s < n_subj; ++s) ss += (alpha[s] - m) * (alpha[s] - m);
        const double sd = std::sqrt(ss / df);
        const double tdraw = rng.normal() / std::sqrt(rng.chi_squared(df) / df);
        const double scale = spread_only ? sd : sd / std::sqrt(static_cast<double>(n_subj));
        alpha_bar[t].push_back(m + scale * tdraw);
      }
    }
  }
  for (Index t = 0; t < n_time; ++t) {
    DiversityRow& row = out.rows[t];
    row.n_subjects = n_subj;
    double mp = 0.0;
    for (double v : m_draws[t]) mp += v;
    row.point = mp / static_cast<double>(m_draws[t].size());
    if (!alpha_bar[t].empty()) {
      row.lo = quantile_type1(alpha_bar[t], 0.5 * (1.0 - level));
      row.hi = quantile_type1(alpha_bar[t], 0.5 * (1.0 + level));
      row.bounds_available = true;
    }
  }
  return out;
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  Index count = 0;
};

struct SliceCorrelation {
  Index time = 0;  // 1-based
  Eigen::MatrixXd corr;  // taxa x taxa; meaningful only where defined
  Eigen::Matrix<char, Eigen::Dynamic, Eigen::Dynamic> defined;
  Index n_subjects = 0;  // subjects with any observed entry in the slice
  bool skipped = false;
};

struct Diagnostics {
  double mean = 0.0;  // global observed moments, whatever the standardization
  double sd = 0.0;
  bool per_taxon = false;
  std::vector<HistogramBin> histogram;  // of standardized observed entries
  std::vector<SliceCorrelation> slices;
};

// Observed-data checks run before any model: a histogram of standardized
// observed entries and, per timepoint, pairwise-complete taxa correlations
// across subjects.  Standardization is global by default; per_taxon centers
// and scales each entry by its own taxon's observed moments instead.  A pair
// is undefined (flagged, not NaN-propagated) when fewer than two subjects
// observe both taxa or either taxon is constant; a timepoint with no
// observed data is skipped whole.
inline Diagnostics diagnostics(const MaskedTensor& data, int subject_mode, int taxa_mode,
                               int time_mode, Index bins = 40, bool per_taxon = false) {
  detail::check_modes(data.dims(), subject_mode, taxa_mode, time_mode);
  if (bins < 1) throw std::invalid_argument("diagnostics: need at least one bin");
  Diagnostics out;
  out.per_taxon = per_taxon;

  std::vector<double> obs;
  std::vector<Index> obs_taxon;
  Dims coord(3);
  for (Index i = 0; i < data.size(); ++i)
    if (!data.is_missing(i)) {
      obs.push_back(data.data.values[i]);
      from_linear(data.dims(), i, coord);
      obs_taxon.push_back(coord[taxa_mode]);
    }
  if (obs.empty()) throw std::invalid_argument("diagnostics: no observed entries");
  double mean = 0.0;
  for (double v : obs) mean += v;
  mean /= static_cast<double>(obs.size());
  double ss = 0.0;
  for (double v : obs) ss += (v - mean) * (v - mean);
  const double sd = obs.size() > 1 ? std::sqrt(ss / static_cast<double>(obs.size() - 1)) : 0.0;
  out.mean = mean;
  out.sd = sd;

  std::vector<double> z(obs.size());
  if (per_taxon) {
    const Index jn = data.dims()[taxa_mode];
    std::vector<double> tsum(jn, 0.0), tss(jn, 0.0);
    std::vector<Index> tcount(jn, 0);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      tsum[obs_taxon[i]] += obs[i];
      ++tcount[obs_taxon[i]];
    }
    std::vector<double> tmean(jn, 0.0);
    for (Index j = 0; j < jn; ++j)
      if (tcount[j] > 0) tmean[j] = tsum[j] / static_cast<double>(tcount[j]);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const double d = obs[i] - tmean[obs_taxon[i]];
      tss[obs_taxon[i]] += d * d;
    }
    std::vector<double> tsd(jn, 0.0);
    for (Index j = 0; j < jn; ++j)
      if (tcount[j] > 1) tsd[j] = std::sqrt(tss[j] / static_cast<double>(tcount[j] - 1));
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const Index j = obs_taxon[i];
      z[i] = tsd[j] > 0.0 ? (obs[i] - tmean[j]) / tsd[j] : 0.0;
    }
  } else {
    for (std::size_t i = 0; i < obs.size(); ++i)
      z[i] = sd > 0.0 ? (obs[i] - mean) / sd : 0.0;
  }
  const double zmin = *std::min_element(z.begin(), z.end());
  const double zmax = *std::max_element(z.begin(), z.end());
  if (zmax > zmin) {
    const double width = (zmax - zmin) / static_cast<double>(bins);
    out.histogram.resize(bins);
    for (Index b = 0; b < bins; ++b) {
      out.histogram[b].lo = zmin + width * static_cast<double>(b);
      out.histogram[b].hi = zmin + width * static_cast<double>(b + 1);
    }
    for (double v : z) {
      Index b = static_cast<Index>((v - zmin) / width);
      if (b >= bins) b = bins - 1;  // right edge closes the last bin
      ++out.histogram[b].count;
    }
  } else {
    out.histogram.push_back({zmin, zmax, static_cast<Index>(z.size())});
  }

  const Dims& dims = data.dims();
  const Index n_subj = dims[subject_mode];
  const Index n_taxa = dims[taxa_mode];
  const Index n_time = dims[time_mode];
  Dims idx(3);
  for (Index t = 0; t < n_time; ++t) {
    SliceCorrelation slice;
    slice.time = t + 1;
    Eigen::MatrixXd x(n_subj, n_taxa);
    Eigen::Matrix<char, Eigen::Dynamic, Eigen::Dynamic> have(n_subj, n_taxa);
    idx[time_mode] = t;
    for (Index s = 0; s < n_subj; ++s) {
      idx[subject_mode] = s;
      for (Index j = 0; j < n_taxa; ++j) {
        idx[taxa_mode] = j;
        const Index lin = to_linear(dims, idx);
        have(s, j) = data.is_missing(lin) ? 0 : 1;
        x(s, j) = have(s, j) ? data.data.values[lin] : 0.0;
      }
    }
    for (Index s = 0; s < n_subj; ++s)
      if (have.row(s).any()) ++slice.n_subjects;
    if (slice.n_subjects == 0) {
      slice.skipped = true;
      out.slices.push_back(std::move(slice));
      continue;
    }
    slice.corr = Eigen::MatrixXd::Zero(n_taxa, n_taxa);
    slice.defined.setZero(n_taxa, n_taxa);
    for (Index a = 0; a < n_taxa; ++a)
      for (Index b = a; b < n_taxa; ++b) {
        double sa = 0.0, sb = 0.0;
        Index n = 0;
        for (Index s = 0; s < n_subj; ++s)
          if (have(s, a) && have(s, b)) {
            sa += x(s, a);
            sb += x(s, b);
            ++n;
          }
        if (n < 2) continue;
        const double ma = sa / static_cast<double>(n), mb = sb / static_cast<double>(n);
        double vaa = 0.0, vbb = 0.0, vab = 0.0;
        for (Index s = 0; s < n_subj; ++s)
          if (have(s, a) && have(s, b)) {
            vaa += (x(s, a) - ma) * (x(s, a) - ma);
            vbb += (x(s, b) - mb) * (x(s, b) - mb);
            vab += (x(s, a) - ma) * (x(s, b) - mb);
          }
        if (vaa <= 0.0 || vbb <= 0.0) continue;  // constant taxon: undefined
        slice.corr(a, b) = vab / std::sqrt(vaa * vbb);
        slice.corr(b, a) = slice.corr(a, b);
        slice.defined(a, b) = 1;
        slice.defined(b, a) = 1;
      }
    out.slices.push_back(std::move(slice));
  }
  return out;
}

}  // namespace tenmi
