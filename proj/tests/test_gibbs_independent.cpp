#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <unordered_set>
#include <vector>

#include "tenmi/gibbs_independent.hpp"
#include "tenmi/tensor.hpp"

using namespace tenmi;

namespace {

CPModel random_model(const Dims& dims, Index rank, std::uint64_t seed) {
  RngStream rng(seed, 99);
  CPModel m;
  for (Index d : dims) {
    Eigen::MatrixXd u(d, rank);
    for (Index j = 0; j < rank; ++j)
      for (Index i = 0; i < d; ++i) u(i, j) = rng.normal();
    m.factors.push_back(std::move(u));
  }
  return m;
}

// exact CP tensor whose grand mean is zero by construction: centering the
// first factor's columns zeroes every mode-1 fiber sum without raising the
// rank, so observed-mean centering is a no-op and a fit at the generating
// rank can be exact
Tensor zero_mean_cp(const Dims& dims, Index rank, std::uint64_t seed) {
  CPModel m = random_model(dims, rank, seed);
  m.factors[0].rowwise() -= m.factors[0].colwise().mean();
  return cp_reconstruct(m);
}

}  // namespace

TEST_CASE("sampler schedule arithmetic", "[gibbs_indep]") {
  McmcConfig cfg;
  cfg.iterations = 10;
  cfg.burn_in = 4;
  cfg.thin = 3;
  REQUIRE(cfg.n_retained() == 2);  // sweeps 5 and 8
  cfg.thin = 1;
  REQUIRE(cfg.n_retained() == 6);
  cfg.burn_in = -1;
  REQUIRE(cfg.effective_burn_in() == 5);

  McmcConfig bad;
  bad.iterations = 10;
  bad.burn_in = 10;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.burn_in = 2;
  bad.thin = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.thin = 1;
  bad.chains = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("em initialization lands on a noiseless fit", "[gibbs_indep]") {
  const Tensor x = zero_mean_cp({6, 5, 4}, 2, 11);
  const MaskedTensor mt(x, {});
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed : {1, 2, 3}) {
    IndepChainState st = init_indep(mt, 2, InitStrategy::em, RngStream(seed, 0));
    best = std::min(best, st.sigma2);
    if (best < 1e-8) break;
  }
  REQUIRE(best < 1e-8);
}

TEST_CASE("random initialization replays bit-exactly", "[gibbs_indep]") {
  const Tensor x = cp_reconstruct(random_model({4, 3, 3}, 2, 12));
  const MaskedTensor mt(x, {1, 5});
  IndepChainState a = init_indep(mt, 2, InitStrategy::random, RngStream(7, 0));
  IndepChainState b = init_indep(mt, 2, InitStrategy::random, RngStream(7, 0));
  REQUIRE(a.sigma2 == b.sigma2);
  for (int n = 0; n < 3; ++n)
    REQUIRE((a.factors[n].array() == b.factors[n].array()).all());
  IndepChainState c = init_indep(mt, 2, InitStrategy::random, RngStream(8, 0));
  REQUIRE((a.factors[0].array() != c.factors[0].array()).any());
}

TEST_CASE("constant data runs to finite draws", "[gibbs_indep]") {
  Tensor x({3, 3, 3});
  x.values.setConstant(5.0);
  const MaskedTensor mt(x, {0, 13, 26});
  McmcConfig cfg;
  cfg.iterations = 40;
  cfg.burn_in = 20;
  cfg.chains = 1;
  cfg.seed = 3;
  const IndepRunResult run = run_indep(mt, 1, cfg);
  for (const auto& m : run.draws.predictive) REQUIRE(m.allFinite());
  for (const auto& m : run.draws.structural) REQUIRE(m.allFinite());
  const Eigen::VectorXd& s2 = run.draws.scalar_traces[0].at("sigma2");
  REQUIRE((s2.array() > 0.0).all());
  // centered data is identically zero, so every imputation sits at the mean
  for (const auto& es : run.draws.predictive_summary)
    REQUIRE(std::abs(es.mean - 5.0) < 1e-6);
}

TEST_CASE("posterior concentrates on an exactly low-rank completion", "[gibbs_indep]") {
  const Tensor x = zero_mean_cp({6, 5, 4}, 2, 21);
  const MaskedTensor mt(x, {});
  double worst = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed : {1, 2, 3}) {
    IndepChainState st = init_indep(mt, 2, InitStrategy::em, RngStream(seed, 0));
    if (st.sigma2 > 1e-8) continue;  // em landed in a local minimum; try again
    double w = 0.0;
    for (int it = 0; it < 100; ++it) {
      step_indep(st, mt);
      REQUIRE(st.sigma2 > 0.0);
      REQUIRE(st.sigma2 < 1e-6);
      if (it >= 50)
        w = std::max(w, (st.lowrank.values - x.values).cwiseAbs().maxCoeff());
    }
    worst = w;
    break;
  }
  REQUIRE(worst < 1e-3);
}

TEST_CASE("noise variance draw follows the stated conditional", "[gibbs_indep]") {
  Tensor x({3, 3, 2});
  RngStream drng(31, 0);
  for (Index i = 0; i < x.size(); ++i) x.values[i] = drng.normal();
  const MaskedTensor mt(x, {});
  const IndepChainState frozen = init_indep(mt, 1, InitStrategy::random, RngStream(5, 0));

  // With nothing missing the completed tensor never moves, so after one sweep
  // rate / sigma2 is an exact Gamma(size / 2) variate.
  const int reps = 20000;
  const double shape = 0.5 * static_cast<double>(x.size());
  double sum = 0.0, sumsq = 0.0;
  for (int r = 0; r < reps; ++r) {
    IndepChainState st = frozen;
    st.rng = RngStream(100, static_cast<std::uint64_t>(r));
    step_indep(st, mt);
    const double rate = 0.5 * (st.completed.values - st.lowrank.values).squaredNorm();
    const double g = rate / st.sigma2;
    sum += g;
    sumsq += g * g;
  }
  const double mean = sum / reps;
  const double var = sumsq / reps - mean * mean;
  REQUIRE(std::abs(mean - shape) < 0.09);       // 4 standard errors
  REQUIRE(std::abs(var - shape) < 0.15 * shape);
}

TEST_CASE("factor rows follow the stated conditional", "[gibbs_indep]") {
  Tensor x({4, 3, 3});
  RngStream drng(41, 0);
  for (Index i = 0; i < x.size(); ++i) x.values[i] = drng.normal();
  const MaskedTensor mt(x, {});
  const IndepChainState frozen = init_indep(mt, 2, InitStrategy::random, RngStream(6, 0));

  // Mode 1 is refreshed first in a sweep, so one step from a frozen state
  // draws its factor from N(X_(1) A G^{-1}, sigma2 G^{-1}) with the design A
  // built from the untouched later modes.
  const Eigen::MatrixXd a = design_matrix(frozen.factors, 0);
  const Eigen::MatrixXd g = a.transpose() * a;
  const Eigen::MatrixXd ginv = g.inverse();
  const Eigen::MatrixXd want_mean = matricize(x, 0) * a * ginv;
  const Eigen::MatrixXd want_cov = frozen.sigma2 * ginv;

  const int reps = 20000;
  Eigen::MatrixXd mean_acc = Eigen::MatrixXd::Zero(4, 2);
  Eigen::Matrix2d cov_acc = Eigen::Matrix2d::Zero();
  for (int r = 0; r < reps; ++r) {
    IndepChainState st = frozen;
    st.rng = RngStream(200, static_cast<std::uint64_t>(r));
    step_indep(st, mt);
    mean_acc += st.factors[0];
    const Eigen::Vector2d row0 = st.factors[0].row(0).transpose();
    cov_acc += row0 * row0.transpose();
  }
  const Eigen::MatrixXd emp_mean = mean_acc / reps;
  const Eigen::Matrix2d emp_cov =
      cov_acc / reps - emp_mean.row(0).transpose() * emp_mean.row(0);

  const double se = std::sqrt(frozen.sigma2 * ginv.diagonal().maxCoeff() / reps);
  REQUIRE((emp_mean - want_mean).cwiseAbs().maxCoeff() < 5.0 * se);
  const double cov_tol =
      0.1 * want_cov.cwiseAbs().maxCoeff() + 5.0 * want_cov.cwiseAbs().maxCoeff() / std::sqrt(reps);
  REQUIRE((emp_cov - want_cov).cwiseAbs().maxCoeff() < cov_tol);
}

TEST_CASE("observed entries stay pinned through sweeps", "[gibbs_indep]") {
  Tensor x = cp_reconstruct(random_model({5, 4, 3}, 2, 51));
  RngStream nrng(51, 1);
  for (Index i = 0; i < x.size(); ++i) x.values[i] += 0.3 * nrng.normal();
  const std::vector<Index> missing{2, 11, 23, 37, 55};
  const MaskedTensor mt(x, missing);
  const CenteredTensor centered = center_observed(mt);

  IndepChainState st = init_indep(centered.data, 2, InitStrategy::random, RngStream(9, 0));
  const std::unordered_set<Index> gone(missing.begin(), missing.end());
  for (int it = 0; it < 20; ++it) {
    step_indep(st, centered.data);
    for (Index i = 0; i < x.size(); ++i) {
      if (gone.count(i)) continue;
      REQUIRE(st.completed.values[i] == centered.data.data.values[i]);
    }
  }
}

TEST_CASE("a single retained draw has zero spread", "[gibbs_indep]") {
  const Tensor x = cp_reconstruct(random_model({4, 4, 3}, 2, 61));
  const MaskedTensor mt(x, {3, 17, 31});
  McmcConfig cfg;
  cfg.iterations = 11;
  cfg.burn_in = 10;
  cfg.chains = 1;
  cfg.seed = 4;
  const IndepRunResult run = run_indep(mt, 2, cfg);
  REQUIRE(run.draws.predictive[0].rows() == 1);
  for (const auto& es : run.draws.predictive_summary) {
    REQUIRE(es.sd == 0.0);
    REQUIRE(es.q025 == es.q975);
    REQUIRE(es.q025 == es.mean);
  }
}

TEST_CASE("wider masks widen the predictive intervals", "[gibbs_indep]") {
  Tensor x = cp_reconstruct(random_model({8, 8, 8}, 2, 71));
  RngStream nrng(71, 1);
  for (Index i = 0; i < x.size(); ++i) x.values[i] += 0.5 * nrng.normal();

  RngStream mrng(71, 2);
  std::vector<Index> m20, m50, m70;
  for (Index i = 0; i < x.size(); ++i) {
    const double u = mrng.uniform();
    if (u < 0.2) m20.push_back(i);
    if (u < 0.5) m50.push_back(i);
    if (u < 0.7) m70.push_back(i);
  }

  McmcConfig cfg;
  cfg.iterations = 400;
  cfg.burn_in = 200;
  cfg.chains = 1;
  cfg.seed = 11;
  const auto median_width = [&](const std::vector<Index>& mask) {
    const IndepRunResult run = run_indep(MaskedTensor(x, mask), 2, cfg);
    std::vector<double> widths;
    for (Index j = 0; j < run.draws.n_missing(); ++j) {
      // score only the entries shared by every mask so the sets are comparable
      if (!std::binary_search(m20.begin(), m20.end(), run.draws.missing[j])) continue;
      widths.push_back(run.draws.predictive_summary[j].q975 -
                       run.draws.predictive_summary[j].q025);
    }
    return quantile_type1(widths, 0.5);
  };
  const double w20 = median_width(m20);
  const double w50 = median_width(m50);
  const double w70 = median_width(m70);
  INFO("median widths " << w20 << " " << w50 << " " << w70);
  REQUIRE(w50 >= 0.95 * w20);
  REQUIRE(w70 >= 0.95 * w50);
  REQUIRE(w70 > w20);
}
