#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tenmi/io.hpp"
#include "tenmi/simulate.hpp"

// Command-line front end.  Every subcommand reads long-format CSV tensors
// with a JSON descriptor, is deterministic given its flags and config, and on
// any failure prints a machine-readable error JSON to stderr and exits 1.

using namespace tenmi;
namespace fs = std::filesystem;

namespace {

std::string default_desc(const std::string& csv_path) {
  const std::string suffix = ".csv";
  if (csv_path.size() > suffix.size() &&
      csv_path.compare(csv_path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return csv_path.substr(0, csv_path.size() - suffix.size()) + ".desc.json";
  return csv_path + ".desc.json";
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::vector<ModePolicy> resolve_policies(const std::vector<ModePolicy>& configured,
                                         int order) {
  if (!configured.empty()) {
    if (static_cast<int>(configured.size()) != order)
      throw std::runtime_error("mode_policies: one policy per mode required");
    return configured;
  }
  std::vector<ModePolicy> p(static_cast<std::size_t>(order), ModePolicy::wishart);
  p[0] = ModePolicy::identity;  // first mode (samples) left unstructured
  return p;
}

std::vector<ModePolicy> parse_policy_list(const std::string& s) {
  std::vector<ModePolicy> out;
  for (const std::string& tok : detail::split_csv(s)) {
    if (tok == "identity") out.push_back(ModePolicy::identity);
    else if (tok == "wishart") out.push_back(ModePolicy::wishart);
    else throw std::runtime_error("unknown mode policy \"" + tok + "\"");
  }
  return out;
}

Dims parse_dims(const std::string& s) {
  Dims dims;
  for (const std::string& tok : detail::split_csv(s)) {
    Index v;
    if (!detail::parse_index(tok, v) || v < 1)
      throw std::runtime_error("bad dimension list \"" + s + "\"");
    dims.push_back(v);
  }
  if (dims.empty()) throw std::runtime_error("empty dimension list");
  return dims;
}

// 1-based CLI mode flag to 0-based internal mode.
int to_mode0(int mode1, int order, const char* what) {
  if (mode1 < 1 || mode1 > order)
    throw std::runtime_error(std::string(what) + " must be in 1.." + std::to_string(order));
  return mode1 - 1;
}

nlohmann::json config_echo(const std::string& config_path) {
  if (config_path.empty()) return nlohmann::json::object();
  auto f = detail::open_in(config_path);
  nlohmann::json j;
  f >> j;
  return j;
}

struct CommonInput {
  std::string input;
  std::string desc;

  TensorFile load() const {
    return read_tensor(input, desc.empty() ? default_desc(input) : desc);
  }
};

void add_input_flags(CLI::App* cmd, CommonInput& in) {
  cmd->add_option("--input", in.input, "tensor CSV file")->required();
  cmd->add_option("--desc", in.desc,
                  "tensor descriptor JSON (default: <input%.csv>.desc.json)");
}

// ---------------------------------------------------------------------------

int cmd_impute(const CommonInput& in, const std::string& config_path, int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  const TensorFile tf = in.load();
  const RunConfig cfg =
      config_path.empty() ? RunConfig{} : load_run_config(config_path);
  cfg.mcmc.validate();
  fs::create_directories(cfg.output_dir);

  std::vector<std::string> outputs;
  nlohmann::json extra;
  extra["engine"] = to_string(cfg.engine);
  extra["rank"] = cfg.rank;
  extra["n_missing"] = tf.tensor.n_missing();

  if (cfg.engine == Engine::em) {
    RngStream rng(cfg.mcmc.seed, 0);
    EmConfig ec = cfg.em;
    ec.als.rank = cfg.rank;
    const EmResult em = em_impute(tf.tensor, ec, rng);
    const std::string out_csv = join_path(cfg.output_dir, "completed.csv");
    const std::string out_desc = join_path(cfg.output_dir, "completed.desc.json");
    write_tensor(MaskedTensor(em.completed, {}), out_csv, out_desc, tf.mode_names);
    outputs = {out_csv, out_desc};
    extra["iterations"] = em.iterations;
    extra["em_converged"] = em.converged;
  } else {
    ImputationDraws draws;
    bool singular = false;
    if (cfg.engine == Engine::independent) {
      IndepRunResult r = run_indep(tf.tensor, cfg.rank, cfg.mcmc, threads);
      draws = std::move(r.draws);
      singular = r.singular_flagged;
    } else {
      SepRunResult r =
          run_sep(tf.tensor, cfg.rank,
                  resolve_policies(cfg.mode_policies, tf.tensor.data.order()), cfg.mcmc,
                  threads, cfg.dense_cap);
      draws = std::move(r.draws);
      singular = r.singular_flagged;
    }
    const std::string draws_csv = join_path(cfg.output_dir, "draws.csv");
    const std::string summ_csv = join_path(cfg.output_dir, "summary.csv");
    const std::string low_csv = join_path(cfg.output_dir, "summary_lowrank.csv");
    const std::string conv_json = join_path(cfg.output_dir, "convergence.json");
    write_draws_csv(draws_csv, draws);
    write_summary_csv(summ_csv, draws, draws.predictive_summary);
    write_summary_csv(low_csv, draws, draws.structural_summary);
    if (draws.n_chains() >= 2) {
      const ConvergenceReport rep = convergence_report(draws);
      write_convergence_json(conv_json, &rep);
      extra["converged"] = rep.converged;
      extra["max_srf"] = rep.max_srf;
    } else {
      write_convergence_json(conv_json, nullptr);
    }
    extra["singular_flagged"] = singular;
    outputs = {draws_csv, summ_csv, low_csv, conv_json};
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::string manifest = join_path(cfg.output_dir, "manifest.json");
  write_manifest_json(manifest, "impute", config_echo(config_path), outputs, wall, extra);
  std::printf("wrote %s\n", manifest.c_str());
  return 0;
}

int cmd_cv_rank(const CommonInput& in, const std::string& config_path) {
  const auto t0 = std::chrono::steady_clock::now();
  const TensorFile tf = in.load();
  const RunConfig cfg =
      config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (cfg.cv_ranks.empty())
    throw std::runtime_error("cv-rank: config must list candidate ranks under cv.ranks");
  fs::create_directories(cfg.output_dir);

  CvConfig cv;
  cv.ranks = cfg.cv_ranks;
  cv.folds = cfg.cv_folds;
  cv.unit = cfg.cv_unit;
  cv.fiber_mode = cfg.cv_unit == HoldoutUnit::fiber && cfg.cv_fiber_mode < 0 &&
                          tf.fiber_mode >= 0
                      ? tf.fiber_mode
                      : cfg.cv_fiber_mode;
  cv.seed = cfg.mcmc.seed;
  cv.engine = cfg.engine;
  cv.mcmc = cfg.mcmc;
  cv.em = cfg.em;
  if (cfg.engine == Engine::correlated)
    cv.policy = resolve_policies(cfg.mode_policies, tf.tensor.data.order());
  cv.dense_cap = cfg.dense_cap;

  const CvResult res = cv_select_rank(tf.tensor, cv);

  const std::string table = join_path(cfg.output_dir, "cv.csv");
  {
    auto f = detail::open_out(table);
    f << "rank";
    for (Index k = 0; k < cv.folds; ++k) f << ",fold" << (k + 1);
    f << ",mean_mse,ok\n";
    for (std::size_t ri = 0; ri < res.ranks.size(); ++ri) {
      f << res.ranks[ri];
      for (Index k = 0; k < cv.folds; ++k) {
        const double v = res.fold_mse(static_cast<Index>(ri), k);
        f << "," << (std::isnan(v) ? "NA" : detail::fmt_double(v));
      }
      const double m = res.mean_mse[ri];
      f << "," << (std::isnan(m) ? "NA" : detail::fmt_double(m));
      f << "," << (res.rank_ok[ri] ? 1 : 0) << "\n";
    }
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json extra;
  extra["selected_rank"] = res.selected_rank;
  for (std::size_t ri = 0; ri < res.ranks.size(); ++ri)
    if (!res.failures[ri].empty()) extra["failures"].push_back(res.failures[ri]);
  const std::string manifest = join_path(cfg.output_dir, "manifest.json");
  write_manifest_json(manifest, "cv-rank", config_echo(config_path), {table}, wall, extra);
  std::printf("selected_rank %lld\n", static_cast<long long>(res.selected_rank));
  return 0;
}

struct SimulateArgs {
  int study = 1;
  std::string dims = "10,10,10";
  std::string missing = "entry";
  double prob = 0.2;
  std::uint64_t seed = 0;
  Index rank = 3;
  double sigma = 1.0;
  int fiber_mode = 3;  // 1-based
  std::string output_dir = ".";
  int replicates = 0;
  std::string engines;
  std::string policy;
  Index iterations = 600;
  Index burn_in = -1;
  Index chains = 2;
  std::uint64_t mcmc_seed = 0;
};

int cmd_simulate(const SimulateArgs& a) {
  SimDesign d;
  d.study = a.study;
  d.dims = parse_dims(a.dims);
  d.rank = a.rank;
  d.sigma = a.sigma;
  if (a.missing == "entry") d.missing = Missingness::entry;
  else if (a.missing == "fiber") d.missing = Missingness::fiber;
  else throw std::runtime_error("--missing must be entry or fiber");
  d.prob = a.prob;
  d.fiber_mode = to_mode0(a.fiber_mode, static_cast<int>(d.dims.size()), "--fiber-mode");
  d.seed = a.seed;

  const SimData sim = gen_study(d);
  fs::create_directories(a.output_dir);

  write_tensor(MaskedTensor(sim.data, {}), join_path(a.output_dir, "truth.csv"),
               join_path(a.output_dir, "truth.desc.json"));
  write_tensor(MaskedTensor(sim.signal, {}), join_path(a.output_dir, "signal.csv"),
               join_path(a.output_dir, "signal.desc.json"));
  const int fiber_hint = d.missing == Missingness::fiber ? d.fiber_mode : -1;
  write_tensor(sim.masked, join_path(a.output_dir, "masked.csv"),
               join_path(a.output_dir, "masked.desc.json"), {}, fiber_hint);

  {
    nlohmann::json j;
    j["format_version"] = 1;
    j["study"] = d.study;
    nlohmann::json covs = nlohmann::json::array();
    for (const auto& s : sim.true_cov) {
      nlohmann::json m = nlohmann::json::array();
      for (Index i = 0; i < s.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Index k = 0; k < s.cols(); ++k) row.push_back(s(i, k));
        m.push_back(std::move(row));
      }
      covs.push_back(std::move(m));
    }
    j["mode_covariances"] = std::move(covs);
    auto f = detail::open_out(join_path(a.output_dir, "covariance.json"));
    f << j.dump(2) << "\n";
  }

  if (a.replicates > 0 && !a.engines.empty()) {
    auto f = detail::open_out(join_path(a.output_dir, "metrics.csv"));
    f << "engine,replicate,structural_mse,structural_mse_mean,structural_coverage,"
         "predictive_mse,predictive_mse_mean,predictive_coverage,fiber_mse,"
         "fiber_coverage,converged,max_srf,failed\n";
    for (const std::string& name : detail::split_csv(a.engines)) {
      StudyConfig cfg;
      cfg.design = d;
      cfg.engine = engine_from_string(name);
      cfg.rank = d.rank;
      cfg.mcmc.iterations = a.iterations;
      cfg.mcmc.burn_in = a.burn_in;
      cfg.mcmc.chains = a.chains;
      cfg.mcmc.seed = a.mcmc_seed;
      if (cfg.engine == Engine::correlated)
        cfg.policy = a.policy.empty()
                         ? resolve_policies({}, static_cast<int>(d.dims.size()))
                         : parse_policy_list(a.policy);
      if (d.missing == Missingness::fiber) {
        cfg.fiber_metrics = true;
        cfg.functional_mode = d.fiber_mode;
      }
      cfg.replicates = a.replicates;
      const auto reps = run_study(cfg);
      auto cell = [&](double v) {
        return std::isnan(v) ? std::string("NA") : detail::fmt_double(v);
      };
      for (std::size_t r = 0; r < reps.size(); ++r) {
        const RunMetrics& m = reps[r].metrics;
        f << name << "," << (r + 1) << "," << cell(m.structural_mse) << ","
          << cell(m.structural_mse_mean) << "," << cell(m.structural_coverage) << ","
          << cell(m.predictive_mse) << "," << cell(m.predictive_mse_mean) << ","
          << cell(m.predictive_coverage) << "," << cell(m.fiber_mse) << ","
          << cell(m.fiber_coverage) << "," << (reps[r].converged ? 1 : 0) << ","
          << detail::fmt_double(reps[r].max_srf) << "," << (reps[r].failed ? 1 : 0)
          << "\n";
      }
    }
  }
  return 0;
}

struct AnalysisArgs {
  CommonInput in;
  std::string draws;
  std::string method = "mi";
  int time_mode = 0;     // 1-based, required
  int taxa_mode = 0;     // 1-based, required
  int subject_mode = 0;  // 1-based; 0 = infer the remaining mode
  double level = 0.95;
  bool spread_only = false;
  std::uint64_t seed = 0;
  std::string output_dir = ".";
};

void infer_modes(const TensorFile& tf, AnalysisArgs& a, int& subj, int& taxa, int& time) {
  const int order = tf.tensor.data.order();
  taxa = to_mode0(a.taxa_mode, order, "--taxa-mode");
  time = to_mode0(a.time_mode, order, "--time-mode");
  if (taxa == time) throw std::runtime_error("taxa and time modes must differ");
  if (a.subject_mode != 0) {
    subj = to_mode0(a.subject_mode, order, "--subject-mode");
    return;
  }
  subj = -1;
  for (int k = 0; k < order; ++k)
    if (k != taxa && k != time) {
      if (subj >= 0)
        throw std::runtime_error("--subject-mode required for tensors above order 3");
      subj = k;
    }
  if (subj < 0)
    throw std::runtime_error("no mode left for subjects: the tensor must be at least three-way");
}

int cmd_diversity(AnalysisArgs& a) {
  const TensorFile tf = a.in.load();
  int subj, taxa, time;
  infer_modes(tf, a, subj, taxa, time);

  DiversityMethod method;
  if (a.method == "point") method = DiversityMethod::imputed_mean;
  else if (a.method == "observed") method = DiversityMethod::observed_only;
  else if (a.method == "mi") method = DiversityMethod::posterior;
  else throw std::runtime_error("--method must be point, observed, or mi");

  std::optional<ImputationDraws> draws;
  if (!a.draws.empty()) draws = read_draws_csv(a.draws, tf.tensor);
  else if (method != DiversityMethod::observed_only)
    throw std::runtime_error("--draws is required for methods point and mi");

  const DiversityTrend trend =
      diversity_trend(tf.tensor, draws ? &*draws : nullptr, method, subj, taxa, time,
                      a.level, a.spread_only, a.seed);
  fs::create_directories(a.output_dir);
  const std::string out = join_path(a.output_dir, "diversity.csv");
  write_diversity_csv(out, trend);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_diagnostics(AnalysisArgs& a, Index bins, bool per_taxon) {
  const TensorFile tf = a.in.load();
  int subj, taxa, time;
  infer_modes(tf, a, subj, taxa, time);
  const Diagnostics diag = diagnostics(tf.tensor, subj, taxa, time, bins, per_taxon);
  fs::create_directories(a.output_dir);
  const std::string out = join_path(a.output_dir, "diagnostics.json");
  write_diagnostics_json(out, diag);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian multiple imputation for incomplete tensors"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker thread cap")->capture_default_str();

  CommonInput imp_in;
  std::string imp_config;
  CLI::App* imp = app.add_subcommand("impute", "draw imputations for the masked cells");
  add_input_flags(imp, imp_in);
  imp->add_option("--config", imp_config, "run configuration JSON");

  CommonInput cv_in;
  std::string cv_config;
  CLI::App* cvr = app.add_subcommand("cv-rank", "select the rank by cross-validation");
  add_input_flags(cvr, cv_in);
  cvr->add_option("--config", cv_config, "run configuration JSON");

  SimulateArgs sim;
  CLI::App* simc = app.add_subcommand("simulate", "generate a benchmark dataset");
  simc->add_option("--study", sim.study, "design family (1, 2, or 3)")->required();
  simc->add_option("--dims", sim.dims, "dimensions, e.g. 10,10,10")->capture_default_str();
  simc->add_option("--missing", sim.missing, "entry or fiber")->capture_default_str();
  simc->add_option("--prob", sim.prob, "missingness probability")->capture_default_str();
  simc->add_option("--seed", sim.seed, "data seed")->capture_default_str();
  simc->add_option("--rank", sim.rank, "generating rank")->capture_default_str();
  simc->add_option("--sigma", sim.sigma, "study-1 noise scale")->capture_default_str();
  simc->add_option("--fiber-mode", sim.fiber_mode, "1-based fiber mode")
      ->capture_default_str();
  simc->add_option("--output-dir", sim.output_dir, "output directory")
      ->capture_default_str();
  simc->add_option("--replicates", sim.replicates,
                   "with --engines: also run the benchmark this many times");
  simc->add_option("--engines", sim.engines, "comma list: independent,correlated,em");
  simc->add_option("--policy", sim.policy, "comma list of identity/wishart per mode");
  simc->add_option("--iterations", sim.iterations, "sampler iterations")
      ->capture_default_str();
  simc->add_option("--burn-in", sim.burn_in, "burn-in (-1: half)")->capture_default_str();
  simc->add_option("--chains", sim.chains, "chains")->capture_default_str();
  simc->add_option("--mcmc-seed", sim.mcmc_seed, "sampler seed")->capture_default_str();

  AnalysisArgs div;
  CLI::App* divc = app.add_subcommand("diversity", "within-sample diversity trend");
  add_input_flags(divc, div.in);
  divc->add_option("--draws", div.draws, "imputation draws CSV");
  divc->add_option("--method", div.method, "point, observed, or mi")->capture_default_str();
  divc->add_option("--time-mode", div.time_mode, "1-based time mode")->required();
  divc->add_option("--taxa-mode", div.taxa_mode, "1-based taxa mode")->required();
  divc->add_option("--subject-mode", div.subject_mode, "1-based subject mode (default: the remaining mode)");
  divc->add_option("--level", div.level, "interval level")->capture_default_str();
  divc->add_flag("--spread-only", div.spread_only, "population-spread intervals");
  divc->add_option("--seed", div.seed, "interval noise seed")->capture_default_str();
  divc->add_option("--output-dir", div.output_dir, "output directory")
      ->capture_default_str();

  AnalysisArgs dia;
  Index bins = 40;
  bool per_taxon = false;
  CLI::App* diac = app.add_subcommand("diagnostics", "observed-data checks");
  add_input_flags(diac, dia.in);
  diac->add_option("--time-mode", dia.time_mode, "1-based time mode")->required();
  diac->add_option("--taxa-mode", dia.taxa_mode, "1-based taxa mode")->required();
  diac->add_option("--subject-mode", dia.subject_mode, "1-based subject mode (default: the remaining mode)");
  diac->add_option("--bins", bins, "histogram bins")->capture_default_str();
  diac->add_flag("--per-taxon", per_taxon, "standardize within each taxon");
  diac->add_option("--output-dir", dia.output_dir, "output directory")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (imp->parsed()) return cmd_impute(imp_in, imp_config, threads);
    if (cvr->parsed()) return cmd_cv_rank(cv_in, cv_config);
    if (simc->parsed()) return cmd_simulate(sim);
    if (divc->parsed()) return cmd_diversity(div);
    if (diac->parsed()) return cmd_diagnostics(dia, bins, per_taxon);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", error_json(e.what()).c_str());
    return 1;
  }
  return 2;
}
