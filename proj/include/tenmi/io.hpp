#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tenmi/analysis.hpp"
#include "tenmi/cp_fit.hpp"
#include "tenmi/mcmc.hpp"
#include "tenmi/model_select.hpp"
#include "tenmi/tensor.hpp"

// File formats: a tensor is a CSV of 1-based coordinates plus a JSON
// descriptor holding the dimensions; run configuration is JSON with strict
// (unknown keys rejected) parsing; results go out as CSV and JSON.  Values
// are printed with enough digits (%.17g) to round-trip doubles exactly.

namespace tenmi {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_index(const std::string& s, Index& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size()) return false;
  out = static_cast<Index>(v);
  return true;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return f;
}

// Rejects keys outside `allowed`; `where` names the object in the error.
inline void check_keys(const nlohmann::json& j, const std::string& where,
                       const std::set<std::string>& allowed) {
  if (!j.is_object()) throw std::runtime_error(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (allowed.find(key) == allowed.end())
      throw std::runtime_error(where + ": unknown key \"" + key + "\"");
}

}  // namespace detail

struct TensorFile {
  MaskedTensor tensor{Tensor(Dims{1}), {}};
  std::vector<std::string> mode_names;
  int fiber_mode = -1;  // 0-based fiber-missingness hint; -1 when absent
};

// Descriptor: {"format_version": 1, "dims": [...], "mode_names": [...]}
// plus an optional 1-based "fiber_mode" hint naming the fiber-missing mode.
inline void write_tensor(const MaskedTensor& t, const std::string& csv_path,
                         const std::string& desc_path,
                         const std::vector<std::string>& mode_names = {},
                         int fiber_mode = -1) {
  const int order = t.data.order();
  if (!mode_names.empty() && static_cast<int>(mode_names.size()) != order)
    throw std::invalid_argument("write_tensor: one name per mode required");
  if (fiber_mode >= order)
    throw std::invalid_argument("write_tensor: fiber mode out of range");
  nlohmann::json desc;
  desc["format_version"] = 1;
  desc["dims"] = t.dims();
  if (!mode_names.empty()) desc["mode_names"] = mode_names;
  if (fiber_mode >= 0) desc["fiber_mode"] = fiber_mode + 1;
  {
    auto f = detail::open_out(desc_path);
    f << desc.dump(2) << "\n";
  }
  auto f = detail::open_out(csv_path);
  for (int k = 0; k < order; ++k) f << "i" << (k + 1) << ",";
  f << "value\n";
  std::vector<Index> idx(order);
  for (Index lin = 0; lin < t.size(); ++lin) {
    from_linear(t.dims(), lin, idx);
    for (int k = 0; k < order; ++k) f << (idx[k] + 1) << ",";
    if (t.is_missing(lin)) f << "NA\n";
    else f << detail::fmt_double(t.data.values[lin]) << "\n";
  }
}

// Cells absent from the CSV and cells marked NA are both missing; duplicate
// or out-of-range coordinates abort with the offending line number.
inline TensorFile read_tensor(const std::string& csv_path, const std::string& desc_path) {
  nlohmann::json desc;
  {
    auto f = detail::open_in(desc_path);
    try {
      f >> desc;
    } catch (const std::exception& e) {
      throw std::runtime_error(desc_path + ": invalid JSON: " + e.what());
    }
  }
  detail::check_keys(desc, "descriptor", {"format_version", "dims", "mode_names", "fiber_mode"});
  if (!desc.contains("dims") || !desc["dims"].is_array() || desc["dims"].empty())
    throw std::runtime_error("descriptor: \"dims\" must be a nonempty array");
  Dims dims;
  for (const auto& d : desc["dims"]) {
    if (!d.is_number_integer() || d.get<long long>() < 1)
      throw std::runtime_error("descriptor: dimensions must be positive integers");
    dims.push_back(d.get<Index>());
  }
  TensorFile out;
  if (desc.contains("mode_names")) {
    for (const auto& n : desc["mode_names"]) out.mode_names.push_back(n.get<std::string>());
    if (out.mode_names.size() != dims.size())
      throw std::runtime_error("descriptor: one mode name per dimension required");
  }
  if (desc.contains("fiber_mode")) {
    const int fm = desc["fiber_mode"].get<int>();
    if (fm < 1 || fm > static_cast<int>(dims.size()))
      throw std::runtime_error("descriptor: \"fiber_mode\" out of range");
    out.fiber_mode = fm - 1;
  }

  const int order = static_cast<int>(dims.size());
  Tensor data(dims);
  data.values.setZero();
  std::vector<char> seen(static_cast<std::size_t>(data.size()), 0);
  std::vector<Index> missing;

  auto f = detail::open_in(csv_path);
  std::string line;
  Index line_no = 0;
  bool first = true;
  std::vector<Index> idx(order);
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv(line);
    if (first) {
      first = false;
      Index probe;
      if (!fields.empty() && !detail::parse_index(fields[0], probe)) continue;  // header
    }
    if (static_cast<int>(fields.size()) != order + 1)
      throw std::runtime_error(csv_path + " line " + std::to_string(line_no) + ": expected " +
                               std::to_string(order + 1) + " fields");
    for (int k = 0; k < order; ++k) {
      Index v;
      if (!detail::parse_index(fields[k], v) || v < 1 || v > dims[k])
        throw std::runtime_error(csv_path + " line " + std::to_string(line_no) +
                                 ": index out of range for mode " + std::to_string(k + 1));
      idx[k] = v - 1;
    }
    const Index lin = to_linear(dims, idx);
    if (seen[lin])
      throw std::runtime_error(csv_path + " line " + std::to_string(line_no) +
                               ": duplicate cell");
    seen[lin] = 1;
    if (fields[order] == "NA" || fields[order] == "na" || fields[order] == "NaN") {
      missing.push_back(lin);
      continue;
    }
    double v;
    if (!detail::parse_double(fields[order], v))
      throw std::runtime_error(csv_path + " line " + std::to_string(line_no) +
                               ": unparseable value \"" + fields[order] + "\"");
    data.values[lin] = v;
  }
  for (Index i = 0; i < data.size(); ++i)
    if (!seen[i]) missing.push_back(i);
  out.tensor = MaskedTensor(std::move(data), std::move(missing));
  return out;
}

inline std::string to_string(Engine e) {
  switch (e) {
    case Engine::independent: return "independent";
    case Engine::correlated: return "correlated";
    default: return "em";
  }
}

inline Engine engine_from_string(const std::string& s) {
  if (s == "independent") return Engine::independent;
  if (s == "correlated") return Engine::correlated;
  if (s == "em") return Engine::em;
  throw std::runtime_error("unknown engine \"" + s + "\"");
}

struct RunConfig {
  Engine engine = Engine::independent;
  Index rank = 2;
  McmcConfig mcmc;
  EmConfig em;
  std::vector<ModePolicy> mode_policies;  // empty: first mode identity, rest sampled
  Index dense_cap = 4096;
  std::vector<Index> cv_ranks;
  Index cv_folds = 4;
  HoldoutUnit cv_unit = HoldoutUnit::entry;
  int cv_fiber_mode = 2;  // 0-based internally; 1-based in the file
  std::string output_dir = ".";
};

// Strict parse: every unknown key anywhere in the document is an error, so a
// typo cannot silently fall back to a default.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, "config",
                     {"format_version", "engine", "rank", "mcmc", "em", "mode_policies",
                      "dense_cap", "cv", "output_dir"});
  RunConfig cfg;
  if (j.contains("engine")) cfg.engine = engine_from_string(j["engine"].get<std::string>());
  if (j.contains("rank")) cfg.rank = j["rank"].get<Index>();
  if (j.contains("dense_cap")) cfg.dense_cap = j["dense_cap"].get<Index>();
  if (j.contains("output_dir")) cfg.output_dir = j["output_dir"].get<std::string>();
  if (j.contains("mcmc")) {
    const auto& m = j["mcmc"];
    detail::check_keys(m, "config.mcmc",
                       {"iterations", "burn_in", "chains", "thin", "seed", "init"});
    if (m.contains("iterations")) cfg.mcmc.iterations = m["iterations"].get<Index>();
    if (m.contains("burn_in")) cfg.mcmc.burn_in = m["burn_in"].get<Index>();
    if (m.contains("chains")) cfg.mcmc.chains = m["chains"].get<Index>();
    if (m.contains("thin")) cfg.mcmc.thin = m["thin"].get<Index>();
    if (m.contains("seed")) cfg.mcmc.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("init")) {
      const std::string s = m["init"].get<std::string>();
      if (s == "em") cfg.mcmc.init = InitStrategy::em;
      else if (s == "random") cfg.mcmc.init = InitStrategy::random;
      else throw std::runtime_error("config.mcmc.init: unknown strategy \"" + s + "\"");
    }
  }
  if (j.contains("em")) {
    const auto& m = j["em"];
    detail::check_keys(m, "config.em", {"tol", "max_iter", "als_max_iter", "als_tol"});
    if (m.contains("tol")) cfg.em.tol = m["tol"].get<double>();
    if (m.contains("max_iter")) cfg.em.max_iter = m["max_iter"].get<Index>();
    if (m.contains("als_max_iter")) cfg.em.als.max_iter = m["als_max_iter"].get<Index>();
    if (m.contains("als_tol")) cfg.em.als.rel_tol = m["als_tol"].get<double>();
  }
  if (j.contains("mode_policies")) {
    for (const auto& p : j["mode_policies"]) {
      const std::string s = p.get<std::string>();
      if (s == "identity") cfg.mode_policies.push_back(ModePolicy::identity);
      else if (s == "wishart") cfg.mode_policies.push_back(ModePolicy::wishart);
      else throw std::runtime_error("config.mode_policies: unknown policy \"" + s + "\"");
    }
  }
  if (j.contains("cv")) {
    const auto& c = j["cv"];
    detail::check_keys(c, "config.cv", {"ranks", "folds", "holdout", "fiber_mode"});
    if (c.contains("ranks"))
      for (const auto& r : c["ranks"]) cfg.cv_ranks.push_back(r.get<Index>());
    if (c.contains("folds")) cfg.cv_folds = c["folds"].get<Index>();
    if (c.contains("holdout")) {
      const std::string s = c["holdout"].get<std::string>();
      if (s == "entry") cfg.cv_unit = HoldoutUnit::entry;
      else if (s == "fiber") cfg.cv_unit = HoldoutUnit::fiber;
      else throw std::runtime_error("config.cv.holdout: unknown unit \"" + s + "\"");
    }
    if (c.contains("fiber_mode")) cfg.cv_fiber_mode = c["fiber_mode"].get<int>() - 1;
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  auto f = detail::open_in(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// One row per (retained draw, masked cell): draw,i1..iN,value.  The draw id
// is pooled across chains (1-based, chains concatenated in order), so the
// file is a flat multiple-imputation stack.
inline void write_draws_csv(const std::string& path, const ImputationDraws& draws) {
  auto f = detail::open_out(path);
  const int order = static_cast<int>(draws.dims.size());
  f << "draw,";
  for (int k = 0; k < order; ++k) f << "i" << (k + 1) << ",";
  f << "value\n";
  std::vector<Index> idx(order);
  Index id = 0;
  for (Index c = 0; c < draws.n_chains(); ++c) {
    const Eigen::MatrixXd& m = draws.predictive[c];
    for (Index r = 0; r < m.rows(); ++r) {
      ++id;
      for (Index j = 0; j < m.cols(); ++j) {
        from_linear(draws.dims, draws.missing[j], idx);
        f << id << ",";
        for (int k = 0; k < order; ++k) f << (idx[k] + 1) << ",";
        f << detail::fmt_double(m(r, j)) << "\n";
      }
    }
  }
}

// Rebuilds pooled draws from a draws CSV, validated against the mask of the
// tensor they impute.  Chain identity is not stored, so everything comes back
// as one chain; the file holds predictive draws only, so the structural track
// mirrors them.  Summaries are recomputed.
inline ImputationDraws read_draws_csv(const std::string& path, const MaskedTensor& data) {
  auto f = detail::open_in(path);
  const int order = data.data.order();
  std::string line;
  Index line_no = 0;
  bool first = true;
  std::map<Index, std::map<Index, double>> cells;  // draw -> (column -> value)
  std::vector<Index> idx(order);
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv(line);
    if (first) {
      first = false;
      Index probe;
      if (!fields.empty() && !detail::parse_index(fields[0], probe)) continue;  // header
    }
    if (static_cast<int>(fields.size()) != order + 2)
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": expected " + std::to_string(order + 2) + " fields");
    Index draw;
    if (!detail::parse_index(fields[0], draw) || draw < 1)
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": bad draw index");
    for (int k = 0; k < order; ++k) {
      Index v;
      if (!detail::parse_index(fields[k + 1], v) || v < 1 || v > data.dims()[k])
        throw std::runtime_error(path + " line " + std::to_string(line_no) +
                                 ": index out of range for mode " + std::to_string(k + 1));
      idx[k] = v - 1;
    }
    const Index lin = to_linear(data.dims(), idx);
    if (!data.is_missing(lin))
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": cell is observed in the tensor, not missing");
    double v;
    if (!detail::parse_double(fields[order + 1], v))
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": unparseable value");
    const auto lower = std::lower_bound(data.missing.begin(), data.missing.end(), lin);
    const Index col = static_cast<Index>(lower - data.missing.begin());
    auto& slot = cells[draw];
    if (slot.count(col))
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": duplicate cell within a draw");
    slot[col] = v;
  }
  if (cells.empty()) throw std::runtime_error(path + ": no draws found");

  ImputationDraws out;
  out.dims = data.dims();
  out.missing = data.missing;
  const Index n_miss = static_cast<Index>(data.missing.size());
  Eigen::MatrixXd m(static_cast<Index>(cells.size()), n_miss);
  Index r = 0;
  for (const auto& [draw, vals] : cells) {
    if (static_cast<Index>(vals.size()) != n_miss)
      throw std::runtime_error(path + ": draw " + std::to_string(draw) +
                               " does not cover every masked cell");
    for (const auto& [col, v] : vals) m(r, col) = v;
    ++r;
  }
  out.predictive.push_back(m);
  out.structural.push_back(std::move(m));
  out.scalar_traces.emplace_back();
  out.compute_summaries();
  return out;
}

// One row per masked cell: i1..iN,mean,sd,q025,q975.
inline void write_summary_csv(const std::string& path, const ImputationDraws& draws,
                              const std::vector<EntrySummary>& summary) {
  if (summary.size() != static_cast<std::size_t>(draws.n_missing()))
    throw std::invalid_argument("write_summary_csv: summary size mismatch");
  auto f = detail::open_out(path);
  const int order = static_cast<int>(draws.dims.size());
  for (int k = 0; k < order; ++k) f << "i" << (k + 1) << ",";
  f << "mean,sd,q025,q975\n";
  std::vector<Index> idx(order);
  for (Index j = 0; j < draws.n_missing(); ++j) {
    from_linear(draws.dims, draws.missing[j], idx);
    for (int k = 0; k < order; ++k) f << (idx[k] + 1) << ",";
    f << detail::fmt_double(summary[j].mean) << "," << detail::fmt_double(summary[j].sd)
      << "," << detail::fmt_double(summary[j].q025) << ","
      << detail::fmt_double(summary[j].q975) << "\n";
  }
}

inline nlohmann::json convergence_to_json(const ConvergenceReport& rep) {
  nlohmann::json j;
  j["available"] = true;
  j["threshold"] = rep.threshold;
  j["max_srf"] = rep.max_srf;
  j["converged"] = rep.converged;
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : rep.items) {
    nlohmann::json o;
    o["name"] = it.name;
    if (it.degenerate) o["degenerate"] = true;
    else o["srf"] = it.srf;
    items.push_back(std::move(o));
  }
  j["items"] = std::move(items);
  return j;
}

inline void write_convergence_json(const std::string& path, const ConvergenceReport* rep) {
  nlohmann::json j;
  if (rep == nullptr) j["available"] = false;  // fewer than two chains
  else j = convergence_to_json(*rep);
  auto f = detail::open_out(path);
  f << j.dump(2) << "\n";
}

inline void write_manifest_json(const std::string& path, const std::string& command,
                                const nlohmann::json& config_echo,
                                const std::vector<std::string>& outputs, double wall_seconds,
                                const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["command"] = command;
  j["config"] = config_echo;
  j["outputs"] = outputs;
  j["wall_seconds"] = wall_seconds;
  for (const auto& [key, value] : extra.items()) j[key] = value;
  auto f = detail::open_out(path);
  f << j.dump(2) << "\n";
}

inline std::string error_json(const std::string& message) {
  nlohmann::json j;
  j["error"]["message"] = message;
  return j.dump();
}

inline void write_diversity_csv(const std::string& path, const DiversityTrend& trend) {
  auto f = detail::open_out(path);
  f << "time,point,lo,hi,bounds_available,n_subjects\n";
  for (const auto& r : trend.rows) {
    f << r.time << ",";
    if (std::isnan(r.point)) f << "NA,";
    else f << detail::fmt_double(r.point) << ",";
    if (r.bounds_available)
      f << detail::fmt_double(r.lo) << "," << detail::fmt_double(r.hi) << ",1,";
    else f << "NA,NA,0,";
    f << r.n_subjects << "\n";
  }
}

inline void write_diagnostics_json(const std::string& path, const Diagnostics& d) {
  nlohmann::json j;
  j["mean"] = d.mean;
  j["sd"] = d.sd;
  j["per_taxon"] = d.per_taxon;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& b : d.histogram) {
    nlohmann::json o;
    o["lo"] = b.lo;
    o["hi"] = b.hi;
    o["count"] = b.count;
    hist.push_back(std::move(o));
  }
  j["histogram"] = std::move(hist);
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : d.slices) {
    nlohmann::json o;
    o["time"] = s.time;
    o["n_subjects"] = s.n_subjects;
    o["skipped"] = s.skipped;
    if (!s.skipped) {
      nlohmann::json corr = nlohmann::json::array();
      for (Index a = 0; a < s.corr.rows(); ++a) {
        nlohmann::json row = nlohmann::json::array();
        for (Index b = 0; b < s.corr.cols(); ++b) {
          if (s.defined(a, b)) row.push_back(s.corr(a, b));
          else row.push_back(nullptr);  // undefined pair, not a number
        }
        corr.push_back(std::move(row));
      }
      o["correlation"] = std::move(corr);
    }
    slices.push_back(std::move(o));
  }
  j["slices"] = std::move(slices);
  auto f = detail::open_out(path);
  f << j.dump(2) << "\n";
}

}  // namespace tenmi
