#pragma once

// Experiment orchestration: grid of (kind, n, P) cells x replications, each
// running generate -> HMC -> importance draws -> band/selection ->
// diagnostics. Writes report.csv, one JSON per cell, and manifest.json.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "bnnvs/diagnostics.hpp"
#include "bnnvs/hmc.hpp"
#include "bnnvs/importance.hpp"
#include "bnnvs/select.hpp"
#include "bnnvs/synth.hpp"

namespace bnnvs {

struct ModelSpec {
  int depth = 2;
  int width = 50;
  double prior_variance = 0.1;
  double ridge = 1e-8;
  // Conjugate mode: input/hidden weights start at |prior draw| and stay
  // fixed together with b0; only beta is sampled.
  bool frozen_hidden = false;
};

struct GridSpec {
  std::vector<GeneratorKind> kinds{GeneratorKind::neural};
  std::vector<long> n{100};
  std::vector<int> P{25};
  double noise_sd = 1.0;
  Vector linear_beta = Vector::Ones(kTrueDim);
  int neural_depth = 2;
  int neural_width = 50;
  long mc_points = 100000;
};

struct ExperimentConfig {
  GridSpec generator;
  ModelSpec model;
  HmcConfig hmc;
  double alpha = 0.05;
  int replications = 20;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  int threads = 1;        // concurrent cells
  int shard_threads = 1;  // Algorithm-1 shards inside a cell
  long holdout = 2000;
  long null_reps = 1000;
  int importance_thin = 1;

  void validate() const {
    if (generator.kinds.empty() || generator.n.empty() || generator.P.empty())
      throw ConfigError("empty grid");
    if (replications < 1) throw ConfigError("replications must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (threads < 1 || shard_threads < 1) throw ConfigError("thread counts must be >= 1");
    if (holdout < 2) throw ConfigError("holdout must be >= 2");
    if (importance_thin < 1) throw ConfigError("importance_thin must be >= 1");
    if (!(model.prior_variance > 0.0)) throw ConfigError("prior_variance must be positive");
    NetworkArch{model.depth, model.width, 1, {}, {}}.validate();
    hmc.validate();
  }
};

struct CellSpec {
  GeneratorKind kind = GeneratorKind::neural;
  long n = 100;
  int P = 25;
  int replication = 0;

  std::string id() const {
    return to_string(kind) + "_n" + std::to_string(n) + "_P" + std::to_string(P) + "_r" +
           std::to_string(replication);
  }
};

struct CellRecord {
  CellSpec cell;
  bool ok = false;
  std::string error;
  double std_mse_f = std::numeric_limits<double>::quiet_NaN();
  double std_mse_psi = std::numeric_limits<double>::quiet_NaN();
  double std_mse_sd = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> cvm;  // one per true variable
  double null_q05 = 0.0, null_q50 = 0.0, null_q95 = 0.0;
  bool covered = false;
  double fdr = 0.0, power = 0.0;
  bool exact_recovery = false;
  double accept_rate = 0.0;
  long n_divergent = 0;
  double final_step = 0.0;
  double wall_clock = 0.0;
  nlohmann::json details;  // per-cell diagnostics
};

// ---------------------------------------------------------------------------
// Seeds.

inline std::uint64_t cell_seed(std::uint64_t base, const CellSpec& c) {
  std::uint64_t h = derive_seed(base, static_cast<std::uint64_t>(c.kind) + 1);
  h = derive_seed(h, static_cast<std::uint64_t>(c.n));
  h = derive_seed(h, static_cast<std::uint64_t>(c.P));
  return derive_seed(h, static_cast<std::uint64_t>(c.replication));
}

inline std::uint64_t null_band_seed(std::uint64_t base, long M) {
  return derive_seed(derive_seed(base, 0xB4D), static_cast<std::uint64_t>(M));
}

/// Pads a 5-input network with zero input columns up to P inputs.
inline NetworkWeights embed_network(const NetworkWeights& w, int P) {
  NetworkWeights out = w;
  out.W1 = Matrix::Zero(w.width(), P);
  out.W1.leftCols(w.input_dim()) = w.W1;
  return out;
}

/// Null CvM quantiles are shared by every cell with the same M.
class NullBandCache {
 public:
  NullBandCache(std::uint64_t base_seed, long reps) : seed_(base_seed), reps_(reps) {}

  CvmNullBand get(long M) {
    std::lock_guard lock(mu_);
    auto it = cache_.find(M);
    if (it != cache_.end()) return it->second;
    CvmNullBand b = cvm_null_band(M, reps_, {0.05, 0.5, 0.95}, null_band_seed(seed_, M));
    cache_.emplace(M, b);
    return b;
  }

 private:
  std::uint64_t seed_;
  long reps_;
  std::mutex mu_;
  std::map<long, CvmNullBand> cache_;
};

inline GeneratorSpec generator_for(const ExperimentConfig& cfg, const CellSpec& c) {
  GeneratorSpec g;
  g.kind = c.kind;
  g.n = c.n;
  g.P = c.P;
  g.noise_sd = cfg.generator.noise_sd;
  g.seed = derive_seed(cell_seed(cfg.seed, c), 1);
  g.linear_beta = cfg.generator.linear_beta;
  g.neural_depth = cfg.generator.neural_depth;
  g.neural_width = cfg.generator.neural_width;
  g.mc_points = cfg.generator.mc_points;
  return g;
}

namespace detail {

inline std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline double safe_std_mse(const Vector& a, const Vector& b) {
  try {
    return std_mse(a, b);
  } catch (const DegenerateError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace detail

/// Runs the full pipeline for one cell. Sampler and numeric failures are
/// captured in the record instead of propagating.
inline CellRecord run_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                           NullBandCache* null_cache = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  CellRecord rec;
  rec.cell = cell;
  try {
    const GeneratorSpec gspec = generator_for(cfg, cell);
    const SynthDataset synth = gen_dataset(gspec);

    const PriorSpec prior = PriorSpec::from_variance(cfg.model.prior_variance);
    const NetworkArch arch{cfg.model.depth, cfg.model.width, cell.P, {}, {}};
    HmcConfig hcfg = cfg.hmc;
    hcfg.seed = derive_seed(cell_seed(cfg.seed, cell), 2);
    NetworkWeights init = prior_init(arch, prior, hcfg.seed);
    if (cfg.model.frozen_hidden) {
      init.W1 = init.W1.cwiseAbs();
      for (auto& m : init.hidden) m = m.cwiseAbs();
      init.b0 = 0.0;
      hcfg.sample_hidden = false;
      hcfg.sample_bias = false;
    }
    const PosteriorChain chain = hmc_sample(init, synth.data, prior, hcfg);
    rec.accept_rate = chain.accept_rate;
    rec.n_divergent = chain.n_divergent;
    rec.final_step = chain.final_step;

    PosteriorChain used;
    for (std::size_t m = 0; m < chain.draws.size(); m += static_cast<std::size_t>(cfg.importance_thin))
      used.draws.push_back(chain.draws[m]);
    const ImportanceDraws imp = importance_draws(used, synth.data.X, synth.data.noise_sd, true,
                                                 cfg.shard_threads, cfg.model.ridge);
    const long M = imp.draws();
    const Vector psi_mean = imp.values.colwise().mean().transpose();
    Vector psi_sd(imp.dim());
    for (Eigen::Index p = 0; p < imp.dim(); ++p) psi_sd(p) = sample_sd(imp.values.col(p));

    // Prediction accuracy on fresh points.
    const Matrix Xh = heldout_design(gspec, cfg.holdout);
    const Vector f_star_h = synth.truth.evaluate(Xh);
    Vector f_hat = Vector::Zero(Xh.rows());
    for (const auto& w : chain.draws) f_hat += predict(w, Xh);
    f_hat /= static_cast<double>(chain.draws.size());
    rec.std_mse_f = detail::safe_std_mse(f_hat, f_star_h);
    rec.std_mse_psi = detail::safe_std_mse(psi_mean, synth.true_importance);

    // Selection.
    const CredibleBand band = simultaneous_band(imp, cfg.alpha);
    const SelectionResult sel = select_variables(band);
    const SelectionQuality q = selection_metrics(sel, synth.A0);
    rec.fdr = q.fdr;
    rec.power = q.power;
    rec.exact_recovery = q.exact_recovery;
    rec.covered = band_covers(band, synth.true_importance);

    // Normality of the posterior of each true variable's importance.
    NullBandCache local(cfg.seed, cfg.null_reps);
    const CvmNullBand null = (null_cache ? *null_cache : local).get(M);
    rec.null_q05 = null.at(0.05);
    rec.null_q50 = null.at(0.5);
    rec.null_q95 = null.at(0.95);
    for (int p : synth.A0) {
      double stat = std::numeric_limits<double>::quiet_NaN();
      try {
        stat = cvm_statistic(standardize(imp.values.col(p)));
      } catch (const DegenerateError&) {
      }
      rec.cvm.push_back(stat);
    }

    // Reference spread. Exact for network truths, indicative otherwise.
    BvmReference bvm;
    bool bvm_exact = false;
    if (cell.kind == GeneratorKind::neural) {
      const NetworkWeights truth_net = embed_network(synth.truth.network, cell.P);
      const FeatureBundle tb = build_feature_bundle(truth_net, synth.data.X,
                                                    {cfg.model.ridge, false});
      bvm = bvm_covariance(tb, truth_net.beta, synth.data.noise_sd);
      bvm_exact = true;
    } else {
      Eigen::Index best = 0;
      chain.log_posts.maxCoeff(&best);
      const FeatureBundle mb = build_feature_bundle(chain.draws[static_cast<std::size_t>(best)],
                                                    synth.data.X, {cfg.model.ridge, false});
      bvm = bvm_covariance_from_values(mb, synth.f_star_values, synth.data.noise_sd);
    }
    rec.std_mse_sd = detail::safe_std_mse(psi_sd, bvm.sd);

    std::vector<int> selected1;
    for (int p : sel.selected) selected1.push_back(p + 1);
    rec.details = {
        {"cell", cell.id()},
        {"generator_seed", gspec.seed},
        {"chain_seed", hcfg.seed},
        {"M", M},
        {"std_mse_f", rec.std_mse_f},
        {"std_mse_psi", rec.std_mse_psi},
        {"std_mse_sd", rec.std_mse_sd},
        {"cvm", rec.cvm},
        {"null_band", to_json(null)},
        {"bvm_sd", detail::to_std(bvm.sd)},
        {"bvm_exact", bvm_exact},
        {"bvm_rank_deficient", bvm.rank_deficient},
        {"psi_mean", detail::to_std(psi_mean)},
        {"psi_sd", detail::to_std(psi_sd)},
        {"true_importance", detail::to_std(synth.true_importance)},
        {"band", to_json(sel)},
        {"selected", selected1},
        {"covered", rec.covered},
        {"fdr", rec.fdr},
        {"power", rec.power},
        {"exact_recovery", rec.exact_recovery},
        {"accept_rate", rec.accept_rate},
        {"n_divergent", rec.n_divergent},
        {"final_step", rec.final_step}};
    rec.ok = true;
  } catch (const SamplerError& e) {
    rec.error = std::string(e.code()) + ": " + e.what();
  } catch (const NumericError& e) {
    rec.error = std::string(e.code()) + ": " + e.what();
  }
  rec.wall_clock =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (!rec.ok) rec.details = {{"cell", cell.id()}, {"error", rec.error}};
  rec.details["wall_clock"] = rec.wall_clock;
  return rec;
}

// ---------------------------------------------------------------------------
// Config (JSON).

inline nlohmann::json to_json(const ExperimentConfig& c) {
  std::vector<std::string> kinds;
  for (auto k : c.generator.kinds) kinds.push_back(to_string(k));
  return {{"generator",
           {{"kinds", kinds},
            {"n", c.generator.n},
            {"P", c.generator.P},
            {"noise_sd", c.generator.noise_sd},
            {"linear_beta", detail::to_std(c.generator.linear_beta)},
            {"neural_depth", c.generator.neural_depth},
            {"neural_width", c.generator.neural_width},
            {"mc_points", c.generator.mc_points}}},
          {"model",
           {{"L", c.model.depth},
            {"K", c.model.width},
            {"prior_variance", c.model.prior_variance},
            {"ridge", c.model.ridge},
            {"frozen_hidden", c.model.frozen_hidden}}},
          {"hmc", to_json(c.hmc)},
          {"alpha", c.alpha},
          {"replications", c.replications},
          {"output_dir", c.output_dir},
          {"seed", c.seed},
          {"threads", c.threads},
          {"shard_threads", c.shard_threads},
          {"holdout", c.holdout},
          {"null_reps", c.null_reps},
          {"importance_thin", c.importance_thin}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      if (g.contains("kinds")) {
        c.generator.kinds.clear();
        for (const auto& k : g.at("kinds")) c.generator.kinds.push_back(generator_kind_from_string(k));
      }
      c.generator.n = g.value("n", c.generator.n);
      c.generator.P = g.value("P", c.generator.P);
      c.generator.noise_sd = g.value("noise_sd", c.generator.noise_sd);
      if (g.contains("linear_beta")) {
        const auto b = g.at("linear_beta").get<std::vector<double>>();
        c.generator.linear_beta = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
      }
      c.generator.mc_points = g.value("mc_points", c.generator.mc_points);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.depth = m.value("L", c.model.depth);
      c.model.width = m.value("K", c.model.width);
      c.model.prior_variance = m.value("prior_variance", c.model.prior_variance);
      c.model.ridge = m.value("ridge", c.model.ridge);
      c.model.frozen_hidden = m.value("frozen_hidden", c.model.frozen_hidden);
    }
    // The neural truth defaults to the model's own architecture.
    c.generator.neural_depth = c.model.depth;
    c.generator.neural_width = c.model.width;
    if (j.contains("generator")) {
      c.generator.neural_depth = j["generator"].value("neural_depth", c.generator.neural_depth);
      c.generator.neural_width = j["generator"].value("neural_width", c.generator.neural_width);
    }
    if (j.contains("hmc")) c.hmc = hmc_config_from_json(j.at("hmc"), c.hmc);
    c.alpha = j.value("alpha", c.alpha);
    c.replications = j.value("replications", c.replications);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.shard_threads = j.value("shard_threads", c.shard_threads);
    c.holdout = j.value("holdout", c.holdout);
    c.null_reps = j.value("null_reps", c.null_reps);
    c.importance_thin = j.value("importance_thin", c.importance_thin);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  if (c.generator.linear_beta.size() != kTrueDim)
    throw ConfigError("linear_beta must have length 5");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return experiment_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

/// FNV-1a over the canonical JSON of the result-affecting fields.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  j.erase("shard_threads");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment.

struct ExperimentReport {
  std::vector<CellRecord> records;
  std::string config_hash;
};

inline std::vector<CellSpec> expand_grid(const ExperimentConfig& cfg) {
  std::vector<CellSpec> cells;
  for (auto kind : cfg.generator.kinds)
    for (long n : cfg.generator.n)
      for (int P : cfg.generator.P)
        for (int r = 0; r < cfg.replications; ++r) cells.push_back({kind, n, P, r});
  return cells;
}

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {
      "kind", "n", "P", "replication", "status", "std_mse_f", "std_mse_psi", "std_mse_sd",
      "cvm_1", "cvm_2", "cvm_3", "cvm_4", "cvm_5", "null_q05", "null_q50", "null_q95",
      "covered", "fdr", "power", "exact_recovery", "accept_rate", "n_divergent", "wall_clock",
      "error"};
  return cols;
}

inline void write_report_csv(std::ostream& os, const std::vector<CellRecord>& recs) {
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n' << std::setprecision(17);
  for (const auto& r : recs) {
    os << to_string(r.cell.kind) << ',' << r.cell.n << ',' << r.cell.P << ','
       << r.cell.replication << ',' << (r.ok ? "ok" : "failed") << ',' << r.std_mse_f << ','
       << r.std_mse_psi << ',' << r.std_mse_sd;
    for (int p = 0; p < kTrueDim; ++p)
      os << ',' << (p < static_cast<int>(r.cvm.size()) ? r.cvm[static_cast<std::size_t>(p)]
                                                       : std::numeric_limits<double>::quiet_NaN());
    std::string err = r.error;
    for (char& ch : err)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    os << ',' << r.null_q05 << ',' << r.null_q50 << ',' << r.null_q95 << ',' << r.covered << ','
       << r.fdr << ',' << r.power << ',' << r.exact_recovery << ',' << r.accept_rate << ','
       << r.n_divergent << ',' << r.wall_clock << ',' << err << '\n';
  }
}

/// Runs every cell (concurrently up to cfg.threads) and writes the outputs
/// under cfg.output_dir. Failed cells appear as failure records.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  const std::vector<CellSpec> cells = expand_grid(cfg);
  ExperimentReport report;
  report.config_hash = config_hash(cfg);
  report.records.resize(cells.size());
  NullBandCache nulls(cfg.seed, cfg.null_reps);
  parallel_for(cells.size(), cfg.threads,
               [&](std::size_t i) { report.records[i] = run_cell(cfg, cells[i], &nulls); });

  const fs::path out(cfg.output_dir);
  const fs::path manifest = out / "manifest.json";
  const fs::path manifest_tmp = out / "manifest.json.partial";
  try {
    fs::create_directories(out / "cells");
    std::vector<std::string> files{"report.csv"};
    {
      std::ofstream csv(out / "report.csv");
      if (!csv) throw IoError("cannot write " + (out / "report.csv").string());
      write_report_csv(csv, report.records);
      if (!csv) throw IoError("failed writing report.csv");
    }
    for (const auto& r : report.records) {
      const std::string rel = "cells/" + r.cell.id() + ".json";
      std::ofstream f(out / rel);
      if (!f) throw IoError("cannot write " + (out / rel).string());
      f << r.details.dump(2) << '\n';
      if (!f) throw IoError("failed writing " + rel);
      files.push_back(rel);
    }
    long failed = 0;
    for (const auto& r : report.records) failed += r.ok ? 0 : 1;
    const nlohmann::json man = {{"config", to_json(cfg)},
                                {"config_hash", report.config_hash},
                                {"records", report.records.size()},
                                {"failed", failed},
                                {"files", files}};
    {
      std::ofstream m(manifest_tmp);
      if (!m) throw IoError("cannot write manifest");
      m << man.dump(2) << '\n';
      if (!m) throw IoError("failed writing manifest");
    }
    fs::rename(manifest_tmp, manifest);
  } catch (const fs::filesystem_error& e) {
    std::error_code ec;
    fs::remove(manifest_tmp, ec);
    throw IoError(e.what());
  } catch (...) {
    std::error_code ec;
    fs::remove(manifest_tmp, ec);
    throw;
  }
  return report;
}

}  // namespace bnnvs
