// bnnvs: command-line front end.
//
//   bnnvs run --config cfg.json [--out dir] [--seed u64] [--threads T]
//   bnnvs importance --weights w.json --data d.csv --noise-sd s [--normalized] [--threads T]
//   bnnvs select --draws draws.csv --alpha a
//   bnnvs nullband --m M --reps R --seed u64
//   bnnvs generate --kind neural --n 200 --P 25 --seed 1 --out data.csv
//   bnnvs sample --data d.csv --noise-sd s --out chain.ndjson
//
// Results go to stdout (CSV or JSON) unless --out is given. Failures exit
// nonzero and print {"error": code, "message": ...} on stderr.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "bnnvs.hpp"
#include "bnnvs/csv.hpp"

using namespace bnnvs;

namespace {

int fail(const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << '\n';
  return 1;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_csv(in);
}

/// A weights file holds either one NetworkWeights object or a chain checkpoint.
std::vector<NetworkWeights> read_weights_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const auto whole = nlohmann::json::parse(text, nullptr, false);
  if (!whole.is_discarded() && whole.is_object() && whole.contains("L"))
    return {weights_from_json(whole)};
  std::istringstream lines(text);
  return read_chain_checkpoint(lines).chain.draws;
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out);
  if (!f) throw IoError("cannot open " + out);
  f << text;
  if (!f) throw IoError("failed writing " + out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian ReLU-network variable selection"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Run a simulation experiment grid");
  std::string config_path, run_out;
  std::optional<std::uint64_t> run_seed;
  std::optional<int> run_threads;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", run_out, "Output directory (overrides config)");
  run->add_option("--seed", run_seed, "Base seed (overrides config)");
  run->add_option("--threads", run_threads, "Concurrent cells (overrides config)");

  // importance
  auto* imp = app.add_subcommand("importance", "Centered variable importances per draw");
  std::string weights_path, data_path, imp_out;
  double noise_sd = 1.0;
  bool normalized = false;
  int imp_threads = 1;
  double ridge = 1e-8;
  imp->add_option("--weights", weights_path, "Weights JSON or chain checkpoint")->required();
  imp->add_option("--data", data_path, "Dataset CSV (x1..xP[,y])")->required();
  imp->add_option("--noise-sd", noise_sd, "Known noise sd")->required();
  imp->add_flag("--normalized", normalized, "Divide by n");
  imp->add_option("--threads", imp_threads, "Shard threads");
  imp->add_option("--ridge", ridge, "Gram ridge factor");
  imp->add_option("--out", imp_out, "Write CSV here (plus .json sidecar)");

  // select
  auto* sel = app.add_subcommand("select", "Simultaneous band and selected variables");
  std::string draws_path, sel_out;
  double alpha = 0.05;
  sel->add_option("--draws", draws_path, "Importance draws CSV (psi_1..psi_P)")->required();
  sel->add_option("--alpha", alpha, "1 - credible level")->required();
  sel->add_option("--out", sel_out, "Write JSON here");

  // nullband
  auto* nb = app.add_subcommand("nullband", "Monte Carlo null band of the CvM statistic");
  long nb_m = 0, nb_reps = 0;
  std::uint64_t nb_seed = 1;
  std::vector<double> nb_levels{0.05, 0.5, 0.95};
  int nb_threads = 1;
  nb->add_option("--m", nb_m, "Draws per replication")->required();
  nb->add_option("--reps", nb_reps, "Replications (>= 100)")->required();
  nb->add_option("--seed", nb_seed, "Seed")->required();
  nb->add_option("--levels", nb_levels, "Quantile levels");
  nb->add_option("--threads", nb_threads, "Worker threads");

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  std::string gen_kind = "neural", gen_out;
  GeneratorSpec gspec;
  gen->add_option("--kind", gen_kind, "linear | neural | complex");
  gen->add_option("--n", gspec.n, "Sample size");
  gen->add_option("--P", gspec.P, "Dimension (>= 5)");
  gen->add_option("--seed", gspec.seed, "Seed");
  gen->add_option("--noise-sd", gspec.noise_sd, "Noise sd");
  gen->add_option("--neural-L", gspec.neural_depth, "Neural truth depth");
  gen->add_option("--neural-K", gspec.neural_width, "Neural truth width");
  gen->add_option("--out", gen_out, "Output CSV path")->required();

  // sample
  auto* smp = app.add_subcommand("sample", "Run HMC and write a chain checkpoint");
  std::string smp_data, smp_out;
  double smp_noise = 1.0, prior_var = 0.1;
  int smp_L = 2, smp_K = 50;
  HmcConfig hcfg;
  smp->add_option("--data", smp_data, "Dataset CSV")->required();
  smp->add_option("--noise-sd", smp_noise, "Known noise sd");
  smp->add_option("--L", smp_L, "Hidden layers");
  smp->add_option("--K", smp_K, "Width");
  smp->add_option("--prior-variance", prior_var, "Prior variance");
  smp->add_option("--draws", hcfg.n_draws, "Retained draws");
  smp->add_option("--warmup", hcfg.warmup, "Warmup iterations");
  smp->add_option("--leapfrog", hcfg.leapfrog_steps, "Leapfrog steps");
  smp->add_option("--seed", hcfg.seed, "Chain seed");
  smp->add_option("--out", smp_out, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", "usage_error"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }

  try {
    if (*run) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      if (!run_out.empty()) cfg.output_dir = run_out;
      if (run_seed) cfg.seed = *run_seed;
      if (run_threads) cfg.threads = *run_threads;
      const ExperimentReport rep = run_experiment(cfg);
      long failed = 0;
      for (const auto& r : rep.records) failed += r.ok ? 0 : 1;
      std::cout << nlohmann::json{{"records", rep.records.size()},
                                  {"failed", failed},
                                  {"output_dir", cfg.output_dir},
                                  {"config_hash", rep.config_hash}}
                       .dump()
                << '\n';
    } else if (*imp) {
      const auto draws = read_weights_file(weights_path);
      const Dataset d = dataset_from_csv(read_csv_file(data_path), noise_sd);
      PosteriorChain chain;
      chain.draws = draws;
      const ImportanceDraws out = importance_draws(chain, d.X, noise_sd, normalized, imp_threads, ridge);
      if (imp_out.empty()) {
        write_draws_csv(std::cout, out.values);
      } else {
        export_importance_draws(out, imp_out);
      }
    } else if (*sel) {
      const CsvTable t = read_csv_file(draws_path);
      const SelectionResult r = select_variables(simultaneous_band(t.data, alpha));
      write_or_print(sel_out, to_json(r).dump(2) + "\n");
    } else if (*nb) {
      const CvmNullBand b = cvm_null_band(nb_m, nb_reps, nb_levels, nb_seed, nb_threads);
      std::cout << to_json(b).dump(2) << '\n';
    } else if (*gen) {
      gspec.kind = generator_kind_from_string(gen_kind);
      export_dataset(gen_dataset(gspec), gen_out);
      std::cout << nlohmann::json{{"written", gen_out}}.dump() << '\n';
    } else if (*smp) {
      const Dataset d = dataset_from_csv(read_csv_file(smp_data), smp_noise);
      const PriorSpec prior = PriorSpec::from_variance(prior_var);
      const NetworkArch arch{smp_L, smp_K, static_cast<int>(d.dim()), {}, {}};
      const PosteriorChain chain = hmc_sample(prior_init(arch, prior, hcfg.seed), d, prior, hcfg);
      std::ofstream f(smp_out);
      if (!f) throw IoError("cannot open " + smp_out);
      write_chain_checkpoint(f, chain, hcfg);
      std::cout << nlohmann::json{{"written", smp_out},
                                  {"accept_rate", chain.accept_rate},
                                  {"n_divergent", chain.n_divergent}}
                       .dump()
                << '\n';
    }
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal_error", e.what());
  }
  return 0;
}
