#pragma once

// Hamiltonian Monte Carlo over the flattened network weights.
//
// Model: y_i ~ N(f(x_i), s^2) with s known, iid N(0, weight_sd^2) prior on
// every parameter. Unit mass matrix, fixed trajectory length, Nesterov dual
// averaging of the step size during warmup.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bnnvs/net.hpp"

namespace bnnvs {

struct PriorSpec {
  double weight_sd = 0.31622776601683794;  // sqrt(0.1)

  static PriorSpec from_variance(double var) { return PriorSpec{std::sqrt(var)}; }
  void validate() const {
    if (!(weight_sd > 0.0)) throw ConfigError("prior weight_sd must be positive");
  }
};

struct HmcConfig {
  int n_draws = 2000;
  int warmup = 2000;
  int leapfrog_steps = 20;
  double target_accept = 0.75;
  double init_step = 0.01;
  std::uint64_t seed = 1;
  int thin = 1;
  // Parameter groups that move. Frozen groups stay at their initial value.
  bool sample_hidden = true;  // W1..W_L
  bool sample_beta = true;
  bool sample_bias = true;    // b0

  void validate() const {
    if (n_draws < 1) throw ConfigError("n_draws must be positive");
    if (warmup < 0) throw ConfigError("warmup must be nonnegative");
    if (leapfrog_steps < 1) throw ConfigError("leapfrog_steps must be positive");
    if (!(target_accept > 0.0 && target_accept < 1.0))
      throw ConfigError("target_accept must lie strictly between 0 and 1");
    if (!(init_step > 0.0)) throw ConfigError("init_step must be positive");
    if (thin < 1) throw ConfigError("thin must be positive");
    if (!sample_hidden && !sample_beta && !sample_bias)
      throw ConfigError("at least one parameter group must be sampled");
  }
};

struct PosteriorChain {
  std::vector<NetworkWeights> draws;
  double accept_rate = 0.0;
  double final_step = 0.0;
  Vector log_posts;
  long n_divergent = 0;   // post-warmup divergent trajectories
  long n_iterations = 0;  // post-warmup iterations
};

// ---------------------------------------------------------------------------
// Flat parameter layout: W1 (column-major), W_2..W_L, beta, b0.

inline Vector flatten(const NetworkWeights& w) {
  Vector theta(w.size());
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    theta.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    at += m.size();
  };
  put(w.W1);
  for (const auto& m : w.hidden) put(m);
  put(w.beta);
  theta(at) = w.b0;
  return theta;
}

inline NetworkWeights unflatten(const Vector& theta, const NetworkArch& arch) {
  NetworkWeights w = NetworkWeights::zeros(arch);
  if (theta.size() != w.size()) throw ConfigError("flat parameter length mismatch");
  Eigen::Index at = 0;
  auto take = [&](auto& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = theta.segment(at, m.size());
    at += m.size();
  };
  take(w.W1);
  for (auto& m : w.hidden) take(m);
  take(w.beta);
  w.b0 = theta(at);
  return w;
}

/// 1 for parameters that move, 0 for frozen ones.
inline Vector parameter_mask(const NetworkArch& arch, const HmcConfig& cfg) {
  const NetworkWeights z = NetworkWeights::zeros(arch);
  Vector mask(z.size());
  const Eigen::Index n_hidden = z.size() - arch.width - 1;
  mask.head(n_hidden).setConstant(cfg.sample_hidden ? 1.0 : 0.0);
  mask.segment(n_hidden, arch.width).setConstant(cfg.sample_beta ? 1.0 : 0.0);
  mask(z.size() - 1) = cfg.sample_bias ? 1.0 : 0.0;
  return mask;
}

/// Unnormalized log posterior and its gradient in the flat layout.
inline std::pair<double, Vector> log_posterior_and_grad(const NetworkWeights& w,
                                                        const Dataset& data,
                                                        const PriorSpec& prior) {
  prior.validate();
  const double inv_prior_var = 1.0 / (prior.weight_sd * prior.weight_sd);
  const Vector theta = flatten(w);
  double logp = -0.5 * inv_prior_var * theta.squaredNorm();
  Vector grad = -inv_prior_var * theta;
  if (data.n() == 0) {
    if (!std::isfinite(logp)) throw NumericError("non-finite log posterior");
    return {logp, grad};
  }
  const double inv_noise_var = 1.0 / (data.noise_sd * data.noise_sd);
  const BatchForward fb = forward_batch(w, data.X);
  const Vector r = (data.y - fb.out) * inv_noise_var;  // d loglik / d f
  logp += -0.5 * inv_noise_var * (data.y - fb.out).squaredNorm();

  const Eigen::Index K = w.width();
  const auto L = static_cast<std::size_t>(w.depth());
  std::vector<Matrix> gW(L);
  // delta_l = d loglik / d Z_l, n x K
  Matrix delta = (r * w.beta.transpose()).cwiseProduct(
      (fb.pre[L - 1].array() > 0.0).cast<double>().matrix());
  const Vector g_beta = fb.post[L - 1].transpose() * r;
  const double g_b0 = r.sum();
  for (std::size_t l = L - 1; l >= 1; --l) {
    gW[l] = delta.transpose() * fb.post[l - 1];
    delta = (delta * w.hidden[l - 1]).cwiseProduct(
        (fb.pre[l - 1].array() > 0.0).cast<double>().matrix());
  }
  gW[0] = delta.transpose() * data.X;

  Eigen::Index at = 0;
  for (std::size_t l = 0; l < L; ++l) {
    grad.segment(at, gW[l].size()) += Eigen::Map<const Vector>(gW[l].data(), gW[l].size());
    at += gW[l].size();
  }
  grad.segment(at, K) += g_beta;
  grad(at + K) += g_b0;
  if (!std::isfinite(logp) || !grad.allFinite()) throw NumericError("non-finite log posterior");
  return {logp, grad};
}

// ---------------------------------------------------------------------------
// Leapfrog integrator.

using GradFn = std::function<std::pair<double, Vector>(const Vector&)>;

struct LeapfrogResult {
  Vector position;
  Vector momentum;
  double log_density = 0.0;
  Vector grad;
  bool divergent = false;
};

/// Leapfrog with unit mass. `grad_at_start` is grad log density at `position`.
/// A non-finite state or NumericError from grad_fn flags divergence.
inline LeapfrogResult leapfrog(const Vector& position, const Vector& momentum, double step,
                               int n_steps, const GradFn& grad_fn, double log_density_at_start,
                               const Vector& grad_at_start, const Vector* mask = nullptr) {
  if (!(step > 0.0)) throw ConfigError("leapfrog step must be positive");
  if (n_steps < 0) throw ConfigError("leapfrog n_steps must be nonnegative");
  LeapfrogResult r{position, momentum, log_density_at_start, grad_at_start, false};
  if (n_steps == 0) return r;
  auto masked = [&](const Vector& g) -> Vector {
    return mask ? Vector(g.cwiseProduct(*mask)) : g;
  };
  try {
    r.momentum += 0.5 * step * masked(r.grad);
    for (int s = 0; s < n_steps; ++s) {
      r.position += step * r.momentum;
      std::tie(r.log_density, r.grad) = grad_fn(r.position);
      const double w = (s + 1 == n_steps) ? 0.5 : 1.0;
      r.momentum += w * step * masked(r.grad);
      if (!r.position.allFinite() || !r.momentum.allFinite() ||
          !std::isfinite(r.log_density)) {
        r.divergent = true;
        return r;
      }
    }
  } catch (const NumericError&) {
    r.divergent = true;
  }
  return r;
}

/// Convenience overload that evaluates the start point itself.
inline std::pair<Vector, Vector> leapfrog(const Vector& position, const Vector& momentum,
                                          double step, int n_steps, const GradFn& grad_fn) {
  if (n_steps == 0) return {position, momentum};
  auto [lp, g] = grad_fn(position);
  LeapfrogResult r = leapfrog(position, momentum, step, n_steps, grad_fn, lp, g);
  return {std::move(r.position), std::move(r.momentum)};
}

// ---------------------------------------------------------------------------
// Dual averaging (Nesterov 2009, as used for HMC step sizes).

struct DualAveraging {
  double target = 0.75;
  double mu = std::log(0.1);
  double gamma = 0.05;
  double t0 = 10.0;
  double kappa = 0.75;
  double h_bar = 0.0;
  double log_step_bar = 0.0;
  long t = 0;

  static DualAveraging start(double init_step, double target_accept) {
    DualAveraging s;
    s.target = target_accept;
    s.mu = std::log(10.0 * init_step);
    s.log_step_bar = std::log(init_step);
    return s;
  }

  double averaged_step() const { return std::exp(log_step_bar); }
};

/// One dual-averaging update. Returns the new state and the step to use next.
inline std::pair<DualAveraging, double> adapt_step(DualAveraging state, double accept_prob) {
  if (!(accept_prob >= 0.0 && accept_prob <= 1.0))
    throw ConfigError("accept_prob must lie in [0, 1]");
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double w = 1.0 / (t + state.t0);
  state.h_bar = (1.0 - w) * state.h_bar + w * (state.target - accept_prob);
  const double log_step = state.mu - std::sqrt(t) / state.gamma * state.h_bar;
  const double eta = std::pow(t, -state.kappa);
  state.log_step_bar = eta * log_step + (1.0 - eta) * state.log_step_bar;
  return {state, std::exp(log_step)};
}

// ---------------------------------------------------------------------------
// Sampler.

constexpr double kDivergenceThreshold = 1000.0;

/// Initial weights drawn from the prior with the chain's own stream.
inline NetworkWeights prior_init(const NetworkArch& arch, const PriorSpec& prior,
                                 std::uint64_t seed) {
  Rng rng(seed, 0x1417);
  return NetworkWeights::random(arch, prior.weight_sd, rng);
}

inline PosteriorChain hmc_sample(const NetworkWeights& init, const Dataset& data,
                                 const PriorSpec& prior, const HmcConfig& cfg) {
  cfg.validate();
  prior.validate();
  init.validate();
  if (data.n() > 0) {
    data.validate();
    if (data.dim() != init.input_dim()) throw ConfigError("data dimension does not match network");
  }
  const NetworkArch arch = init.arch();
  const Vector mask = parameter_mask(arch, cfg);
  const Vector frozen = flatten(init).cwiseProduct((1.0 - mask.array()).matrix());

  GradFn grad_fn = [&](const Vector& theta) {
    auto [lp, g] = log_posterior_and_grad(unflatten(theta, arch), data, prior);
    return std::make_pair(lp, Vector(g.cwiseProduct(mask)));
  };

  Rng rng(cfg.seed, 0xC4A1);
  Vector theta = flatten(init);
  auto [logp, grad] = grad_fn(theta);
  grad = grad.cwiseProduct(mask);

  DualAveraging da = DualAveraging::start(cfg.init_step, cfg.target_accept);
  double step = cfg.init_step;
  const long total = static_cast<long>(cfg.warmup) + static_cast<long>(cfg.n_draws) * cfg.thin;

  PosteriorChain chain;
  chain.draws.reserve(static_cast<std::size_t>(cfg.n_draws));
  chain.log_posts.resize(cfg.n_draws);
  long accepted = 0;
  long divergent_all = 0;
  Vector momentum(theta.size());

  for (long it = 0; it < total; ++it) {
    for (Eigen::Index j = 0; j < momentum.size(); ++j) momentum(j) = rng.normal() * mask(j);
    const double h0 = -logp + 0.5 * momentum.squaredNorm();
    LeapfrogResult prop =
        leapfrog(theta, momentum, step, cfg.leapfrog_steps, grad_fn, logp, grad, &mask);
    double accept_prob = 0.0;
    bool divergent = prop.divergent;
    if (!divergent) {
      const double h1 = -prop.log_density + 0.5 * prop.momentum.squaredNorm();
      const double dh = h1 - h0;
      if (!std::isfinite(dh) || std::abs(dh) > kDivergenceThreshold) {
        divergent = true;
      } else {
        accept_prob = dh <= 0.0 ? 1.0 : std::exp(-dh);
      }
    }
    const double u = rng.uniform();
    const bool accept = !divergent && u < accept_prob;
    if (accept) {
      theta = prop.position.cwiseProduct(mask) + frozen;
      logp = prop.log_density;
      grad = std::move(prop.grad);
    }
    if (divergent) ++divergent_all;

    if (it < cfg.warmup) {
      std::tie(da, step) = adapt_step(da, accept_prob);
      if (it + 1 == cfg.warmup) step = da.averaged_step();
      continue;
    }
    ++chain.n_iterations;
    if (accept) ++accepted;
    if (divergent) ++chain.n_divergent;
    const long since = it - cfg.warmup + 1;
    if (since % cfg.thin == 0) {
      chain.log_posts(static_cast<Eigen::Index>(chain.draws.size())) = logp;
      chain.draws.push_back(unflatten(theta, arch));
    }
  }
  if (divergent_all == total)
    throw SamplerError("every HMC trajectory diverged (final step " + std::to_string(step) +
                       ", " + std::to_string(total) + " iterations)");
  chain.accept_rate =
      chain.n_iterations > 0 ? static_cast<double>(accepted) / chain.n_iterations : 0.0;
  chain.final_step = step;
  return chain;
}

// ---------------------------------------------------------------------------
// Checkpoint files: one JSON header line, then one NetworkWeights per line.

inline nlohmann::json to_json(const HmcConfig& c) {
  return {{"n_draws", c.n_draws},           {"warmup", c.warmup},
          {"leapfrog_steps", c.leapfrog_steps}, {"target_accept", c.target_accept},
          {"init_step", c.init_step},       {"seed", c.seed},
          {"thin", c.thin},                 {"sample_hidden", c.sample_hidden},
          {"sample_beta", c.sample_beta},   {"sample_bias", c.sample_bias}};
}

/// Reads fields present in `j` on top of `base`.
inline HmcConfig hmc_config_from_json(const nlohmann::json& j, HmcConfig base = {}) {
  try {
    base.n_draws = j.value("n_draws", base.n_draws);
    base.warmup = j.value("warmup", base.warmup);
    base.leapfrog_steps = j.value("leapfrog_steps", base.leapfrog_steps);
    base.target_accept = j.value("target_accept", base.target_accept);
    base.init_step = j.value("init_step", base.init_step);
    base.seed = j.value("seed", base.seed);
    base.thin = j.value("thin", base.thin);
    base.sample_hidden = j.value("sample_hidden", base.sample_hidden);
    base.sample_beta = j.value("sample_beta", base.sample_beta);
    base.sample_bias = j.value("sample_bias", base.sample_bias);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed hmc config: ") + e.what());
  }
  return base;
}

inline void write_chain_checkpoint(std::ostream& os, const PosteriorChain& chain,
                                   const HmcConfig& cfg) {
  nlohmann::json header = {{"seed", cfg.seed},
                           {"config", to_json(cfg)},
                           {"accept_rate", chain.accept_rate},
                           {"final_step", chain.final_step},
                           {"n_divergent", chain.n_divergent},
                           {"M", chain.draws.size()}};
  os << header.dump() << '\n';
  for (std::size_t m = 0; m < chain.draws.size(); ++m) {
    nlohmann::json rec = to_json(chain.draws[m]);
    rec["log_post"] = chain.log_posts(static_cast<Eigen::Index>(m));
    os << rec.dump() << '\n';
  }
  if (!os) throw IoError("failed writing chain checkpoint");
}

struct ChainCheckpoint {
  nlohmann::json header;
  PosteriorChain chain;
};

inline ChainCheckpoint read_chain_checkpoint(std::istream& is) {
  ChainCheckpoint out;
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty chain checkpoint");
  try {
    out.header = nlohmann::json::parse(line);
    std::vector<double> lps;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      out.chain.draws.push_back(weights_from_json(rec));
      lps.push_back(rec.value("log_post", 0.0));
    }
    out.chain.log_posts = Eigen::Map<const Vector>(lps.data(), static_cast<Eigen::Index>(lps.size()));
    out.chain.accept_rate = out.header.value("accept_rate", 0.0);
    out.chain.final_step = out.header.value("final_step", 0.0);
    out.chain.n_divergent = out.header.value("n_divergent", 0L);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed chain checkpoint: ") + e.what());
  }
  return out;
}

}  // namespace bnnvs
