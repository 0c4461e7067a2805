#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace bnnvs;
using namespace bnnvs::testing;

namespace {

// Batch-means standard error; robust to the mild autocorrelation of HMC.
double batch_mean_se(const std::vector<double>& v, int batches = 40) {
  const std::size_t per = v.size() / static_cast<std::size_t>(batches);
  std::vector<double> means(static_cast<std::size_t>(batches));
  for (int b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += v[b * per + i];
    means[static_cast<std::size_t>(b)] = s / static_cast<double>(per);
  }
  double mu = 0.0;
  for (double m : means) mu += m;
  mu /= batches;
  double var = 0.0;
  for (double m : means) var += (m - mu) * (m - mu);
  var /= (batches - 1);
  return std::sqrt(var / batches);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double oracle_log_post(const NetworkWeights& w, const Dataset& d, double prior_sd) {
  double lp = -0.5 * flatten(w).squaredNorm() / (prior_sd * prior_sd);
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    const double r = d.y(i) - oracle_forward(w, to_std(d.X.row(i).transpose()));
    lp -= 0.5 * r * r / (d.noise_sd * d.noise_sd);
  }
  return lp;
}

GradFn gaussian_1d() {
  return [](const Vector& t) { return std::make_pair(-0.5 * t.squaredNorm(), Vector(-t)); };
}

}  // namespace

TEST(LogPosterior, ZeroWeightsZeroData) {
  const NetworkWeights w = NetworkWeights::zeros({2, 3, 2, {}, {}});
  Dataset d{Matrix::Constant(4, 2, 0.5), Vector::Zero(4), 1.0};
  auto [lp, g] = log_posterior_and_grad(w, d, PriorSpec{});
  EXPECT_EQ(lp, 0.0);
  EXPECT_EQ(g.norm(), 0.0);
}

TEST(LogPosterior, OneUnitHandComputation) {
  // f(x) = c + b relu(a x); one observation (x, y).
  const double a = 0.7, b = -1.3, c = 0.4, x = 0.9, y = 2.0, s = 0.5, sig = 2.0;
  NetworkWeights w = NetworkWeights::zeros({1, 1, 1, {}, {}});
  w.W1(0, 0) = a;
  w.beta(0) = b;
  w.b0 = c;
  Dataset d{Matrix::Constant(1, 1, x), Vector::Constant(1, y), s};
  auto [lp, g] = log_posterior_and_grad(w, d, PriorSpec{sig});
  const double f = c + b * a * x;
  const double r = (y - f) / (s * s);
  EXPECT_NEAR(lp, -0.5 * (y - f) * (y - f) / (s * s) - 0.5 * (a * a + b * b + c * c) / (sig * sig), 1e-12);
  EXPECT_NEAR(g(0), r * b * x - a / (sig * sig), 1e-12);
  EXPECT_NEAR(g(1), r * a * x - b / (sig * sig), 1e-12);
  EXPECT_NEAR(g(2), r - c / (sig * sig), 1e-12);
}

TEST(LogPosterior, GradientMatchesFiniteDifferences) {
  Rng rng(101);
  for (int t = 0; t < 10; ++t) {
    const NetworkWeights w = NetworkWeights::random({1 + t % 3, 5, 3, {}, {}}, 0.8, rng);
    Dataset d{random_design(20, 3, rng), Vector::Zero(20), 0.7};
    for (Eigen::Index i = 0; i < 20; ++i) d.y(i) = rng.normal();
    bool interior = true;
    for (Eigen::Index i = 0; i < 20; ++i)
      interior &= min_abs_preactivation(w, to_std(d.X.row(i).transpose())) > 1e-3;
    if (!interior) continue;
    const PriorSpec prior{0.9};
    auto [lp, g] = log_posterior_and_grad(w, d, prior);
    EXPECT_NEAR(lp, oracle_log_post(w, d, prior.weight_sd), 1e-10 * (1 + std::abs(lp)));
    const Vector theta = flatten(w);
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      Vector up = theta, dn = theta;
      up(j) += 1e-6;
      dn(j) -= 1e-6;
      const double fd = (oracle_log_post(unflatten(up, w.arch()), d, prior.weight_sd) -
                         oracle_log_post(unflatten(dn, w.arch()), d, prior.weight_sd)) /
                        2e-6;
      EXPECT_LE(std::abs(g(j) - fd), 1e-5 * (1.0 + std::abs(g(j)))) << "param " << j;
    }
  }
}

TEST(LogPosterior, NonFiniteIsNumericError) {
  NetworkWeights w = NetworkWeights::zeros({1, 2, 1, {}, {}});
  w.beta(0) = 1e300;
  w.W1(0, 0) = 1e300;
  Dataset d{Matrix::Constant(1, 1, 1.0), Vector::Zero(1), 1.0};
  EXPECT_THROW(log_posterior_and_grad(w, d, PriorSpec{}), NumericError);
}

TEST(Flatten, RoundTrip) {
  Rng rng(3);
  const NetworkWeights w = NetworkWeights::random({3, 4, 2, {}, {}}, 1.0, rng);
  EXPECT_TRUE(unflatten(flatten(w), w.arch()) == w);
}

TEST(Leapfrog, ZeroStepsIsIdentity) {
  const Vector q = Vector::Constant(3, 0.3), p = Vector::Constant(3, -1.0);
  auto [q1, p1] = leapfrog(q, p, 0.1, 0, gaussian_1d());
  EXPECT_EQ(q1, q);
  EXPECT_EQ(p1, p);
}

TEST(Leapfrog, Reversible) {
  Rng rng(7);
  const NetworkWeights w = NetworkWeights::random({2, 4, 2, {}, {}}, 0.5, rng);
  Dataset d{random_design(10, 2, rng), Vector::Zero(10), 1.0};
  const GradFn fn = [&](const Vector& t) { return log_posterior_and_grad(unflatten(t, w.arch()), d, PriorSpec{}); };
  const Vector q = flatten(w);
  Vector p(q.size());
  for (Eigen::Index j = 0; j < p.size(); ++j) p(j) = rng.normal();
  auto [q1, p1] = leapfrog(q, p, 1e-3, 20, fn);
  auto [q2, p2] = leapfrog(q1, Vector(-p1), 1e-3, 20, fn);
  EXPECT_LT((q2 - q).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((p2 + p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Leapfrog, EnergyDriftOnGaussian) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const Vector q = Vector::Constant(1, rng.normal());
    const Vector p = Vector::Constant(1, rng.normal());
    auto [q1, p1] = leapfrog(q, p, 0.01, 20, gaussian_1d());
    const double h0 = 0.5 * q.squaredNorm() + 0.5 * p.squaredNorm();
    const double h1 = 0.5 * q1.squaredNorm() + 0.5 * p1.squaredNorm();
    EXPECT_LE(std::abs(h1 - h0), 1e-4);
  }
}

TEST(Leapfrog, NonFiniteFlagsDivergence) {
  const GradFn bad = [](const Vector& t) {
    return std::make_pair(t(0) > 0.5 ? NAN : 0.0, Vector(Vector::Zero(1)));
  };
  LeapfrogResult r = leapfrog(Vector::Zero(1), Vector::Ones(1), 0.1, 20, bad, 0.0, Vector::Zero(1));
  EXPECT_TRUE(r.divergent);
  EXPECT_THROW(leapfrog(Vector::Zero(1), Vector::Ones(1), 0.0, 1, bad), ConfigError);
}

TEST(AdaptStep, ConvergesAtTarget) {
  DualAveraging s = DualAveraging::start(0.01, 0.75);
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 500; ++i) {
    prev = step;
    std::tie(s, step) = adapt_step(s, 0.75);
  }
  EXPECT_LT(std::abs(step - prev) / prev, 1e-3);
}

TEST(AdaptStep, MonotoneUnderConstantFeedback) {
  for (double a : {0.0, 1.0}) {
    DualAveraging s = DualAveraging::start(0.01, 0.75);
    double step = 0.0, prev = a == 0.0 ? INFINITY : 0.0;
    for (int i = 0; i < 200; ++i) {
      std::tie(s, step) = adapt_step(s, a);
      EXPECT_GT(step, 0.0);
      if (a == 0.0) {
        EXPECT_LT(step, prev);
      } else {
        EXPECT_GT(step, prev);
      }
      prev = step;
    }
  }
}

TEST(AdaptStep, RejectsOutOfRange) {
  EXPECT_THROW(adapt_step(DualAveraging::start(0.01, 0.75), 1.5), ConfigError);
}

TEST(HmcSample, PriorOnlyTarget) {
  const NetworkArch arch{1, 3, 2, {}, {}};
  const PriorSpec prior{};
  HmcConfig cfg;
  cfg.n_draws = 4000;
  cfg.warmup = 1000;
  cfg.seed = 17;
  const PosteriorChain chain = hmc_sample(prior_init(arch, prior, cfg.seed), Dataset{}, prior, cfg);
  ASSERT_EQ(chain.draws.size(), 4000u);
  EXPECT_NEAR(chain.accept_rate, cfg.target_accept, 0.15);
  EXPECT_EQ(chain.n_divergent, 0);
  const Eigen::Index D = chain.draws[0].size();
  for (Eigen::Index j = 0; j < D; ++j) {
    std::vector<double> v;
    for (const auto& w : chain.draws) v.push_back(flatten(w)(j));
    // Antithetic HMC draws can make batch-means SE smaller than iid; use the larger.
    const double se = std::max(batch_mean_se(v), prior.weight_sd / std::sqrt(4000.0));
    EXPECT_LT(std::abs(mean(v)), 3.0 * se) << "coordinate " << j;
  }
}

TEST(HmcSample, StandardNormal2dSecondMoments) {
  // W1 (1x1) and beta with b0 frozen: a 2-D standard normal under weight_sd = 1.
  const NetworkArch arch{1, 1, 1, {}, {}};
  HmcConfig cfg;
  cfg.n_draws = 20000;
  cfg.warmup = 2000;
  cfg.seed = 5;
  cfg.sample_bias = false;
  NetworkWeights init = NetworkWeights::zeros(arch);
  init.W1(0, 0) = 0.5;
  init.beta(0) = -0.5;
  const PosteriorChain chain = hmc_sample(init, Dataset{}, PriorSpec{1.0}, cfg);
  double s11 = 0, s22 = 0, s12 = 0;
  for (const auto& w : chain.draws) {
    s11 += w.W1(0, 0) * w.W1(0, 0);
    s22 += w.beta(0) * w.beta(0);
    s12 += w.W1(0, 0) * w.beta(0);
    EXPECT_EQ(w.b0, 0.0);
  }
  const double M = static_cast<double>(chain.draws.size());
  EXPECT_NEAR(s11 / M, 1.0, 0.05);
  EXPECT_NEAR(s22 / M, 1.0, 0.05);
  EXPECT_NEAR(s12 / M, 0.0, 0.05);
  EXPECT_EQ(chain.n_divergent, 0);
}

TEST(HmcSample, SeedDeterminism) {
  Rng rng(9);
  const NetworkArch arch{2, 4, 3, {}, {}};
  Dataset d{random_design(30, 3, rng), Vector::Zero(30), 0.5};
  for (Eigen::Index i = 0; i < 30; ++i) d.y(i) = d.X(i, 0) + 0.5 * rng.normal();
  HmcConfig cfg;
  cfg.n_draws = 50;
  cfg.warmup = 50;
  cfg.seed = 123;
  const auto a = hmc_sample(prior_init(arch, {}, 123), d, {}, cfg);
  const auto b = hmc_sample(prior_init(arch, {}, 123), d, {}, cfg);
  ASSERT_EQ(a.draws.size(), b.draws.size());
  for (std::size_t m = 0; m < a.draws.size(); ++m) EXPECT_TRUE(a.draws[m] == b.draws[m]);
  EXPECT_EQ(a.log_posts, b.log_posts);
  cfg.seed = 124;
  const auto c = hmc_sample(prior_init(arch, {}, 123), d, {}, cfg);
  EXPECT_FALSE(c.draws.back() == a.draws.back());
}

TEST(HmcSample, ConjugateLinearRegression) {
  // K = 1, L = 1, W1 fixed positive and b0 frozen at 0: only beta moves, and
  // the model is Bayesian linear regression on phi_i = w x_i.
  const double w1 = 0.8, s = 0.5, sig = 1.0;
  const long n = 40;
  Rng rng(202);
  Dataset d{random_design(n, 1, rng), Vector::Zero(n), s};
  for (long i = 0; i < n; ++i) d.y(i) = 1.5 * w1 * d.X(i, 0) + s * rng.normal();
  NetworkWeights init = NetworkWeights::zeros({1, 1, 1, {}, {}});
  init.W1(0, 0) = w1;
  HmcConfig cfg;
  cfg.n_draws = 8000;
  cfg.warmup = 1000;
  cfg.sample_hidden = false;
  cfg.sample_bias = false;
  const PosteriorChain chain = hmc_sample(init, d, PriorSpec{sig}, cfg);

  double sxx = 0, sxy = 0;
  for (long i = 0; i < n; ++i) {
    const double phi = w1 * d.X(i, 0);
    sxx += phi * phi;
    sxy += phi * d.y(i);
  }
  const double prec = sxx / (s * s) + 1.0 / (sig * sig);
  const double post_mean = (sxy / (s * s)) / prec;
  const double post_sd = 1.0 / std::sqrt(prec);

  std::vector<double> b, b2;
  for (const auto& dw : chain.draws) {
    EXPECT_EQ(dw.W1(0, 0), w1);
    EXPECT_EQ(dw.b0, 0.0);
    b.push_back(dw.beta(0));
    b2.push_back((dw.beta(0) - post_mean) * (dw.beta(0) - post_mean));
  }
  const double se_mean = std::max(batch_mean_se(b), post_sd / std::sqrt(8000.0));
  EXPECT_LT(std::abs(mean(b) - post_mean), 3.0 * se_mean);
  const double var_hat = mean(b2);
  const double se_var = std::max(batch_mean_se(b2), std::sqrt(2.0) * post_sd * post_sd / std::sqrt(8000.0));
  EXPECT_LT(std::abs(var_hat - post_sd * post_sd), 3.0 * se_var);
}

TEST(HmcSample, ConfigValidation) {
  HmcConfig cfg;
  cfg.target_accept = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.sample_hidden = cfg.sample_beta = cfg.sample_bias = false;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(PriorSpec{0.0}.validate(), ConfigError);
}

TEST(HmcSample, AllDivergentIsSamplerError) {
  const NetworkArch arch{1, 2, 1, {}, {}};
  HmcConfig cfg;
  cfg.n_draws = 5;
  cfg.warmup = 0;
  cfg.init_step = 1e6;
  EXPECT_THROW(hmc_sample(prior_init(arch, {}, 1), Dataset{}, {}, cfg), SamplerError);
}

TEST(Checkpoint, RoundTrip) {
  const NetworkArch arch{2, 3, 2, {}, {}};
  HmcConfig cfg;
  cfg.n_draws = 10;
  cfg.warmup = 10;
  const PosteriorChain chain = hmc_sample(prior_init(arch, {}, 1), Dataset{}, {}, cfg);
  std::stringstream ss;
  write_chain_checkpoint(ss, chain, cfg);
  const ChainCheckpoint back = read_chain_checkpoint(ss);
  EXPECT_EQ(back.header["seed"].get<std::uint64_t>(), cfg.seed);
  EXPECT_DOUBLE_EQ(back.header["accept_rate"].get<double>(), chain.accept_rate);
  ASSERT_EQ(back.chain.draws.size(), chain.draws.size());
  for (std::size_t m = 0; m < chain.draws.size(); ++m) EXPECT_TRUE(back.chain.draws[m] == chain.draws[m]);
}
