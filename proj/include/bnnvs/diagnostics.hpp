#pragma once

// Empirical verification statistics: standardized MSE, Cramer-von Mises
// normality statistic with a Monte Carlo null band, and the asymptotic
// (BvM) reference spread of the centered importances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <vector>

#include "bnnvs/importance.hpp"
#include "bnnvs/select.hpp"

namespace bnnvs {

/// sum (f_hat - f_star)^2 / sum (f_star - mean f_star)^2, i.e. 1 - R^2.
inline double std_mse(const Vector& f_hat, const Vector& f_star) {
  if (f_hat.size() != f_star.size() || f_star.size() == 0)
    throw ConfigError("std_mse needs two nonempty vectors of equal length");
  const double denom = (f_star.array() - f_star.mean()).square().sum();
  if (!(denom > 0.0)) throw DegenerateError("std_mse: truth has zero variance");
  return (f_hat - f_star).squaredNorm() / denom;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Subtracts the sample mean and divides by the sample sd (divisor M-1).
inline Vector standardize(const Vector& v) {
  if (v.size() < 2) throw InsufficientDrawsError("standardize needs at least 2 values");
  const double mean = v.mean();
  const double sd = sample_sd(v);
  if (!(sd > kScaleFloor * (1.0 + std::abs(mean))))
    throw DegenerateError("standardize: sample sd is degenerate");
  return (v.array() - mean) / sd;
}

/// (1/M) sum_m [F_M(z_m) - Phi(z_m)]^2 where F_M is the empirical CDF of z,
/// F_M(t) = #{j : z_j <= t} / M.
inline double cvm_statistic(const Vector& z) {
  const auto M = static_cast<std::size_t>(z.size());
  if (M < 2) throw InsufficientDrawsError("cvm statistic needs at least 2 values");
  std::vector<double> sorted(z.data(), z.data() + M);
  std::sort(sorted.begin(), sorted.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < M;) {
    std::size_t j = i;
    while (j < M && sorted[j] == sorted[i]) ++j;
    const double ecdf = static_cast<double>(j) / static_cast<double>(M);
    const double gap = ecdf - normal_cdf(sorted[i]);
    acc += static_cast<double>(j - i) * gap * gap;
    i = j;
  }
  return acc / static_cast<double>(M);
}

struct CvmNullBand {
  std::map<double, double> quantiles;  // level -> statistic
  long M = 0;
  long n_rep = 0;

  double at(double level) const {
    auto it = quantiles.find(level);
    if (it == quantiles.end()) throw ConfigError("null band has no such level");
    return it->second;
  }
};

/// Null distribution of cvm_statistic(standardize(z)) for z iid N(0,1).
inline CvmNullBand cvm_null_band(long M, long n_rep, const std::vector<double>& levels,
                                 std::uint64_t seed, int threads = 1) {
  if (M < 2) throw ConfigError("null band needs M >= 2");
  if (n_rep < 100) throw ConfigError("null band needs at least 100 replications");
  for (double l : levels)
    if (!(l > 0.0 && l < 1.0)) throw ConfigError("null band levels must lie in (0, 1)");
  std::vector<double> stats(static_cast<std::size_t>(n_rep));
  parallel_for(stats.size(), threads, [&](std::size_t r) {
    Rng rng(seed, r);
    Vector z(M);
    for (long m = 0; m < M; ++m) z(m) = rng.normal();
    stats[r] = cvm_statistic(standardize(z));
  });
  CvmNullBand band;
  band.M = M;
  band.n_rep = n_rep;
  for (double l : levels) band.quantiles[l] = lower_quantile(stats, l);
  return band;
}

inline nlohmann::json to_json(const CvmNullBand& b) {
  nlohmann::json q = nlohmann::json::object();
  for (const auto& [level, value] : b.quantiles) {
    std::ostringstream key;
    key << level;
    q[key.str()] = value;
  }
  return {{"M", b.M}, {"n_rep", b.n_rep}, {"quantiles", q}};
}

// ---------------------------------------------------------------------------
// BvM reference spread.
//
// H_p = Phi G^{-1} A_p G^{-1} Phi' (n x n). For f0 = Phi beta0 this gives
// H_p f0 = Phi G^{-1} A_p beta0. With known noise sd s the limit variance of
// sqrt(n)(psi^c_p - psi_hat^c_p) is 4 s^2 ||H_p f0||_n^2.

/// H_p f0 for a network truth, f0 = Phi beta0.
inline Vector hp_times_truth(const FeatureBundle& b, const Vector& beta0, Eigen::Index p) {
  const Matrix dphi = b.gradient_features(p);
  return b.Phi * (b.gram_inv * (dphi.transpose() * (dphi * beta0)));
}

/// H_p f for arbitrary function values f at the sample points.
inline Vector hp_times_values(const FeatureBundle& b, const Vector& f, Eigen::Index p) {
  if (f.size() != b.n()) throw ConfigError("function values length does not match bundle");
  const Matrix dphi = b.gradient_features(p);
  const Vector coef = b.gram_inv * (b.Phi.transpose() * f);
  return b.Phi * (b.gram_inv * (dphi.transpose() * (dphi * coef)));
}

struct BvmReference {
  Matrix covariance;  // V0, P x P, limit covariance of sqrt(n)(psi^c - psi_hat^c)
  Vector sd;          // sqrt(diag(V0) / n): reference sd of psi^c itself
  bool rank_deficient = false;
};

namespace detail {

inline BvmReference bvm_from_columns(const Matrix& H, const FeatureBundle& b, double noise_sd) {
  const double n = static_cast<double>(b.n());
  BvmReference r;
  r.covariance = (4.0 * noise_sd * noise_sd / n) * (H.transpose() * H);
  r.covariance = 0.5 * (r.covariance + r.covariance.transpose()).eval();
  r.sd = (r.covariance.diagonal() / n).cwiseSqrt();
  r.rank_deficient = b.gram_rank < b.width();
  return r;
}

}  // namespace detail

inline BvmReference bvm_covariance(const FeatureBundle& b, const Vector& beta0, double noise_sd) {
  if (beta0.size() != b.width()) throw ConfigError("beta0 length does not match bundle width");
  Matrix H(b.n(), b.dim());
  for (Eigen::Index p = 0; p < b.dim(); ++p) H.col(p) = hp_times_truth(b, beta0, p);
  return detail::bvm_from_columns(H, b, noise_sd);
}

/// Indicative variant for truths outside the network class: f0 is replaced
/// by its sample values.
inline BvmReference bvm_covariance_from_values(const FeatureBundle& b, const Vector& f,
                                               double noise_sd) {
  Matrix H(b.n(), b.dim());
  for (Eigen::Index p = 0; p < b.dim(); ++p) H.col(p) = hp_times_values(b, f, p);
  return detail::bvm_from_columns(H, b, noise_sd);
}

/// Reference sd of the (normalized) centered importance psi^c_p:
/// sqrt(4 s^2 ||H_p f0||_n^2 / n).
inline double bvm_reference_sd(const FeatureBundle& b, const Vector& beta0, Eigen::Index p,
                               double noise_sd) {
  if (p < 0 || p >= b.dim()) throw ConfigError("variable index out of range");
  const Vector v = hp_times_truth(b, beta0, p);
  const double n = static_cast<double>(b.n());
  return std::sqrt(4.0 * noise_sd * noise_sd * (v.squaredNorm() / n) / n);
}

}  // namespace bnnvs
