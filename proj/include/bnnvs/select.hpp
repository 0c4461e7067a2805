#pragma once

// Simultaneous (sup-t) credible bands over importance draws and the
// "zero not in band" selection rule.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "bnnvs/importance.hpp"

namespace bnnvs {

struct CredibleBand {
  double level = 0.95;  // 1 - alpha
  Vector center;
  Vector half_width;
  Vector lower;
  Vector upper;
  double critical_value = 0.0;  // q, the sup-t quantile

  Eigen::Index dim() const { return center.size(); }
};

struct SelectionResult {
  std::vector<int> selected;  // sorted, 0-based
  CredibleBand band;
};

struct SelectionQuality {
  double fdr = 0.0;
  double power = 0.0;
  bool exact_recovery = false;
};

constexpr double kScaleFloor = 1e-12;

/// Sample sd with divisor M-1.
inline double sample_sd(const Eigen::Ref<const Vector>& v) {
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

/// Smallest order statistic whose empirical CDF reaches `prob`.
inline double lower_quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw InsufficientDrawsError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double m = static_cast<double>(values.size());
  // ceil(prob * M) with a guard so that e.g. 0.8 * 5 lands on 4, not 5.
  auto k = static_cast<std::size_t>(std::ceil(prob * m - 1e-9 * m));
  k = std::clamp<std::size_t>(k, 1, values.size());
  return values[k - 1];
}

inline CredibleBand simultaneous_band(const Matrix& draws, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  const Eigen::Index M = draws.rows();
  const Eigen::Index P = draws.cols();
  if (M < 2) throw InsufficientDrawsError("simultaneous band needs at least 2 draws");
  if (!draws.allFinite()) throw NumericError("non-finite importance draws");

  CredibleBand band;
  band.level = 1.0 - alpha;
  band.center = draws.colwise().mean().transpose();
  Vector scale(P);
  for (Eigen::Index p = 0; p < P; ++p)
    scale(p) = std::max(sample_sd(draws.col(p)), kScaleFloor * (1.0 + std::abs(band.center(p))));

  std::vector<double> t(static_cast<std::size_t>(M));
  for (Eigen::Index m = 0; m < M; ++m)
    t[static_cast<std::size_t>(m)] =
        ((draws.row(m).transpose() - band.center).cwiseAbs().cwiseQuotient(scale)).maxCoeff();
  band.critical_value = lower_quantile(t, 1.0 - alpha);
  band.half_width = band.critical_value * scale;
  band.lower = band.center - band.half_width;
  band.upper = band.center + band.half_width;
  // A draw with t_m == q can land an ulp outside c -/+ q*scale after
  // rounding; widen the bounds to the draws the quantile admits.
  for (Eigen::Index m = 0; m < M; ++m) {
    if (t[static_cast<std::size_t>(m)] > band.critical_value) continue;
    band.lower = band.lower.cwiseMin(draws.row(m).transpose());
    band.upper = band.upper.cwiseMax(draws.row(m).transpose());
  }
  return band;
}

inline CredibleBand simultaneous_band(const ImportanceDraws& d, double alpha) {
  return simultaneous_band(d.values, alpha);
}

/// Selects p when 0 lies strictly outside the closed band.
inline SelectionResult select_variables(const CredibleBand& band) {
  SelectionResult r;
  r.band = band;
  for (Eigen::Index p = 0; p < band.dim(); ++p)
    if (band.lower(p) > 0.0 || band.upper(p) < 0.0) r.selected.push_back(static_cast<int>(p));
  return r;
}

inline SelectionQuality selection_metrics(const std::vector<int>& selected,
                                          const std::vector<int>& truth) {
  const std::set<int> sel(selected.begin(), selected.end());
  const std::set<int> a0(truth.begin(), truth.end());
  std::size_t hits = 0;
  for (int p : sel) hits += a0.count(p);
  SelectionQuality q;
  q.fdr = static_cast<double>(sel.size() - hits) / static_cast<double>(std::max<std::size_t>(1, sel.size()));
  q.power = a0.empty() ? 1.0 : static_cast<double>(hits) / static_cast<double>(a0.size());
  q.exact_recovery = sel == a0;
  return q;
}

inline SelectionQuality selection_metrics(const SelectionResult& r, const std::vector<int>& truth) {
  return selection_metrics(r.selected, truth);
}

/// Fraction of draws lying inside the band in every coordinate at once.
inline double band_self_coverage(const CredibleBand& band, const Matrix& draws) {
  Eigen::Index inside = 0;
  for (Eigen::Index m = 0; m < draws.rows(); ++m) {
    const auto row = draws.row(m).transpose();
    if (((row - band.lower).array() >= 0.0).all() && ((band.upper - row).array() >= 0.0).all())
      ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(draws.rows());
}

/// True when every coordinate of `truth` lies in the closed band.
inline bool band_covers(const CredibleBand& band, const Vector& truth) {
  return ((truth - band.lower).array() >= 0.0).all() && ((band.upper - truth).array() >= 0.0).all();
}

inline nlohmann::json to_json(const SelectionResult& r) {
  nlohmann::json vars = nlohmann::json::array();
  const std::set<int> sel(r.selected.begin(), r.selected.end());
  for (Eigen::Index p = 0; p < r.band.dim(); ++p)
    vars.push_back({{"variable", p + 1},
                    {"center", r.band.center(p)},
                    {"lower", r.band.lower(p)},
                    {"upper", r.band.upper(p)},
                    {"selected", sel.count(static_cast<int>(p)) > 0}});
  return {{"level", r.band.level}, {"critical_value", r.band.critical_value}, {"variables", vars}};
}

}  // namespace bnnvs
