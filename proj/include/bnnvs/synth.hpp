#pragma once

// Simulation generators: linear, neural and "complex" truths on (0,1)^P with
// five relevant coordinates, plus Monte Carlo ground-truth importances.
//
// Random streams (all keyed by the dataset seed):
//   column p of X      stream 1000 + p   (so columns 1..5 do not depend on P)
//   noise              stream 7
//   neural truth       stream 3
//   importance MC      stream 9
//   held-out points    stream 11 (+ column offset)

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "bnnvs/net.hpp"
#include "bnnvs/rng.hpp"

namespace bnnvs {

constexpr int kTrueDim = 5;

enum class GeneratorKind { linear, neural, complex };

inline std::string to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::linear: return "linear";
    case GeneratorKind::neural: return "neural";
    case GeneratorKind::complex: return "complex";
  }
  return "unknown";
}

inline GeneratorKind generator_kind_from_string(const std::string& s) {
  if (s == "linear") return GeneratorKind::linear;
  if (s == "neural") return GeneratorKind::neural;
  if (s == "complex") return GeneratorKind::complex;
  throw ConfigError("unknown generator kind \"" + s + "\"");
}

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::neural;
  long n = 100;
  int P = 25;
  double noise_sd = 1.0;
  std::uint64_t seed = 1;
  Vector linear_beta = Vector::Ones(kTrueDim);
  int neural_depth = 2;
  int neural_width = 50;
  long mc_points = 100000;

  void validate() const {
    if (n < 1) throw ConfigError("generator n must be positive");
    if (P < kTrueDim) throw ConfigError("generator P must be at least 5");
    if (!(noise_sd >= 0.0)) throw ConfigError("generator noise_sd must be nonnegative");
    if (linear_beta.size() != kTrueDim) throw ConfigError("linear_beta must have length 5");
    if (neural_depth < 1 || neural_width < 1) throw ConfigError("neural arch must be positive");
    if (mc_points < 1) throw ConfigError("mc_points must be positive");
  }
};

// ---------------------------------------------------------------------------
// Closed-form truths.

inline double f_complex(const Vector& x) {
  if (x.size() < kTrueDim) throw ConfigError("complex truth needs at least 5 coordinates");
  const double x1 = x(0), x2 = x(1), x3 = x(2), x4 = x(3), x5 = x(4);
  return (std::sin(std::max(x1, x2)) + std::atan(x2)) / (1.0 + x1 + x5) +
         std::sin(0.5 * x3) * (1.0 + std::exp(x4 - 0.5 * x3)) + x3 * x3 + 2.0 * std::sin(x4) +
         4.0 * x5;
}

/// Analytic gradient of f_complex in the five relevant coordinates. The
/// max(x1, x2) kink routes the derivative to x1 when x1 > x2.
inline Vector f_complex_gradient(const Vector& x) {
  const double x1 = x(0), x2 = x(1), x3 = x(2), x4 = x(3), x5 = x(4);
  const double num = std::sin(std::max(x1, x2)) + std::atan(x2);
  const double den = 1.0 + x1 + x5;
  const double cmax = std::cos(std::max(x1, x2));
  const double e = std::exp(x4 - 0.5 * x3);
  Vector g(kTrueDim);
  g(0) = (x1 > x2 ? cmax : 0.0) / den - num / (den * den);
  g(1) = ((x1 > x2 ? 0.0 : cmax) + 1.0 / (1.0 + x2 * x2)) / den;
  g(2) = 0.5 * std::cos(0.5 * x3) * (1.0 + e) - 0.5 * std::sin(0.5 * x3) * e + 2.0 * x3;
  g(3) = std::sin(0.5 * x3) * e + 2.0 * std::cos(x4);
  g(4) = -num / (den * den) + 4.0;
  return g;
}

inline double f_linear(const Vector& x, const Vector& beta5) {
  if (x.size() < kTrueDim || beta5.size() != kTrueDim)
    throw ConfigError("linear truth needs 5 coefficients and at least 5 coordinates");
  return x.head(kTrueDim).dot(beta5);
}

/// Frozen neural truth on the first five coordinates: iid N(0, 0.5^2) weights
/// truncated to [-1, 1] by rejection.
inline NetworkWeights f_neural(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, 3);
  auto draw = [&] {
    for (;;) {
      const double v = rng.normal(0.0, 0.5);
      if (v >= -1.0 && v <= 1.0) return v;
    }
  };
  NetworkWeights w =
      NetworkWeights::zeros({spec.neural_depth, spec.neural_width, kTrueDim, {}, {}});
  auto fill = [&](auto& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = draw();
  };
  fill(w.W1);
  for (auto& m : w.hidden) fill(m);
  fill(w.beta);
  w.b0 = draw();
  return w;
}

/// A generator's truth f*, evaluable at points of any dimension >= 5.
struct TruthFunction {
  GeneratorKind kind = GeneratorKind::linear;
  Vector linear_beta = Vector::Ones(kTrueDim);
  NetworkWeights network;  // neural kind only

  double operator()(const Vector& x) const {
    switch (kind) {
      case GeneratorKind::linear: return f_linear(x, linear_beta);
      case GeneratorKind::neural: return forward(network, x.head(kTrueDim));
      case GeneratorKind::complex: return f_complex(x);
    }
    return 0.0;
  }

  /// Gradient in the five relevant coordinates.
  Vector gradient5(const Vector& x) const {
    switch (kind) {
      case GeneratorKind::linear: return linear_beta;
      case GeneratorKind::neural: return input_gradient(network, x.head(kTrueDim));
      case GeneratorKind::complex: return f_complex_gradient(x);
    }
    return Vector::Zero(kTrueDim);
  }

  Vector evaluate(const Matrix& X) const {
    if (kind == GeneratorKind::neural) return predict(network, X.leftCols(kTrueDim));
    Vector out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) out(i) = (*this)(X.row(i).transpose());
    return out;
  }
};

inline TruthFunction make_truth(const GeneratorSpec& spec) {
  spec.validate();
  TruthFunction t;
  t.kind = spec.kind;
  t.linear_beta = spec.linear_beta;
  if (spec.kind == GeneratorKind::neural) t.network = f_neural(spec);
  return t;
}

/// Uniform(0,1) design with one random stream per column.
inline Matrix uniform_design(long n, int P, std::uint64_t seed, std::uint64_t stream_base) {
  Matrix X(n, P);
  for (int p = 0; p < P; ++p) {
    Rng rng(seed, stream_base + static_cast<std::uint64_t>(p));
    for (long i = 0; i < n; ++i) X(i, p) = rng.uniform();
  }
  return X;
}

/// Monte Carlo estimate of Psi_p(f*) = E ||df*/dx_p||^2 over Uniform(0,1)^P.
/// Zero for p > 5.
inline Vector true_importance(const TruthFunction& truth, int P, long points, std::uint64_t seed) {
  const Matrix U = uniform_design(points, kTrueDim, seed, 9000);
  Vector acc = Vector::Zero(kTrueDim);
  if (truth.kind == GeneratorKind::linear) {
    acc = truth.linear_beta.array().square();
  } else {
    for (long i = 0; i < points; ++i) acc += truth.gradient5(U.row(i).transpose()).array().square().matrix();
    acc /= static_cast<double>(points);
  }
  Vector out = Vector::Zero(P);
  out.head(kTrueDim) = acc;
  return out;
}

struct SynthDataset {
  Dataset data;
  Vector f_star_values;
  std::vector<int> A0;  // 0-based {0..4}
  Vector true_importance;
  TruthFunction truth;
  GeneratorSpec spec;
};

inline SynthDataset gen_dataset(const GeneratorSpec& spec) {
  spec.validate();
  SynthDataset s;
  s.spec = spec;
  s.truth = make_truth(spec);
  s.data.X = uniform_design(spec.n, spec.P, spec.seed, 1000);
  s.f_star_values = s.truth.evaluate(s.data.X);
  Rng noise(spec.seed, 7);
  s.data.y = s.f_star_values;
  for (long i = 0; i < spec.n; ++i) s.data.y(i) += spec.noise_sd * noise.normal();
  s.data.noise_sd = spec.noise_sd;
  s.A0 = {0, 1, 2, 3, 4};
  s.true_importance = true_importance(s.truth, spec.P, spec.mc_points, spec.seed);
  return s;
}

/// Fresh evaluation points from the same covariate law.
inline Matrix heldout_design(const GeneratorSpec& spec, long count) {
  return uniform_design(count, spec.P, spec.seed, 11000);
}

// ---------------------------------------------------------------------------
// Export: CSV x1..xP,y plus JSON sidecar and an f* values file.

inline void write_dataset_csv(std::ostream& os, const Matrix& X, const Vector& y) {
  for (Eigen::Index p = 0; p < X.cols(); ++p) os << "x" << (p + 1) << ",";
  os << "y\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index p = 0; p < X.cols(); ++p) os << X(i, p) << ",";
    os << y(i) << '\n';
  }
}

inline void export_dataset(const SynthDataset& s, const std::string& csv_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot open " + csv_path);
  write_dataset_csv(csv, s.data.X, s.data.y);
  const std::string fstar_path = csv_path + ".fstar.csv";
  std::ofstream fstar(fstar_path);
  if (!fstar) throw IoError("cannot open " + fstar_path);
  fstar << "f_star\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < s.f_star_values.size(); ++i) fstar << s.f_star_values(i) << '\n';
  std::vector<int> a0;
  for (int p : s.A0) a0.push_back(p + 1);
  const nlohmann::json meta = {
      {"kind", to_string(s.spec.kind)},
      {"seed", s.spec.seed},
      {"noise_sd", s.spec.noise_sd},
      {"n", s.spec.n},
      {"P", s.spec.P},
      {"A0", a0},
      {"true_importance", std::vector<double>(s.true_importance.data(),
                                              s.true_importance.data() + s.true_importance.size())},
      {"f_star_values", fstar_path}};
  std::ofstream side(csv_path + ".json");
  if (!side) throw IoError("cannot open " + csv_path + ".json");
  side << meta.dump(2) << '\n';
  if (!csv || !fstar || !side) throw IoError("failed writing dataset export");
}

}  // namespace bnnvs
