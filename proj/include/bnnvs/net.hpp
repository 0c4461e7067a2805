#pragma once

// Deep ReLU network: weights, forward evaluation, activation patterns and
// the per-observation matrices used by the importance computations.
//
// Indexing: variables, units and observations are 0-based in the C++ API.
// Exported files label variables 1..P.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "bnnvs/error.hpp"
#include "bnnvs/parallel.hpp"
#include "bnnvs/rng.hpp"

namespace bnnvs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct NetworkArch {
  int depth = 2;      // L, number of hidden layers
  int width = 50;     // K
  int input_dim = 1;  // P
  std::optional<long> sparsity_bound;   // S; nullopt = unbounded
  std::optional<double> norm_bound;     // B; nullopt = unbounded

  void validate() const {
    if (depth < 1 || width < 1 || input_dim < 1)
      throw ConfigError("network arch needs L, K, P >= 1");
    if (sparsity_bound && *sparsity_bound < 0)
      throw ConfigError("sparsity bound must be nonnegative");
    if (norm_bound && !(*norm_bound > 0.0))
      throw ConfigError("norm bound must be positive");
  }
};

/// One ReLU network: f(x) = b0 + beta' s(W_L s(... s(W1 x))).
struct NetworkWeights {
  Matrix W1;                  // K x P
  std::vector<Matrix> hidden; // W_2..W_L, each K x K
  Vector beta;                // K
  double b0 = 0.0;

  int depth() const { return 1 + static_cast<int>(hidden.size()); }
  int width() const { return static_cast<int>(W1.rows()); }
  int input_dim() const { return static_cast<int>(W1.cols()); }

  NetworkArch arch() const { return {depth(), width(), input_dim(), {}, {}}; }

  static NetworkWeights zeros(const NetworkArch& arch) {
    arch.validate();
    NetworkWeights w;
    w.W1 = Matrix::Zero(arch.width, arch.input_dim);
    w.hidden.assign(arch.depth - 1, Matrix::Zero(arch.width, arch.width));
    w.beta = Vector::Zero(arch.width);
    return w;
  }

  /// iid N(0, sd^2) on every weight and the bias.
  static NetworkWeights random(const NetworkArch& arch, double sd, Rng& rng) {
    NetworkWeights w = zeros(arch);
    auto fill = [&](auto& m) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal(0.0, sd);
    };
    fill(w.W1);
    for (auto& m : w.hidden) fill(m);
    fill(w.beta);
    w.b0 = rng.normal(0.0, sd);
    return w;
  }

  /// Total number of scalar parameters.
  Eigen::Index size() const {
    Eigen::Index k = width();
    return W1.size() + static_cast<Eigen::Index>(hidden.size()) * k * k + k + 1;
  }

  bool all_finite() const {
    if (!W1.allFinite() || !beta.allFinite() || !std::isfinite(b0)) return false;
    for (const auto& m : hidden)
      if (!m.allFinite()) return false;
    return true;
  }

  /// Throws ConfigError when the shapes disagree with each other.
  void validate() const {
    const auto k = W1.rows();
    if (k < 1 || W1.cols() < 1) throw ConfigError("W1 must be non-empty");
    if (beta.size() != k) throw ConfigError("beta length does not match width");
    for (const auto& m : hidden)
      if (m.rows() != k || m.cols() != k)
        throw ConfigError("hidden weight matrices must be K x K");
  }

  /// Exact (bitwise-value) equality, shapes included.
  friend bool operator==(const NetworkWeights& a, const NetworkWeights& b) {
    auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
    };
    if (a.hidden.size() != b.hidden.size() || a.b0 != b.b0) return false;
    if (!same(a.W1, b.W1) || !same(a.beta, b.beta)) return false;
    for (std::size_t l = 0; l < a.hidden.size(); ++l)
      if (!same(a.hidden[l], b.hidden[l])) return false;
    return true;
  }
};

/// Pre-activation sign masks, one 0/1 vector per hidden layer.
struct ActivationPattern {
  std::vector<Vector> layers;
};

struct Dataset {
  Matrix X;  // n x P, entries in [0, 1]
  Vector y;  // n
  double noise_sd = 1.0;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }

  void validate() const {
    if (X.rows() < 1) throw ConfigError("dataset must contain at least one observation");
    if (y.size() != X.rows()) throw ConfigError("y length does not match X rows");
    if (!X.allFinite() || !y.allFinite()) throw NumericError("dataset has non-finite entries");
    if (!(noise_sd > 0.0)) throw ConfigError("noise sd must be positive");
  }
};

inline double relu(double z) { return z > 0.0 ? z : 0.0; }

namespace detail {

inline void check_input(const NetworkWeights& w, Eigen::Index len) {
  w.validate();
  if (len != w.input_dim())
    throw ConfigError("input length " + std::to_string(len) + " does not match P = " +
                      std::to_string(w.input_dim()));
}

}  // namespace detail

/// Hidden features h_L(x), length K.
inline Vector hidden_features(const NetworkWeights& w, const Vector& x) {
  detail::check_input(w, x.size());
  Vector h = (w.W1 * x).unaryExpr(&relu);
  for (const auto& m : w.hidden) h = (m * h).unaryExpr(&relu);
  return h;
}

inline double forward(const NetworkWeights& w, const Vector& x) {
  return w.b0 + w.beta.dot(hidden_features(w, x));
}

inline ActivationPattern activation_pattern(const NetworkWeights& w, const Vector& x) {
  detail::check_input(w, x.size());
  ActivationPattern pat;
  Vector z = w.W1 * x;
  pat.layers.push_back((z.array() > 0.0).cast<double>().matrix());
  Vector h = z.unaryExpr(&relu);
  for (const auto& m : w.hidden) {
    z = m * h;
    pat.layers.push_back((z.array() > 0.0).cast<double>().matrix());
    h = z.unaryExpr(&relu);
  }
  return pat;
}

/// Layer-chain matrix diag(s_L) W_L ... diag(s_2) W_2 diag(s_1), K x K.
inline Matrix chain_matrix(const NetworkWeights& w, const ActivationPattern& pat) {
  const auto& s = pat.layers;
  if (w.hidden.empty()) return s[0].asDiagonal();
  Matrix d = s[1].asDiagonal() * (w.hidden[0] * s[0].asDiagonal());
  for (std::size_t l = 1; l < w.hidden.size(); ++l)
    d = s[l + 1].asDiagonal() * (w.hidden[l] * d);
  return d;
}

/// Full input gradient of f at x (weak derivative, sigma'(0) = 0).
inline Vector input_gradient(const NetworkWeights& w, const Vector& x) {
  const ActivationPattern pat = activation_pattern(w, x);
  Vector g = w.beta;
  for (std::size_t l = w.hidden.size(); l >= 1; --l) {
    g = g.cwiseProduct(pat.layers[l]);
    g = w.hidden[l - 1].transpose() * g;
  }
  g = g.cwiseProduct(pat.layers[0]);
  return w.W1.transpose() * g;
}

/// df/dx_p at x.
inline double gradient(const NetworkWeights& w, const Vector& x, Eigen::Index p) {
  if (p < 0 || p >= w.input_dim()) throw ConfigError("variable index out of range");
  return input_gradient(w, x)(p);
}

/// Row-wise forward pass over a design matrix. Keeps every layer's
/// pre-activation so callers can backpropagate.
struct BatchForward {
  std::vector<Matrix> pre;   // Z_l = H_{l-1} W_l', n x K
  std::vector<Matrix> post;  // H_l = relu(Z_l)
  Vector out;                // n
};

inline BatchForward forward_batch(const NetworkWeights& w, const Matrix& X) {
  detail::check_input(w, X.cols());
  BatchForward fb;
  fb.pre.reserve(w.depth());
  fb.post.reserve(w.depth());
  fb.pre.push_back(X * w.W1.transpose());
  fb.post.push_back(fb.pre.back().cwiseMax(0.0));
  for (const auto& m : w.hidden) {
    fb.pre.push_back(fb.post.back() * m.transpose());
    fb.post.push_back(fb.pre.back().cwiseMax(0.0));
  }
  fb.out = (fb.post.back() * w.beta).array() + w.b0;
  return fb;
}

inline Vector predict(const NetworkWeights& w, const Matrix& X) {
  return forward_batch(w, X).out;
}

// ---------------------------------------------------------------------------
// Gram matrix regularization.

struct GramInverse {
  Matrix inv;          // (G + ridge_eff I)^{-1}
  Matrix factor;       // R with R R' = inv
  int rank = 0;        // numerical rank of G
  double ridge_eff = 0.0;
};

/// Ridge-regularized inverse of a symmetric PSD Gram matrix.
/// ridge_eff = ridge * trace(G) / K, or ridge itself when trace(G) == 0.
/// Units with an all-zero feature column (G_kk == 0) are split off so the
/// inverse stays exactly block diagonal; otherwise eigenvector round-off
/// would couple them to live units with weight ~ eps / ridge_eff.
inline GramInverse gram_inverse(const Matrix& gram, double ridge) {
  if (ridge < 0.0) throw ConfigError("ridge must be nonnegative");
  const auto k = gram.rows();
  GramInverse out;
  const double tr = gram.trace();
  out.ridge_eff = tr > 0.0 ? ridge * tr / static_cast<double>(k) : ridge;

  std::vector<Eigen::Index> live;
  for (Eigen::Index j = 0; j < k; ++j)
    if (gram(j, j) > 0.0) live.push_back(j);
  const auto m = static_cast<Eigen::Index>(live.size());
  if (m < k && !(out.ridge_eff > 0.0))
    throw NumericError("Gram matrix is singular and ridge is zero");

  out.inv = Matrix::Zero(k, k);
  out.factor = Matrix::Zero(k, k);
  for (Eigen::Index j = 0; j < k; ++j)
    if (!(gram(j, j) > 0.0)) {
      out.inv(j, j) = 1.0 / out.ridge_eff;
      out.factor(j, j) = 1.0 / std::sqrt(out.ridge_eff);
    }
  if (m == 0) return out;

  Matrix sub(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) sub(a, b) = gram(live[a], live[b]);
  Eigen::SelfAdjointEigenSolver<Matrix> es(sub);
  if (es.info() != Eigen::Success) throw NumericError("Gram eigendecomposition failed");
  const Vector ev = es.eigenvalues();
  const double top = ev.cwiseAbs().maxCoeff();
  const double tol = top * static_cast<double>(k) * 1e-13;
  out.rank = static_cast<int>((ev.array() > tol).count());
  Vector shifted = ev.array().max(0.0) + out.ridge_eff;
  if ((shifted.array() <= 0.0).any())
    throw NumericError("Gram matrix is singular and ridge is zero");
  const Matrix& V = es.eigenvectors();
  Matrix sub_inv = V * shifted.cwiseInverse().asDiagonal() * V.transpose();
  sub_inv = 0.5 * (sub_inv + sub_inv.transpose()).eval();
  const Matrix sub_factor = V * shifted.cwiseSqrt().cwiseInverse().asDiagonal();
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) {
      out.inv(live[a], live[b]) = sub_inv(a, b);
      out.factor(live[a], live[b]) = sub_factor(a, b);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Feature bundle.

/// D_i for every row of a batch forward pass.
inline std::vector<Matrix> chain_matrices(const NetworkWeights& w, const BatchForward& fb) {
  const Eigen::Index n = fb.out.size();
  std::vector<Matrix> out(static_cast<std::size_t>(n));
  ActivationPattern pat;
  pat.layers.resize(static_cast<std::size_t>(w.depth()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < pat.layers.size(); ++l)
      pat.layers[l] = (fb.pre[l].row(i).transpose().array() > 0.0).cast<double>().matrix();
    out[static_cast<std::size_t>(i)] = chain_matrix(w, pat);
  }
  return out;
}

// Gram accumulation over fixed observation shards. Every route that needs
// Phi' Phi goes through these so the sums are bit-identical.

inline Matrix gram_partial(const Matrix& Phi, std::size_t begin, std::size_t end) {
  const auto b = static_cast<Eigen::Index>(begin);
  const auto len = static_cast<Eigen::Index>(end - begin);
  return Phi.middleRows(b, len).transpose() * Phi.middleRows(b, len);
}

inline Matrix sharded_gram(const Matrix& Phi) {
  const ShardPlan plan{static_cast<std::size_t>(Phi.rows())};
  Matrix g = Matrix::Zero(Phi.cols(), Phi.cols());
  for (std::size_t s = 0; s < plan.count(); ++s) g += gram_partial(Phi, plan.begin(s), plan.end(s));
  return g;
}

struct BundleOptions {
  double ridge = 1e-8;
  bool store_gradient_features = true;
};

struct FeatureBundle {
  Matrix Phi;                   // n x K hidden features
  std::vector<Matrix> dPhi;     // P entries of n x K, empty if not stored
  std::vector<Matrix> Dtilde;   // n entries of K x K
  Matrix input_weights;         // W1, K x P
  Matrix gram;                  // Phi' Phi, shard-ordered sum
  Matrix gram_inv;
  // R with R R' = gram_inv. Products through R keep null directions of G
  // from cancelling at size 1/ridge_eff. Empty for hand-built bundles.
  Matrix gram_inv_factor;
  double ridge = 1e-8;
  int gram_rank = 0;
  double ridge_eff = 0.0;

  Eigen::Index n() const { return Phi.rows(); }
  Eigen::Index width() const { return Phi.cols(); }
  Eigen::Index dim() const { return input_weights.cols(); }

  /// dPhi[p], from storage or recomputed as rows (D_i w_p)'.
  Matrix gradient_features(Eigen::Index p) const {
    if (p < 0 || p >= dim()) throw ConfigError("variable index out of range");
    if (!dPhi.empty()) return dPhi[static_cast<std::size_t>(p)];
    Matrix out(n(), width());
    const Vector wp = input_weights.col(p);
    for (Eigen::Index i = 0; i < n(); ++i)
      out.row(i) = (Dtilde[static_cast<std::size_t>(i)] * wp).transpose();
    return out;
  }
};

inline FeatureBundle build_feature_bundle(const NetworkWeights& w, const Matrix& X,
                                          const BundleOptions& opt = {}) {
  detail::check_input(w, X.cols());
  if (X.rows() < 1) throw ConfigError("feature bundle needs at least one observation");
  if (!w.all_finite()) throw NumericError("non-finite network weights");
  const Eigen::Index n = X.rows();
  const Eigen::Index k = w.width();
  const Eigen::Index P = w.input_dim();

  FeatureBundle b;
  b.input_weights = w.W1;
  const BatchForward fb = forward_batch(w, X);
  b.Phi = fb.post.back();
  b.Dtilde = chain_matrices(w, fb);
  if (opt.store_gradient_features) {
    b.dPhi.assign(static_cast<std::size_t>(P), Matrix(n, k));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Matrix g = b.Dtilde[static_cast<std::size_t>(i)] * w.W1;  // K x P
      for (Eigen::Index p = 0; p < P; ++p)
        b.dPhi[static_cast<std::size_t>(p)].row(i) = g.col(p).transpose();
    }
  }
  b.gram = sharded_gram(b.Phi);
  b.ridge = opt.ridge;
  GramInverse gi = gram_inverse(b.gram, opt.ridge);
  b.gram_inv = std::move(gi.inv);
  b.gram_inv_factor = std::move(gi.factor);
  b.gram_rank = gi.rank;
  b.ridge_eff = gi.ridge_eff;
  return b;
}

/// K_W = Phi Phi', n x n.
inline Matrix kernel_matrix(const FeatureBundle& b) { return b.Phi * b.Phi.transpose(); }

struct ConstraintReport {
  long sparsity_total = 0;
  double max_inf_norm = 0.0;
  bool sparsity_ok = true;
  bool norm_ok = true;
};

/// Counts nonzeros and the largest absolute entry over W_1..W_L.
inline ConstraintReport check_constraints(const NetworkWeights& w, const NetworkArch& arch) {
  ConstraintReport r;
  auto visit = [&](const Matrix& m) {
    r.sparsity_total += static_cast<long>((m.array() != 0.0).count());
    if (m.size() > 0) r.max_inf_norm = std::max(r.max_inf_norm, m.cwiseAbs().maxCoeff());
  };
  visit(w.W1);
  for (const auto& m : w.hidden) visit(m);
  r.sparsity_ok = !arch.sparsity_bound || r.sparsity_total <= *arch.sparsity_bound;
  r.norm_ok = !arch.norm_bound || r.max_inf_norm <= *arch.norm_bound;
  return r;
}

// ---------------------------------------------------------------------------
// JSON (row-major nested arrays).

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                               const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ConfigError(std::string("bad row count for ") + name);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError(std::string("bad column count for ") + name);
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const NetworkWeights& w) {
  nlohmann::json j;
  j["L"] = w.depth();
  j["K"] = w.width();
  j["P"] = w.input_dim();
  j["W1"] = detail::matrix_to_json(w.W1);
  j["W"] = nlohmann::json::array();
  for (const auto& m : w.hidden) j["W"].push_back(detail::matrix_to_json(m));
  j["beta"] = std::vector<double>(w.beta.data(), w.beta.data() + w.beta.size());
  j["b0"] = w.b0;
  return j;
}

inline NetworkWeights weights_from_json(const nlohmann::json& j) {
  try {
    const int L = j.at("L").get<int>();
    const int K = j.at("K").get<int>();
    const int P = j.at("P").get<int>();
    NetworkArch{L, K, P, {}, {}}.validate();
    NetworkWeights w;
    w.W1 = detail::matrix_from_json(j.at("W1"), K, P, "W1");
    const auto& hid = j.contains("W") ? j.at("W") : nlohmann::json::array();
    if (!hid.is_array() || static_cast<int>(hid.size()) != L - 1)
      throw ConfigError("expected L-1 hidden weight matrices in \"W\"");
    for (const auto& m : hid) w.hidden.push_back(detail::matrix_from_json(m, K, K, "W"));
    const auto beta = j.at("beta").get<std::vector<double>>();
    if (static_cast<int>(beta.size()) != K) throw ConfigError("beta length does not match K");
    w.beta = Eigen::Map<const Vector>(beta.data(), K);
    w.b0 = j.at("b0").get<double>();
    if (!w.all_finite()) throw NumericError("non-finite entries in weights JSON");
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed weights JSON: ") + e.what());
  }
}

}  // namespace bnnvs
