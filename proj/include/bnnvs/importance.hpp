#pragma once

// Gradient-norm variable importance and its bias-corrected (centered) form.
//
// For a network with chain matrices D_i and input weights w_p:
//   psi_p      = sum_i (beta' D_i w_p)^2 = ||dPhi_p beta||^2
//   eta_p      = s^2 tr(A_p G^{-1}),  A_p = dPhi_p' dPhi_p,  G = Phi' Phi
//   psi^c_p    = psi_p - eta_p
//              = w_p' Omega w_p,       Omega = sum_i D_i' (beta beta' - s^2 G^{-1}) D_i
//              = tr(Lambda_p M),       Lambda_p = A_p, M = beta beta' - s^2 G^{-1}
// All quantities are unnormalized; `normalized` divides by n.
//
// G^{-1} enters through its factor R (G^{-1} = R R'). When G is rank
// deficient, G^{-1} has entries of size 1/ridge_eff along the null space;
// contracting the explicit inverse lets those cancel with error
// eps/ridge_eff, while squared norms of R' v do not.

#include <fstream>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bnnvs/hmc.hpp"
#include "bnnvs/net.hpp"
#include "bnnvs/parallel.hpp"

namespace bnnvs {

namespace detail {

inline double scale(bool normalized, Eigen::Index n) {
  return normalized ? 1.0 / static_cast<double>(n) : 1.0;
}

inline void check_var(const FeatureBundle& b, Eigen::Index p) {
  if (p < 0 || p >= b.dim()) throw ConfigError("variable index out of range");
}

inline void check_beta(const FeatureBundle& b, const Vector& beta) {
  if (beta.size() != b.width()) throw ConfigError("beta length does not match bundle width");
}

}  // namespace detail

inline double psi_raw(const FeatureBundle& b, const Vector& beta, Eigen::Index p,
                      bool normalized = true) {
  detail::check_var(b, p);
  detail::check_beta(b, beta);
  return detail::scale(normalized, b.n()) * (b.gradient_features(p) * beta).squaredNorm();
}

inline double trace_correction(const FeatureBundle& b, Eigen::Index p, double noise_sd,
                               bool normalized = true) {
  detail::check_var(b, p);
  const Matrix dphi = b.gradient_features(p);
  double tr;
  if (b.gram_inv_factor.size() > 0) {
    tr = (dphi * b.gram_inv_factor).squaredNorm();
  } else {
    const Matrix A = dphi.transpose() * dphi;
    tr = std::max(A.cwiseProduct(b.gram_inv).sum(), 0.0);
  }
  return detail::scale(normalized, b.n()) * noise_sd * noise_sd * tr;
}

inline double psi_centered_direct(const FeatureBundle& b, const Vector& beta, Eigen::Index p,
                                  double noise_sd, bool normalized = true) {
  return psi_raw(b, beta, p, normalized) - trace_correction(b, p, noise_sd, normalized);
}

/// beta beta' - s^2 G^{-1}
inline Matrix meat_core(const Vector& beta, const Matrix& gram_inv, double noise_sd) {
  return beta * beta.transpose() - (noise_sd * noise_sd) * gram_inv;
}

struct OmegaMatrix {
  Matrix omega;           // K x K, symmetric
  std::string built_from;
};

/// The p-independent "meat" matrix, computed once per draw.
inline OmegaMatrix omega_matrix(const FeatureBundle& b, const Vector& beta, double noise_sd,
                                std::string built_from = {}) {
  detail::check_beta(b, beta);
  const double s2 = noise_sd * noise_sd;
  Matrix omega = Matrix::Zero(b.width(), b.width());
  if (b.gram_inv_factor.size() > 0) {
    const Matrix Rt = b.gram_inv_factor.transpose();
    for (const auto& D : b.Dtilde) {
      const Vector u = D.transpose() * beta;
      const Matrix C = Rt * D;
      omega.noalias() += u * u.transpose();
      omega.noalias() -= s2 * (C.transpose() * C);
    }
  } else {
    const Matrix M = meat_core(beta, b.gram_inv, noise_sd);
    for (const auto& D : b.Dtilde) omega.noalias() += D.transpose() * M * D;
  }
  omega = 0.5 * (omega + omega.transpose()).eval();
  return {std::move(omega), std::move(built_from)};
}

inline double psi_centered_omega(const OmegaMatrix& om, const Vector& w_p, bool normalized,
                                 Eigen::Index n) {
  if (w_p.size() != om.omega.rows()) throw ConfigError("w_p length does not match Omega");
  return detail::scale(normalized, n) * w_p.dot(om.omega * w_p);
}

// ---------------------------------------------------------------------------
// Sharded route. tr(Lambda_p M) splits into beta' Lambda_p beta and
// tr(R' Lambda_p R); both are sums over rows of squared norms, so each shard
// contributes two P-vectors and Lambda_p is never formed. R needs the full
// Gram, so the streaming overload makes a cheap forward-only pass first.
// Partials merge in shard order, independent of the thread count.

struct ShardSums {
  Vector signal;  // sum_i (beta' D_i w_p)^2
  Vector trace;   // sum_i ||R' D_i w_p||^2
};

namespace detail {

inline ShardSums accumulate_shard(std::span<const Matrix> chains, const Matrix& W1,
                                  const Vector& beta, const Matrix& Rt) {
  const Eigen::Index P = W1.cols();
  ShardSums out{Vector::Zero(P), Vector::Zero(P)};
  for (const Matrix& D : chains) {
    const Matrix Y = D * W1;  // K x P, column p = D_i w_p
    out.signal += (Y.transpose() * beta).cwiseAbs2();
    out.trace += (Rt * Y).colwise().squaredNorm().transpose();
  }
  return out;
}

inline Vector finish_parallel(const std::vector<ShardSums>& parts, double noise_sd,
                              bool normalized, Eigen::Index n, Eigen::Index P) {
  Vector signal = Vector::Zero(P), trace = Vector::Zero(P);
  for (const auto& part : parts) {
    signal += part.signal;
    trace += part.trace;
  }
  return detail::scale(normalized, n) * (signal - (noise_sd * noise_sd) * trace);
}

}  // namespace detail

/// Centered importances for all P variables from a prebuilt bundle,
/// parallel over fixed observation shards. Output is bit-identical for any
/// `threads`.
inline Vector psi_centered_parallel(const FeatureBundle& b, const Vector& beta, double noise_sd,
                                    int threads = 1, bool normalized = true) {
  if (threads < 1) throw ConfigError("shard thread count must be >= 1");
  detail::check_beta(b, beta);
  const Matrix Rt = (b.gram_inv_factor.size() > 0 ? b.gram_inv_factor
                                                  : gram_inverse(b.gram, b.ridge).factor)
                        .transpose();
  const ShardPlan plan{static_cast<std::size_t>(b.n())};
  std::vector<ShardSums> parts(plan.count());
  parallel_for(plan.count(), threads, [&](std::size_t s) {
    const std::span<const Matrix> chains(b.Dtilde.data() + plan.begin(s),
                                         plan.end(s) - plan.begin(s));
    parts[s] = detail::accumulate_shard(chains, b.input_weights, beta, Rt);
  });
  return detail::finish_parallel(parts, noise_sd, normalized, b.n(), b.dim());
}

/// Streaming variant: builds D_i and Phi shard by shard from the weights, so
/// memory stays O(shard * K * P) regardless of n.
inline Vector psi_centered_parallel(const NetworkWeights& w, const Matrix& X, double noise_sd,
                                    int threads = 1, bool normalized = true,
                                    double ridge = 1e-8) {
  if (threads < 1) throw ConfigError("shard thread count must be >= 1");
  detail::check_input(w, X.cols());
  if (X.rows() < 1) throw ConfigError("importance needs at least one observation");
  if (!w.all_finite()) throw NumericError("non-finite network weights");
  const Eigen::Index K = w.width();
  const ShardPlan plan{static_cast<std::size_t>(X.rows())};
  auto shard_rows = [&](std::size_t s) {
    return X.middleRows(static_cast<Eigen::Index>(plan.begin(s)),
                        static_cast<Eigen::Index>(plan.end(s) - plan.begin(s)));
  };

  std::vector<Matrix> grams(plan.count());
  parallel_for(plan.count(), threads, [&](std::size_t s) {
    const Matrix Xs = shard_rows(s);
    grams[s] = gram_partial(forward_batch(w, Xs).post.back(), 0, static_cast<std::size_t>(Xs.rows()));
  });
  Matrix gram = Matrix::Zero(K, K);
  for (const auto& g : grams) gram += g;
  const Matrix Rt = gram_inverse(gram, ridge).factor.transpose();

  std::vector<ShardSums> parts(plan.count());
  parallel_for(plan.count(), threads, [&](std::size_t s) {
    const Matrix Xs = shard_rows(s);
    const std::vector<Matrix> chains = chain_matrices(w, forward_batch(w, Xs));
    parts[s] = detail::accumulate_shard(chains, w.W1, w.beta, Rt);
  });
  return detail::finish_parallel(parts, noise_sd, normalized, X.rows(), w.input_dim());
}

// ---------------------------------------------------------------------------
// Per-chain importance draws.

struct ImportanceDraws {
  Matrix values;  // M x P
  bool normalized = true;
  double noise_sd = 1.0;
  Eigen::Index n = 0;

  Eigen::Index draws() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
};

inline ImportanceDraws importance_draws(const PosteriorChain& chain, const Matrix& X,
                                        double noise_sd, bool normalized = true,
                                        int threads = 1, double ridge = 1e-8) {
  if (chain.draws.empty()) throw InsufficientDrawsError("importance needs a nonempty chain");
  ImportanceDraws out;
  out.normalized = normalized;
  out.noise_sd = noise_sd;
  out.n = X.rows();
  out.values.resize(static_cast<Eigen::Index>(chain.draws.size()), X.cols());
  for (std::size_t m = 0; m < chain.draws.size(); ++m) {
    try {
      out.values.row(static_cast<Eigen::Index>(m)) =
          psi_centered_parallel(chain.draws[m], X, noise_sd, threads, normalized, ridge)
              .transpose();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (draw " + std::to_string(m) + ")",
                         static_cast<long>(m));
    }
    if (!out.values.row(static_cast<Eigen::Index>(m)).allFinite())
      throw NumericError("non-finite importance at draw " + std::to_string(m),
                         static_cast<long>(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export: CSV with header psi_1..psi_P plus a JSON sidecar.

inline void write_draws_csv(std::ostream& os, const Matrix& values) {
  for (Eigen::Index p = 0; p < values.cols(); ++p) os << (p ? "," : "") << "psi_" << (p + 1);
  os << '\n' << std::setprecision(17);
  for (Eigen::Index m = 0; m < values.rows(); ++m) {
    for (Eigen::Index p = 0; p < values.cols(); ++p) os << (p ? "," : "") << values(m, p);
    os << '\n';
  }
}

inline nlohmann::json draws_metadata(const ImportanceDraws& d) {
  return {{"normalized", d.normalized},
          {"noise_sd", d.noise_sd},
          {"n", d.n},
          {"M", d.draws()},
          {"P", d.dim()}};
}

inline void export_importance_draws(const ImportanceDraws& d, const std::string& csv_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot open " + csv_path);
  write_draws_csv(csv, d.values);
  std::ofstream meta(csv_path + ".json");
  if (!meta) throw IoError("cannot open " + csv_path + ".json");
  meta << draws_metadata(d).dump(2) << '\n';
  if (!csv || !meta) throw IoError("failed writing importance draws");
}

}  // namespace bnnvs
