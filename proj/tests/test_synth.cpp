#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "bnnvs/csv.hpp"
#include "test_util.hpp"

using namespace bnnvs;
using namespace bnnvs::testing;

namespace {

// Independent transcription of the complex truth.
double complex_oracle(const double* x) {
  const double m = x[0] > x[1] ? x[0] : x[1];
  return (std::sin(m) + std::atan(x[1])) / (1.0 + x[0] + x[4]) +
         std::sin(x[2] / 2.0) * (1.0 + std::exp(x[3] - x[2] / 2.0)) + x[2] * x[2] +
         2.0 * std::sin(x[3]) + 4.0 * x[4];
}

Vector vec5(double a, double b, double c, double d, double e) {
  Vector x(5);
  x << a, b, c, d, e;
  return x;
}

}  // namespace

TEST(ComplexTruth, Examples) {
  EXPECT_EQ(f_complex(Vector::Zero(5)), 0.0);
  EXPECT_DOUBLE_EQ(f_complex(vec5(0, 0, 0, 0, 1)), 4.0);
  // 40-digit reference value.
  EXPECT_NEAR(f_complex(Vector::Ones(5)), 8.495096307502059197510942868, 1e-14);
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Vector x = random_design(1, 8, rng).row(0).transpose();
    EXPECT_NEAR(f_complex(x), complex_oracle(x.data()), 1e-14);
  }
}

TEST(ComplexTruth, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    Vector x = random_design(1, 5, rng).row(0).transpose();
    if (std::abs(x(0) - x(1)) < 1e-3) continue;
    const Vector g = f_complex_gradient(x);
    for (int p = 0; p < 5; ++p) {
      Vector up = x, dn = x;
      up(p) += 1e-6;
      dn(p) -= 1e-6;
      EXPECT_NEAR(g(p), (complex_oracle(up.data()) - complex_oracle(dn.data())) / 2e-6, 1e-6);
    }
  }
}

TEST(LinearTruth, Examples) {
  const Vector ones = Vector::Ones(5);
  EXPECT_EQ(f_linear(vec5(0.3, 0, 0, 0, 0), ones), 0.3);
  EXPECT_EQ(f_linear(Vector::Zero(7), ones), 0.0);
  Rng rng(3);
  Vector beta(5);
  for (int p = 0; p < 5; ++p) beta(p) = rng.normal();
  for (int t = 0; t < 50; ++t) {
    const Vector x = random_design(1, 9, rng).row(0).transpose();
    double dot = 0.0;
    for (int p = 0; p < 5; ++p) dot += x(p) * beta(p);
    EXPECT_NEAR(f_linear(x, beta), dot, 1e-15);
  }
  EXPECT_THROW(f_linear(Vector::Zero(4), ones), ConfigError);
}

TEST(NeuralTruth, DeterministicTruncatedAndOracleConsistent) {
  GeneratorSpec spec;
  spec.seed = 99;
  spec.neural_depth = 2;
  spec.neural_width = 12;
  const NetworkWeights a = f_neural(spec);
  EXPECT_TRUE(a == f_neural(spec));
  spec.seed = 100;
  EXPECT_FALSE(a == f_neural(spec));
  EXPECT_EQ(a.input_dim(), 5);
  EXPECT_TRUE(check_constraints(a, {2, 12, 5, {}, 1.0}).norm_ok);
  EXPECT_LE(std::abs(a.b0), 1.0);
  EXPECT_LE(a.beta.cwiseAbs().maxCoeff(), 1.0);

  spec.seed = 99;
  spec.P = 12;
  const TruthFunction f = make_truth(spec);
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const Vector x = random_design(1, 12, rng).row(0).transpose();
    EXPECT_NEAR(f(x), oracle_forward(a, to_std(x.head(5))), 1e-12);
  }
}

TEST(GenDataset, ZeroNoiseIsExact) {
  for (auto kind : {GeneratorKind::linear, GeneratorKind::neural, GeneratorKind::complex}) {
    GeneratorSpec spec;
    spec.kind = kind;
    spec.noise_sd = 0.0;
    spec.n = 50;
    spec.P = 8;
    spec.neural_width = 6;
    spec.mc_points = 1000;
    const SynthDataset s = gen_dataset(spec);
    EXPECT_EQ(s.data.y, s.f_star_values);
    EXPECT_EQ(s.A0, (std::vector<int>{0, 1, 2, 3, 4}));
    for (Eigen::Index p = 5; p < 8; ++p) EXPECT_EQ(s.true_importance(p), 0.0);
    EXPECT_TRUE((s.data.X.array() > 0.0).all() && (s.data.X.array() < 1.0).all());
  }
}

TEST(GenDataset, LinearImportanceIsOne) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::linear;
  spec.P = 25;
  const SynthDataset s = gen_dataset(spec);
  for (Eigen::Index p = 0; p < 25; ++p) EXPECT_EQ(s.true_importance(p), p < 5 ? 1.0 : 0.0);
}

TEST(GenDataset, ComplexImportanceMatchesFiniteDifferenceIntegrator) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::complex;
  spec.P = 6;
  const Vector lib = true_importance(make_truth(spec), 6, 1000000, 5);

  std::mt19937_64 gen(20240601);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> acc(5, 0.0);
  const long N = 1000000;
  const double h = 1e-5;
  for (long i = 0; i < N; ++i) {
    double x[5];
    for (double& v : x) v = unif(gen);
    for (int p = 0; p < 5; ++p) {
      double up[5], dn[5];
      std::copy(x, x + 5, up);
      std::copy(x, x + 5, dn);
      up[p] += h;
      dn[p] -= h;
      const double d = (complex_oracle(up) - complex_oracle(dn)) / (2.0 * h);
      acc[static_cast<std::size_t>(p)] += d * d;
    }
  }
  for (int p = 0; p < 5; ++p) {
    const double oracle = acc[static_cast<std::size_t>(p)] / static_cast<double>(N);
    EXPECT_NEAR(lib(p), oracle, 0.01 * oracle) << "p=" << p;
  }
  EXPECT_EQ(lib(5), 0.0);
}

TEST(GenDataset, NeuralImportanceMatchesGradientAverage) {
  GeneratorSpec spec;
  spec.neural_width = 10;
  spec.P = 7;
  const TruthFunction f = make_truth(spec);
  const Vector lib = true_importance(f, 7, 200000, 8);
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> acc(5, 0.0);
  const long N = 200000;
  for (long i = 0; i < N; ++i) {
    std::vector<double> x(5);
    for (double& v : x) v = unif(gen);
    if (min_abs_preactivation(f.network, x) < 1e-7) continue;
    for (int p = 0; p < 5; ++p) {
      const double d = central_difference(f.network, x, p, 1e-8);
      acc[static_cast<std::size_t>(p)] += d * d;
    }
  }
  for (int p = 0; p < 5; ++p) {
    const double oracle = acc[static_cast<std::size_t>(p)] / static_cast<double>(N);
    EXPECT_NEAR(lib(p), oracle, 0.02 * oracle + 1e-12) << "p=" << p;
  }
  EXPECT_EQ(lib(5), 0.0);
  EXPECT_EQ(lib(6), 0.0);
}

TEST(GenDataset, TrueColumnsStableAsPGrows) {
  for (auto kind : {GeneratorKind::linear, GeneratorKind::neural, GeneratorKind::complex}) {
    GeneratorSpec spec;
    spec.kind = kind;
    spec.n = 100;
    spec.neural_width = 8;
    spec.mc_points = 100;
    spec.P = 10;
    const SynthDataset a = gen_dataset(spec);
    spec.P = 40;
    const SynthDataset b = gen_dataset(spec);
    EXPECT_EQ(a.data.X, b.data.X.leftCols(10));
    EXPECT_EQ(a.data.y, b.data.y);
  }
}

TEST(GenDataset, NoiseVariance) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::linear;
  spec.n = 40000;
  spec.noise_sd = 0.7;
  const SynthDataset s = gen_dataset(spec);
  const Vector e = s.data.y - s.f_star_values;
  const double var = (e.array() - e.mean()).square().sum() / static_cast<double>(e.size() - 1);
  EXPECT_NEAR(var, 0.49, 0.05 * 0.49);
}

TEST(GenDataset, Deterministic) {
  GeneratorSpec spec;
  spec.n = 30;
  spec.P = 6;
  spec.neural_width = 5;
  spec.mc_points = 500;
  const SynthDataset a = gen_dataset(spec), b = gen_dataset(spec);
  EXPECT_EQ(a.data.X, b.data.X);
  EXPECT_EQ(a.data.y, b.data.y);
  EXPECT_EQ(a.true_importance, b.true_importance);
}

TEST(GenDataset, Validation) {
  GeneratorSpec spec;
  spec.P = 4;
  EXPECT_THROW(gen_dataset(spec), ConfigError);
  EXPECT_THROW(generator_kind_from_string("cubic"), ConfigError);
  EXPECT_EQ(generator_kind_from_string("complex"), GeneratorKind::complex);
}

TEST(GenDataset, ExportRoundTrip) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::complex;
  spec.n = 12;
  spec.P = 6;
  spec.mc_points = 100;
  const SynthDataset s = gen_dataset(spec);
  const auto dir = std::filesystem::temp_directory_path() / "bnnvs_test_synth";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "d.csv").string();
  export_dataset(s, path);
  std::ifstream in(path);
  const Dataset back = dataset_from_csv(read_csv(in), spec.noise_sd);
  EXPECT_EQ(back.X, s.data.X);
  EXPECT_EQ(back.y, s.data.y);
  std::ifstream side(path + ".json");
  const auto meta = nlohmann::json::parse(side);
  EXPECT_EQ(meta["kind"], "complex");
  EXPECT_EQ(meta["A0"], (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_TRUE(std::filesystem::exists(path + ".fstar.csv"));
  std::filesystem::remove_all(dir);
}
