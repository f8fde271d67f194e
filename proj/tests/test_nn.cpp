#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"
#include "oracles.hpp"

namespace {

using namespace ddsa;
using namespace ddsa::nn;

constexpr std::size_t kSeeds = 5;

MlpSpec small_classifier(Activation a = Activation::tanh) { return MlpSpec{3, {5, 4}, 4, a}; }

Batch labeled_batch(std::size_t n, std::size_t d, int C, std::uint64_t seed) {
  Batch b{oracle::random_matrix(n, d, seed), std::vector<int>(n)};
  Rng rng(seed + 1000);
  for (auto& y : b.y) y = static_cast<int>(rng.below(static_cast<std::uint64_t>(C)));
  return b;
}

TEST(Classifier, ZeroParamsGiveZeroLogits) {
  const auto spec = small_classifier();
  const ParamVector p = make_classifier_params(spec);
  for (double v : classifier_forward(p, spec, std::vector<double>{1.0, -2.0, 0.5})) EXPECT_EQ(v, 0.0);
}

TEST(Classifier, IdenticalInputsGiveIdenticalLogits) {
  const auto spec = small_classifier(Activation::relu);
  const ParamVector p = init_classifier(spec, 3);
  const std::vector<double> x{0.3, 0.1, -0.7};
  EXPECT_EQ(classifier_forward(p, spec, x), classifier_forward(p, spec, x));
}

TEST(Classifier, ForwardMatchesNaiveImplementation) {
  for (auto act : {Activation::relu, Activation::tanh})
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      const auto spec = small_classifier(act);
      ParamVector p = make_classifier_params(spec);
      oracle::randomize(p, seed, 1.0);
      const Matrix x = oracle::random_matrix(6, 3, seed + 50);
      const Matrix logits = classifier_logits(p, spec, x);
      for (std::size_t r = 0; r < x.rows; ++r) {
        const auto ref = oracle::naive_mlp(p, spec, "clf", {x.row(r).begin(), x.row(r).end()});
        for (std::size_t c = 0; c < ref.size(); ++c)
          EXPECT_NEAR(logits(r, c), ref[c], 1e-6 * std::max(1.0, std::fabs(ref[c])));
      }
    }
}

TEST(Classifier, PredictBreaksTiesTowardLowestIndex) {
  const auto spec = small_classifier();
  const ParamVector p = make_classifier_params(spec);
  EXPECT_EQ(predict(p, spec, oracle::random_matrix(3, 3, 1)), (std::vector<int>{0, 0, 0}));
}

TEST(Classifier, LayoutMismatchIsRejected) {
  const ParamVector p = make_classifier_params(small_classifier());
  EXPECT_THROW(classifier_forward(p, MlpSpec{3, {6}, 4, Activation::relu}, std::vector<double>{0, 0, 0}),
               DimensionError);
}

TEST(CrossEntropy, ClosedForms) {
  EXPECT_NEAR(cross_entropy(std::vector<double>(10, 0.7), 3), std::log(10.0), 1e-12);
  EXPECT_NEAR(cross_entropy(std::vector<double>{1.0, 2.0}, 0), 1.313262, 1e-6);
  EXPECT_NEAR(cross_entropy(std::vector<double>{1.0, 2.0}, 0), -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0))),
              1e-12);
  EXPECT_LT(cross_entropy(std::vector<double>{800.0, 0.0, -5.0}, 0), 1e-300);
  EXPECT_GE(cross_entropy(std::vector<double>{-3.0, 4.0}, 0), 0.0);
}

TEST(CrossEntropy, RejectsNonFiniteLogits) {
  EXPECT_THROW(cross_entropy(std::vector<double>{std::nan(""), 0.0}, 0), NumericError);
  EXPECT_THROW(cross_entropy(std::vector<double>{INFINITY, 0.0}, 1), NumericError);
}

TEST(Gradient, ConstantLossHasZeroGradient) {
  ParamVector p;
  p.add_segment("w", 4);
  const LossFn constant = [](const ParamVector&, const Batch&, Rng&, ParamVector*) { return 3.0; };
  Rng rng(0);
  const ParamVector g = gradient(constant, p, Batch{}, rng);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, HalfSquaredNormGivesParams) {
  ParamVector p;
  p.add_segment("w", 5);
  oracle::randomize(p, 9);
  const LossFn sq = [](const ParamVector& q, const Batch&, Rng&, ParamVector* g) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      s += 0.5 * q.values()[i] * q.values()[i];
      if (g) g->values()[i] += q.values()[i];
    }
    return s;
  };
  Rng rng(0);
  EXPECT_EQ(gradient(sq, p, Batch{}, rng).values(), p.values());
}

TEST(Gradient, NonFiniteLossIsReported) {
  ParamVector p;
  p.add_segment("w", 1);
  const LossFn bad = [](const ParamVector&, const Batch&, Rng&, ParamVector*) { return std::nan(""); };
  Rng rng(0);
  EXPECT_THROW(gradient(bad, p, Batch{}, rng), NumericError);
}

TEST(Gradient, ClassifierMatchesFiniteDifferences) {
  for (auto act : {Activation::tanh, Activation::relu})
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      const auto spec = small_classifier(act);
      const ParamVector p = init_classifier(spec, seed);
      const Batch b = labeled_batch(7, 3, 4, seed);
      const LossFn loss = classifier_objective(spec);
      Rng rng(seed);
      const ParamVector g = gradient(loss, p, b, rng);
      const auto check = oracle::finite_difference_check(loss, p, b, Rng(seed), g);
      EXPECT_GT(check.checked, p.size() / 2);
      EXPECT_LE(check.max_rel_err, 1e-4) << "seed " << seed << " index " << check.worst_index;
    }
}

TEST(Gradient, VaeMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const VaeSpec spec{4, 2, {6}, Activation::tanh};
    const ParamVector p = init_vae(spec, seed);
    const Batch b{oracle::random_matrix(5, 4, seed + 7), std::vector<int>(5, -1)};
    const LossFn loss = vae_objective(spec, 0.3);
    Rng rng(seed);
    const ParamVector g = gradient(loss, p, b, rng);
    const auto check = oracle::finite_difference_check(loss, p, b, Rng(seed), g);
    EXPECT_GT(check.checked, p.size() / 2);
    EXPECT_LE(check.max_rel_err, 1e-4) << "seed " << seed << " index " << check.worst_index;
  }
}

TEST(Gradient, LossIsInvariantToSegmentOrder) {
  const auto spec = small_classifier();
  const ParamVector p = init_classifier(spec, 4);
  std::vector<std::string> order;
  for (const auto& s : p.layout()) order.push_back(s.name);
  std::reverse(order.begin(), order.end());
  const ParamVector q = p.reordered(order);
  EXPECT_NE(p.values(), q.values());
  const Batch b = labeled_batch(6, 3, 4, 2);
  EXPECT_EQ(classifier_loss(p, spec, b, nullptr), classifier_loss(q, spec, b, nullptr));
  Rng r1(0), r2(0);
  const ParamVector gp = gradient(classifier_objective(spec), p, b, r1);
  const ParamVector gq = gradient(classifier_objective(spec), q, b, r2);
  for (const auto& s : p.layout()) {
    const auto a = gp.segment(s.name);
    const auto c = gq.segment(s.name);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), c.begin()));
  }
}

TEST(Optimizer, SgdStepArithmetic) {
  ParamVector p, g;
  p.add_segment("w", 1);
  g.add_segment("w", 1);
  p.values()[0] = 1.0;
  g.values()[0] = 2.0;
  OptimizerState st;
  optimizer_step(p, g, st, OptimizerConfig{OptimizerKind::sgd, 0.1});
  EXPECT_NEAR(p.values()[0], 0.8, 1e-15);
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamw}) {
    ParamVector p;
    p.add_segment("w", 3);
    oracle::randomize(p, 1);
    const auto before = p.values();
    OptimizerState st;
    OptimizerConfig cfg{kind, 0.1, 0.9};
    for (int i = 0; i < 3; ++i) optimizer_step(p, p.zeros_like(), st, cfg);
    EXPECT_EQ(p.values(), before);
  }
}

TEST(Optimizer, MomentumFollowsHandRecurrence) {
  ParamVector p, g;
  p.add_segment("w", 1);
  g.add_segment("w", 1);
  g.values()[0] = 0.5;
  OptimizerState st;
  const OptimizerConfig cfg{OptimizerKind::sgd, 0.1, 0.9};
  optimizer_step(p, g, st, cfg);
  EXPECT_NEAR(p.values()[0], -0.1 * 0.5, 1e-15);
  optimizer_step(p, g, st, cfg);
  // v1 = g, v2 = 0.9 g + g; displacement = -lr (v1 + v2) = -lr * 2.9 g.
  EXPECT_NEAR(p.values()[0], -0.1 * 2.9 * 0.5, 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ParamVector p, g;
  p.add_segment("w", 2);
  g.add_segment("w", 2);
  g.values() = {3.0, -0.01};
  OptimizerState st;
  optimizer_step(p, g, st, OptimizerConfig{OptimizerKind::adam, 0.01});
  EXPECT_NEAR(p.values()[0], -0.01, 1e-9);
  EXPECT_NEAR(p.values()[1], 0.01, 1e-6);
}

TEST(Optimizer, AdamwDecaysWeightsWithoutGradient) {
  ParamVector p;
  p.add_segment("w", 1);
  p.values()[0] = 2.0;
  OptimizerState st;
  OptimizerConfig cfg{OptimizerKind::adamw, 0.1};
  cfg.weight_decay = 0.5;
  optimizer_step(p, p.zeros_like(), st, cfg);
  EXPECT_NEAR(p.values()[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(Vae, ShapesAndDeterminism) {
  const VaeSpec spec{5, 3, {8}, Activation::relu};
  const ParamVector p = init_vae(spec, 2);
  const std::vector<double> x{0.1, -0.3, 0.8, 1.2, -1.0};
  const Posterior a = vae_encode(p, spec, x);
  EXPECT_EQ(a.mu.size(), 3u);
  EXPECT_EQ(a.logvar.size(), 3u);
  const Posterior b = vae_encode(p, spec, x);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.logvar, b.logvar);
  EXPECT_EQ(vae_decode(p, spec, a.mu).size(), 5u);
  EXPECT_DOUBLE_EQ(spec.downsampling_factor(), 5.0 / 3.0);
}

TEST(Vae, SpecRejectsLatentWiderThanInput) {
  EXPECT_THROW((VaeSpec{2, 3, {4}, Activation::relu}.validate()), std::invalid_argument);
  EXPECT_THROW((VaeSpec{2, 0, {4}, Activation::relu}.validate()), std::invalid_argument);
}

TEST(Vae, KlClosedForms) {
  EXPECT_EQ(kl_standard_normal(std::vector<double>{0.0, 0.0}, std::vector<double>{0.0, 0.0}), 0.0);
  EXPECT_NEAR(kl_standard_normal(std::vector<double>{1.0}, std::vector<double>{0.0}), 0.5, 1e-15);
  const double lv = 0.7;
  EXPECT_NEAR(kl_standard_normal(std::vector<double>{0.0}, std::vector<double>{lv}),
              0.5 * (std::exp(lv) - lv - 1.0), 1e-15);
}

TEST(Vae, PerfectReconstructionWithoutKlIsZeroLoss) {
  // A 1-1-1 network that is the identity on nonnegative inputs.
  const VaeSpec spec{1, 1, {1}, Activation::relu};
  ParamVector p = make_vae_params(spec);
  p.segment("enc.l0.w")[0] = 1.0;
  p.segment("enc.l1.w")[0] = 1.0;  // mu
  p.segment("enc.l1.w")[1] = 0.0;  // logvar
  p.segment("dec.l0.w")[0] = 1.0;
  p.segment("dec.l1.w")[0] = 1.0;
  Batch b{Matrix(4, 1), std::vector<int>(4, -1)};
  b.x.data = {0.0, 0.5, 1.5, 3.0};
  EXPECT_EQ(vae_loss_with_noise(p, spec, b, 0.0, Matrix(4, 1), nullptr), 0.0);
}

TEST(Vae, TrainedOneDimensionalModelReconstructsWell) {
  const VaeSpec spec{1, 1, {16}, Activation::tanh};
  ParamVector p = init_vae(spec, 5);
  Batch b{oracle::random_matrix(128, 1, 8), std::vector<int>(128, -1)};
  const LossFn loss = vae_objective(spec, 1e-4);
  OptimizerState st;
  const OptimizerConfig cfg{OptimizerKind::adam, 0.01};
  Rng rng(1);
  for (int it = 0; it < 1500; ++it) optimizer_step(p, gradient(loss, p, b, rng), st, cfg);
  const auto [mu, logvar] = vae_encode_batch(p, spec, b.x);
  const Matrix rec = vae_decode_batch(p, spec, mu);
  double mse = 0.0, var = 0.0;
  for (std::size_t i = 0; i < b.x.data.size(); ++i) {
    mse += (rec.data[i] - b.x.data[i]) * (rec.data[i] - b.x.data[i]);
    var += b.x.data[i] * b.x.data[i];
  }
  EXPECT_LT(mse / var, 0.02);
}

TEST(Params, ValidateCatchesNonFiniteValues) {
  ParamVector p = make_classifier_params(small_classifier());
  EXPECT_NO_THROW(p.validate());
  p.values()[2] = INFINITY;
  EXPECT_THROW(p.validate(), NumericError);
}

TEST(Params, CheckpointRoundTripsAtFloatPrecision) {
  ParamVector p = init_classifier(small_classifier(), 6);
  for (auto& v : p.values()) v = static_cast<float>(v);
  const auto dir = std::filesystem::temp_directory_path() / "ddsa_test_params";
  std::filesystem::remove_all(dir);
  save_params(p, dir);
  EXPECT_EQ(load_params(dir), p);
}

TEST(Params, DuplicateSegmentsAreRejected) {
  ParamVector p;
  p.add_segment("a", 2);
  EXPECT_THROW(p.add_segment("a", 1), std::invalid_argument);
  EXPECT_THROW((void)p.segment("b"), DimensionError);
}

}  // namespace
