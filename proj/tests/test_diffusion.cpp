#include <gtest/gtest.h>

#include <cmath>

#include "ddsa/error.hpp"
#include "ddsa/diffusion.hpp"
#include "oracles.hpp"

namespace {

using namespace ddsa;
using namespace ddsa::diffusion;

constexpr std::uint64_t kSeeds = 5;

DenoiserSpec small_denoiser(nn::Activation act = nn::Activation::tanh) {
  DenoiserSpec s;
  s.latent_dim = 2;
  s.num_classes = 3;
  s.time_embed_dim = 6;
  s.hidden_dims = {7, 5};
  s.activation = act;
  return s;
}

TEST(Schedule, LinearInterpolation) {
  const auto s = make_schedule(1000, 1e-4, 2e-2);
  EXPECT_EQ(s.steps(), 1000u);
  EXPECT_NEAR(s.beta_at(1), 1e-4, 1e-15);
  EXPECT_NEAR(s.beta_at(1000), 2e-2, 1e-15);
  EXPECT_NEAR(s.beta_at(500), 1e-4 + (499.0 / 999.0) * (2e-2 - 1e-4), 1e-15);
  EXPECT_NEAR(s.beta_at(500), 0.010040, 1e-6);
}

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(1, 0.3, 0.3);
  ASSERT_EQ(s.steps(), 1u);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 0.3);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.7);
}

TEST(Schedule, AlphaBarStrictlyDecreasingAndConsistent) {
  for (auto [T, b1, bT] : {std::tuple{200u, 5e-4, 0.1}, std::tuple{1000u, 1e-4, 2e-2}, std::tuple{50u, 0.01, 0.01}}) {
    const auto s = make_schedule(T, b1, bT);
    double prod = 1.0;
    for (std::size_t t = 1; t <= T; ++t) {
      prod *= 1.0 - s.beta_at(t);
      EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
      EXPECT_DOUBLE_EQ(s.alpha_at(t), 1.0 - s.beta_at(t));
      if (t > 1) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    }
    EXPECT_GT(s.alpha_bar_at(T), 0.0);
  }
}

TEST(Schedule, RejectsBadRanges) {
  EXPECT_THROW(make_schedule(0, 1e-4, 2e-2), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.0, 2e-2), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.1, 0.05), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = make_schedule(200, 5e-4, 0.1);
  const auto r = DiffusionSchedule::from_json(s.to_json());
  ASSERT_EQ(r.steps(), s.steps());
  double prod = 1.0;
  for (std::size_t t = 1; t <= s.steps(); ++t) {
    prod *= 1.0 - r.beta_at(t);
    EXPECT_NEAR(prod, s.alpha_bar_at(t), 1e-12);
    EXPECT_NEAR(r.alpha_bar_at(t), s.alpha_bar_at(t), 1e-12);
  }
}

// A schedule whose alpha_bar_1 is exactly 0.75.
DiffusionSchedule quarter_schedule() { return make_schedule(1, 0.25, 0.25); }

TEST(ForwardSample, ClosedForm) {
  const auto s = quarter_schedule();
  const std::vector<double> z0{1.0}, zero{0.0}, one{1.0};
  EXPECT_NEAR(forward_sample(z0, 1, zero, s)[0], 0.866025403784438, 1e-12);
  EXPECT_NEAR(forward_sample(z0, 1, one, s)[0], 1.366025403784438, 1e-12);
  EXPECT_THROW(forward_sample(z0, 0, one, s), std::out_of_range);
  EXPECT_THROW(forward_sample(z0, 2, one, s), std::out_of_range);
  const std::vector<double> two{1.0, 2.0};
  EXPECT_THROW(forward_sample(z0, 1, two, s), DimensionError);
}

TEST(ForwardSample, MomentsWithinThreeStandardErrors) {
  const std::size_t T = 200, n = 10000;
  const auto s = make_schedule(T, 5e-4, 0.1);
  const std::vector<double> z0{1.5};
  Rng rng(31);
  for (std::size_t t : {std::size_t{1}, T / 2, T}) {
    std::vector<double> z(n);
    for (auto& v : z) {
      const std::vector<double> eps{rng.gaussian()};
      v = forward_sample(z0, t, eps, s)[0];
    }
    const double var = 1.0 - s.alpha_bar_at(t);
    const double mean_se = std::sqrt(var / n);
    const double var_se = var * std::sqrt(2.0 / (n - 1));
    EXPECT_NEAR(oracle::mean(z), std::sqrt(s.alpha_bar_at(t)) * 1.5, 3.0 * mean_se) << "t=" << t;
    EXPECT_NEAR(oracle::variance(z), var, 3.0 * var_se) << "t=" << t;
  }
}

TEST(TimestepEmbedding, SinCosPairs) {
  const auto e = timestep_embedding(7, 6);
  ASSERT_EQ(e.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / 2.0);
    EXPECT_NEAR(e[2 * i], std::sin(7.0 * freq), 1e-12);
    EXPECT_NEAR(e[2 * i + 1], std::cos(7.0 * freq), 1e-12);
  }
}

TEST(CdmLoss, ConstantOracleGivesZero) {
  const auto spec = small_denoiser();
  auto p = make_denoiser_params(spec);
  const std::string out_bias = "den.l" + std::to_string(spec.hidden_dims.size()) + ".b";
  p.segment(out_bias)[0] = 0.4;
  p.segment(out_bias)[1] = -1.1;
  const auto s = make_schedule(20, 1e-3, 0.2);
  const auto z = oracle::random_matrix(4, 2, 1);
  nn::Matrix eps(4, 2);
  for (std::size_t r = 0; r < 4; ++r) {
    eps(r, 0) = 0.4;
    eps(r, 1) = -1.1;
  }
  const std::vector<int> y{0, 1, 2, 0};
  const std::vector<std::size_t> t{1, 5, 20, 11};
  EXPECT_NEAR(cdm_loss_fixed(p, spec, z, y, t, eps, s, nullptr), 0.0, 1e-24);
}

TEST(CdmLoss, FixedMatchesHandFormula) {
  const auto spec = small_denoiser();
  const auto p = init_denoiser(spec, 5);
  const auto s = make_schedule(20, 1e-3, 0.2);
  const auto z0 = oracle::random_matrix(3, 2, 2);
  const auto eps = oracle::random_matrix(3, 2, 3);
  const std::vector<int> y{2, 0, 1};
  const std::vector<std::size_t> t{3, 17, 9};
  nn::Matrix zt(3, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto row = forward_sample(z0.row(r), t[r], eps.row(r), s);
    zt(r, 0) = row[0];
    zt(r, 1) = row[1];
  }
  const auto pred = denoiser_forward(p, spec, zt, t, y);
  double expect = 0.0;
  for (std::size_t i = 0; i < 6; ++i) expect += (eps.data[i] - pred.data[i]) * (eps.data[i] - pred.data[i]);
  EXPECT_NEAR(cdm_loss_fixed(p, spec, z0, y, t, eps, s, nullptr), expect / 3.0, 1e-12);
}

TEST(CdmLoss, ZeroOutputExpectsLatentDim) {
  DenoiserSpec spec = small_denoiser();
  spec.latent_dim = 3;
  const auto p = make_denoiser_params(spec);
  const auto s = make_schedule(50, 1e-3, 0.05);
  const std::size_t n = 10000;
  const auto z = oracle::random_matrix(n, 3, 4);
  const std::vector<int> y(n, 1);
  Rng rng(8);
  // ||eps||^2 is chi-squared with h degrees of freedom: variance 2h.
  EXPECT_NEAR(cdm_loss(p, spec, z, y, s, rng, nullptr), 3.0, 3.0 * std::sqrt(6.0 / n));
}

TEST(CdmLoss, GradientMatchesFiniteDifferences) {
  for (auto act : {nn::Activation::tanh, nn::Activation::relu})
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      const auto spec = small_denoiser(act);
      const auto p = init_denoiser(spec, seed);
      const auto s = make_schedule(30, 1e-3, 0.2);
      const nn::Batch b{oracle::random_matrix(6, 2, seed + 11), {0, 1, 2, 2, 1, 0}};
      const auto loss = cdm_objective(spec, s);
      Rng rng(seed);
      const auto g = nn::gradient(loss, p, b, rng);
      const auto check = oracle::finite_difference_check(loss, p, b, Rng(seed), g);
      EXPECT_GT(check.checked, p.size() / 2);
      EXPECT_LE(check.max_rel_err, 1e-4) << "seed " << seed << " index " << check.worst_index;
      double emb_norm = 0.0;
      for (double v : g.segment("den.label_emb")) emb_norm += std::fabs(v);
      EXPECT_GT(emb_norm, 0.0);
    }
}

TEST(Denoiser, LabelChangesPrediction) {
  const auto spec = small_denoiser();
  const auto p = init_denoiser(spec, 2);
  const auto z = oracle::random_matrix(1, 2, 9);
  const std::vector<std::size_t> t{4};
  const std::vector<int> a{0}, b{1};
  EXPECT_NE(denoiser_forward(p, spec, z, t, a).data, denoiser_forward(p, spec, z, t, b).data);
  const std::vector<int> bad{3};
  EXPECT_THROW(denoiser_forward(p, spec, z, t, bad), DimensionError);
}

TEST(Sampler, SingleStepWithZeroPredictor) {
  const auto s = make_schedule(1, 0.19, 0.19);
  const NoisePredictor zero = [](const nn::Matrix& z, std::size_t, int) { return nn::Matrix(z.rows, z.cols); };
  for (auto mode : {PosteriorVariance::paper, PosteriorVariance::ddpm_beta}) {
    Rng rng(5), ref(5);
    const auto out = sample_latents_with(zero, 2, 0, 4, s, rng, mode);
    for (std::size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data[i], ref.gaussian() / 0.9, 1e-12);
    // Nothing further is drawn: the last step is noise free.
    EXPECT_EQ(rng.uniform(), ref.uniform());
  }
}

// With the exact noise predictor of a point mass at mu the last step lands
// on mu whatever noise was injected before it.
TEST(Sampler, ExactPointMassPredictorRecoversMean) {
  const auto s = make_schedule(100, 1e-3, 0.1);
  const std::vector<double> mu{1.5, -2.0};
  const NoisePredictor exact = [&](const nn::Matrix& z, std::size_t t, int) {
    nn::Matrix e(z.rows, z.cols);
    const double ab = s.alpha_bar_at(t);
    for (std::size_t r = 0; r < z.rows; ++r)
      for (std::size_t c = 0; c < z.cols; ++c) e(r, c) = (z(r, c) - std::sqrt(ab) * mu[c]) / std::sqrt(1.0 - ab);
    return e;
  };
  for (auto mode : {PosteriorVariance::paper, PosteriorVariance::ddpm_beta}) {
    Rng rng(12);
    const auto out = sample_latents_with(exact, 2, 0, 50, s, rng, mode);
    for (std::size_t r = 0; r < out.rows; ++r) {
      EXPECT_NEAR(out(r, 0), mu[0], 1e-9);
      EXPECT_NEAR(out(r, 1), mu[1], 1e-9);
    }
  }
}

TEST(Sampler, DeterministicGivenSeed) {
  const auto spec = small_denoiser();
  const auto p = init_denoiser(spec, 3);
  const auto s = make_schedule(25, 1e-3, 0.2);
  Rng a(77), b(77);
  EXPECT_EQ(sample_latent(p, spec, 1, s, a), sample_latent(p, spec, 1, s, b));
  Rng c(78);
  EXPECT_NE(sample_latent(p, spec, 1, s, a), sample_latent(p, spec, 1, s, c));
  EXPECT_THROW(sample_latent(p, spec, 3, s, a), DimensionError);
}

TEST(PosteriorVarianceNames, RoundTrip) {
  for (auto v : {PosteriorVariance::paper, PosteriorVariance::ddpm_beta})
    EXPECT_EQ(posterior_variance_from_string(to_string(v)), v);
  EXPECT_THROW(posterior_variance_from_string("learned"), std::invalid_argument);
}

// Trains a denoiser on two point masses and checks the conditional sample
// means. Uses the beta_t sampler noise (see the fidelity note in README).
TEST(Sampler, TrainedOnPointMassesHitsClassMeans) {
  DenoiserSpec spec;
  spec.latent_dim = 2;
  spec.num_classes = 2;
  spec.hidden_dims = {64, 64};
  const auto s = make_schedule(200, 5e-4, 0.1);
  const std::vector<std::vector<double>> mu{{1.5, -1.0}, {-2.0, 0.5}};
  nn::Batch data{nn::Matrix(512, 2), std::vector<int>(512)};
  for (std::size_t r = 0; r < 512; ++r) {
    data.y[r] = static_cast<int>(r % 2);
    data.x(r, 0) = mu[r % 2][0];
    data.x(r, 1) = mu[r % 2][1];
  }
  auto p = init_denoiser(spec, 1);
  nn::OptimizerConfig opt{nn::OptimizerKind::adam, 3e-3};
  nn::OptimizerState st;
  const auto loss = cdm_objective(spec, s);
  Rng rng(2);
  for (int step = 0; step < 3000; ++step) nn::optimizer_step(p, nn::gradient(loss, p, data, rng), st, opt);

  for (int c = 0; c < 2; ++c) {
    Rng sampler(100 + c);
    const auto z = sample_latents(p, spec, c, 500, s, sampler, PosteriorVariance::ddpm_beta);
    double m0 = 0.0, m1 = 0.0;
    for (std::size_t r = 0; r < z.rows; ++r) {
      m0 += z(r, 0) / 500.0;
      m1 += z(r, 1) / 500.0;
    }
    EXPECT_NEAR(m0, mu[c][0], 0.1) << "class " << c;
    EXPECT_NEAR(m1, mu[c][1], 0.1) << "class " << c;
  }
}

}  // namespace
