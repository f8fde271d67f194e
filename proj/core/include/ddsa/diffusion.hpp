#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddsa/nn.hpp"
#include "ddsa/rng.hpp"

namespace ddsa::diffusion {

using nn::Matrix;
using nn::ParamVector;

/// Per-timestep tables, stored 0-based: beta[t - 1] is beta_t.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // prod_{s <= t} alpha_s

  std::size_t steps() const { return beta.size(); }
  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }

  /// 0 < beta < 1, alpha_bar strictly decreasing and positive.
  void validate() const;

  std::string to_json() const;
  static DiffusionSchedule from_json(std::string_view text);
};

/// Linear beta from beta_1 to beta_T over T steps.
DiffusionSchedule make_schedule(std::size_t T, double beta_1, double beta_T);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, for 1 <= t <= T.
std::vector<double> forward_sample(std::span<const double> z0, std::size_t t, std::span<const double> eps,
                                   const DiffusionSchedule& schedule);

/// Reverse-step noise scale. `paper` adds sqrt(1 - alpha_bar_t) eps;
/// `ddpm_beta` uses the usual sqrt(beta_t).
enum class PosteriorVariance { paper, ddpm_beta };

std::string_view to_string(PosteriorVariance v);
PosteriorVariance posterior_variance_from_string(std::string_view s);

/// Conditional noise predictor eps_phi(z_t, t, y): an MLP over
/// [z_t, sinusoidal(t)] whose first hidden layer also receives a learned
/// per-class embedding.
struct DenoiserSpec {
  std::size_t latent_dim = 2;
  int num_classes = 2;
  std::size_t time_embed_dim = 16;
  std::vector<std::size_t> hidden_dims{64, 64};
  nn::Activation activation = nn::Activation::relu;

  void validate() const;
  nn::MlpSpec mlp() const;
  /// Width of the label embedding (the first hidden layer).
  std::size_t label_embed_dim() const;
};

std::vector<double> timestep_embedding(std::size_t t, std::size_t dim);

ParamVector make_denoiser_params(const DenoiserSpec& spec);
ParamVector init_denoiser(const DenoiserSpec& spec, std::uint64_t seed);

/// Predicted noise, one row per item.
Matrix denoiser_forward(const ParamVector& params, const DenoiserSpec& spec, const Matrix& z_t,
                        std::span<const std::size_t> t, std::span<const int> labels);

/// Mean over items of ||eps - eps_phi(z_t, t, y)||^2 with timesteps and
/// noise given explicitly.
double cdm_loss_fixed(const ParamVector& params, const DenoiserSpec& spec, const Matrix& latents,
                      std::span<const int> labels, std::span<const std::size_t> t, const Matrix& eps,
                      const DiffusionSchedule& schedule, ParamVector* grad);

/// As above with t ~ U{1..T} and eps ~ N(0, I) drawn per item from `rng`.
double cdm_loss(const ParamVector& params, const DenoiserSpec& spec, const Matrix& latents,
                std::span<const int> labels, const DiffusionSchedule& schedule, Rng& rng, ParamVector* grad);

/// Objective over batches whose features are latents.
nn::LossFn cdm_objective(DenoiserSpec spec, DiffusionSchedule schedule);

/// Noise predictor used by the sampler: (z_t rows, t, label) -> eps rows.
using NoisePredictor = std::function<Matrix(const Matrix& z_t, std::size_t t, int label)>;

/// Ancestral sampling of `count` latents for one class. z_T ~ N(0, I), then
/// for t = T..1:
///   z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * eps
/// with eps = 0 at t = 1.
Matrix sample_latents_with(const NoisePredictor& predictor, std::size_t latent_dim, int label, std::size_t count,
                           const DiffusionSchedule& schedule, Rng& rng,
                           PosteriorVariance variance = PosteriorVariance::paper);

Matrix sample_latents(const ParamVector& params, const DenoiserSpec& spec, int label, std::size_t count,
                      const DiffusionSchedule& schedule, Rng& rng,
                      PosteriorVariance variance = PosteriorVariance::paper);

std::vector<double> sample_latent(const ParamVector& params, const DenoiserSpec& spec, int label,
                                  const DiffusionSchedule& schedule, Rng& rng,
                                  PosteriorVariance variance = PosteriorVariance::paper);

}  // namespace ddsa::diffusion
