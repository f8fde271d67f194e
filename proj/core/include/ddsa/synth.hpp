#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/diffusion.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::synth {

/// Per-class sample counts.
using ClassHistogram = std::vector<std::int64_t>;

/// Elementwise sum of the client histograms.
ClassHistogram global_histogram(std::span<const ClassHistogram> local);

struct QuotaPlan {
  /// Desired labeled + synthetic count per class.
  std::vector<std::int64_t> targets;
  /// Synthetic samples to generate per class.
  std::vector<std::int64_t> quotas;

  std::int64_t total_quota() const;
};

/// Targets follow the global class proportions and sum to
/// round(alpha * (n_labeled + n_unlabeled)); each quota is the shortfall of
/// the labeled count against its target. When that total does not exceed the
/// labeled count there is nothing to augment and every quota is zero.
QuotaPlan plan_quota(const ClassHistogram& local_labeled, std::int64_t n_unlabeled, const ClassHistogram& global,
                     double alpha);

/// (n_labeled + n_synthetic) / (n_labeled + n_unlabeled).
double effective_alpha(std::int64_t labeled_total, std::int64_t n_unlabeled, std::int64_t synthetic_total);

struct SynthesisConfig {
  double alpha = 1.0;
  /// Upper bound on any one class quota.
  std::optional<std::int64_t> per_class_cap;
  std::size_t batch_size = 256;
  diffusion::PosteriorVariance variance = diffusion::PosteriorVariance::paper;

  void validate() const;
};

/// Applies the optional per-class cap.
QuotaPlan capped(QuotaPlan plan, const SynthesisConfig& config);

struct Generator {
  const nn::ParamVector& denoiser;
  const diffusion::DenoiserSpec& denoiser_spec;
  const nn::ParamVector& vae;
  const nn::VaeSpec& vae_spec;
  const diffusion::DiffusionSchedule& schedule;
};

/// quota[c] samples of every class: latents from the conditional sampler,
/// decoded to feature space. Class c draws from its own stream
/// derive_seed(seed, {c}); output is ordered by class, then draw index.
data::Dataset generate_synthetic(const QuotaPlan& plan, const Generator& generator, const SynthesisConfig& config,
                                 std::uint64_t seed, const data::Dataset& like);

struct QuotaRecord {
  std::size_t client_id = 0;
  double alpha_requested = 0.0;
  double alpha_realized = 0.0;
  QuotaPlan plan;
};

/// JSON array of {client_id, alpha_requested, alpha_realized, targets, quotas}.
void write_quota_json(const std::filesystem::path& path, std::span<const QuotaRecord> records);
std::vector<QuotaRecord> read_quota_json(const std::filesystem::path& path);

}  // namespace ddsa::synth
