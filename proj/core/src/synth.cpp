#include "ddsa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ddsa/apportion.hpp"
#include "ddsa/error.hpp"
#include "ddsa/rng.hpp"
#include "json.hpp"

namespace ddsa::synth {

ClassHistogram global_histogram(std::span<const ClassHistogram> local) {
  if (local.empty()) throw std::invalid_argument("global_histogram: no client histograms");
  ClassHistogram out(local.front().size(), 0);
  for (const auto& h : local) {
    if (h.size() != out.size()) throw DimensionError("global_histogram: class counts differ");
    for (std::size_t c = 0; c < h.size(); ++c) {
      if (h[c] < 0) throw std::invalid_argument("global_histogram: negative count");
      out[c] += h[c];
    }
  }
  return out;
}

std::int64_t QuotaPlan::total_quota() const {
  std::int64_t s = 0;
  for (auto q : quotas) s += q;
  return s;
}

QuotaPlan plan_quota(const ClassHistogram& local_labeled, std::int64_t n_unlabeled, const ClassHistogram& global,
                     double alpha) {
  if (local_labeled.size() != global.size()) throw DimensionError("plan_quota: class counts differ");
  if (!(alpha > 0.0)) throw std::invalid_argument("plan_quota: alpha must be positive");
  if (n_unlabeled < 0) throw std::invalid_argument("plan_quota: negative unlabeled count");
  std::int64_t g_total = 0, l_total = 0;
  for (auto v : global) g_total += v;
  for (auto v : local_labeled) l_total += v;
  if (g_total <= 0) throw std::invalid_argument("plan_quota: global histogram is empty");

  std::vector<double> weights(global.begin(), global.end());
  const std::int64_t total = round_half_up(alpha * static_cast<double>(l_total + n_unlabeled));
  QuotaPlan plan;
  plan.targets = largest_remainder(total, weights);
  plan.quotas.assign(global.size(), 0);
  if (total <= l_total) return plan;
  for (std::size_t c = 0; c < global.size(); ++c) plan.quotas[c] = std::max<std::int64_t>(0, plan.targets[c] - local_labeled[c]);
  return plan;
}

double effective_alpha(std::int64_t labeled_total, std::int64_t n_unlabeled, std::int64_t synthetic_total) {
  const std::int64_t denom = labeled_total + n_unlabeled;
  if (denom <= 0) throw std::invalid_argument("effective_alpha: client holds no data");
  return static_cast<double>(labeled_total + synthetic_total) / static_cast<double>(denom);
}

void SynthesisConfig::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("synthesis: alpha must be positive");
  if (per_class_cap && *per_class_cap < 0) throw std::invalid_argument("synthesis: cap must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("synthesis: batch_size must be >= 1");
}

QuotaPlan capped(QuotaPlan plan, const SynthesisConfig& config) {
  if (config.per_class_cap)
    for (auto& q : plan.quotas) q = std::min(q, *config.per_class_cap);
  return plan;
}

data::Dataset generate_synthetic(const QuotaPlan& plan, const Generator& gen, const SynthesisConfig& config,
                                 std::uint64_t seed, const data::Dataset& like) {
  config.validate();
  if (plan.quotas.size() != static_cast<std::size_t>(like.num_classes))
    throw DimensionError("generate_synthetic: one quota per class required");
  if (gen.vae_spec.input_dim != like.dim) throw DimensionError("generate_synthetic: decoder width mismatch");
  data::Dataset out = data::empty_like(like);
  for (std::size_t c = 0; c < plan.quotas.size(); ++c) {
    auto remaining = static_cast<std::size_t>(std::max<std::int64_t>(0, plan.quotas[c]));
    Rng rng(derive_seed(seed, {c}));
    while (remaining > 0) {
      const std::size_t n = std::min(remaining, config.batch_size);
      const nn::Matrix z = diffusion::sample_latents(gen.denoiser, gen.denoiser_spec, static_cast<int>(c), n,
                                                     gen.schedule, rng, config.variance);
      const nn::Matrix x = nn::vae_decode_batch(gen.vae, gen.vae_spec, z);
      for (std::size_t r = 0; r < n; ++r) {
        data::Sample s;
        s.features.reserve(x.cols);
        for (double v : x.row(r)) {
          if (!std::isfinite(v)) throw NumericError("generate_synthetic: non-finite decoded feature");
          s.features.push_back(static_cast<float>(v));
        }
        s.label = static_cast<int>(c);
        s.provenance = data::Provenance::synthetic;
        out.samples.push_back(std::move(s));
      }
      remaining -= n;
    }
  }
  return out;
}

void write_quota_json(const std::filesystem::path& path, std::span<const QuotaRecord> records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records)
    arr.push_back({{"client_id", r.client_id},
                   {"alpha_requested", r.alpha_requested},
                   {"alpha_realized", r.alpha_realized},
                   {"targets", r.plan.targets},
                   {"quotas", r.plan.quotas}});
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

std::vector<QuotaRecord> read_quota_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing " + path.string());
  try {
    const auto arr = nlohmann::json::parse(in);
    std::vector<QuotaRecord> out;
    for (const auto& j : arr) {
      QuotaRecord r;
      r.client_id = j.at("client_id").get<std::size_t>();
      r.alpha_requested = j.at("alpha_requested").get<double>();
      r.alpha_realized = j.at("alpha_realized").get<double>();
      r.plan.targets = j.at("targets").get<std::vector<std::int64_t>>();
      r.plan.quotas = j.at("quotas").get<std::vector<std::int64_t>>();
      out.push_back(std::move(r));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed quota json: ") + e.what());
  }
}

}  // namespace ddsa::synth
