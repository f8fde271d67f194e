#include "ddsa/diffusion.hpp"

#include <cmath>

#include "ddsa/error.hpp"
#include "json.hpp"

namespace ddsa::diffusion {

namespace {
constexpr const char* kPrefix = "den";
constexpr const char* kLabelEmbedding = "den.label_emb";
}  // namespace

void DiffusionSchedule::validate() const {
  if (beta.empty() || alpha.size() != beta.size() || alpha_bar.size() != beta.size())
    throw DimensionError("schedule: tables must be nonempty and of equal length");
  for (std::size_t i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw std::invalid_argument("schedule: beta must lie in (0, 1)");
    if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1]))
      throw std::invalid_argument("schedule: alpha_bar must decrease strictly");
  }
  if (!(alpha_bar.back() > 0.0)) throw std::invalid_argument("schedule: alpha_bar_T must be positive");
}

std::string DiffusionSchedule::to_json() const {
  nlohmann::json j = {{"T", steps()}, {"beta", beta}, {"alpha", alpha}, {"alpha_bar", alpha_bar}};
  return j.dump();
}

DiffusionSchedule DiffusionSchedule::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    DiffusionSchedule s;
    s.beta = j.at("beta").get<std::vector<double>>();
    s.alpha = j.at("alpha").get<std::vector<double>>();
    s.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed schedule json: ") + e.what());
  }
}

DiffusionSchedule make_schedule(std::size_t T, double beta_1, double beta_T) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_1 <= beta_T < 1");
  DiffusionSchedule s;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_1 + frac * (beta_T - beta_1);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  s.validate();
  return s;
}

std::vector<double> forward_sample(std::span<const double> z0, std::size_t t, std::span<const double> eps,
                                   const DiffusionSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw std::out_of_range("forward_sample: t outside [1, T]");
  if (eps.size() != z0.size()) throw DimensionError("forward_sample: eps and z0 differ in shape");
  const double a = std::sqrt(schedule.alpha_bar_at(t));
  const double b = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  std::vector<double> out(z0.size());
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

std::string_view to_string(PosteriorVariance v) { return v == PosteriorVariance::paper ? "paper" : "ddpm_beta"; }

PosteriorVariance posterior_variance_from_string(std::string_view s) {
  if (s == "paper") return PosteriorVariance::paper;
  if (s == "ddpm_beta") return PosteriorVariance::ddpm_beta;
  throw std::invalid_argument("unknown posterior variance '" + std::string(s) + "'");
}

void DenoiserSpec::validate() const {
  if (latent_dim < 1 || num_classes < 1 || time_embed_dim < 1)
    throw std::invalid_argument("denoiser: dims must be >= 1");
  mlp().validate();
}

nn::MlpSpec DenoiserSpec::mlp() const {
  return nn::MlpSpec{latent_dim + time_embed_dim, hidden_dims, latent_dim, activation};
}

std::size_t DenoiserSpec::label_embed_dim() const { return hidden_dims.empty() ? latent_dim : hidden_dims.front(); }

std::vector<double> timestep_embedding(std::size_t t, std::size_t dim) {
  std::vector<double> e(dim, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half > 1 ? half - 1 : 1));
    e[2 * i] = std::sin(static_cast<double>(t) * freq);
    e[2 * i + 1] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

ParamVector make_denoiser_params(const DenoiserSpec& spec) {
  spec.validate();
  ParamVector p;
  nn::add_mlp_segments(p, spec.mlp(), kPrefix);
  p.add_segment(kLabelEmbedding, static_cast<std::size_t>(spec.num_classes) * spec.label_embed_dim());
  return p;
}

ParamVector init_denoiser(const DenoiserSpec& spec, std::uint64_t seed) {
  ParamVector p = make_denoiser_params(spec);
  Rng rng(seed);
  nn::init_mlp(p, spec.mlp(), kPrefix, rng);
  for (auto& v : p.segment(kLabelEmbedding)) v = 0.1 * rng.gaussian();
  return p;
}

namespace {

struct DenoiserInputs {
  Matrix input;
  Matrix shift;
};

DenoiserInputs build_inputs(const ParamVector& params, const DenoiserSpec& spec, const Matrix& z_t,
                            std::span<const std::size_t> t, std::span<const int> labels) {
  const std::size_t n = z_t.rows;
  if (z_t.cols != spec.latent_dim) throw DimensionError("denoiser: latent width mismatch");
  if (t.size() != n || labels.size() != n) throw DimensionError("denoiser: one timestep and label per row");
  const std::size_t h = spec.latent_dim;
  const std::size_t te = spec.time_embed_dim;
  const std::size_t width = spec.label_embed_dim();
  const auto emb = params.segment(kLabelEmbedding);
  DenoiserInputs in{Matrix(n, h + te), Matrix(n, width)};
  std::size_t cached_t = 0;
  std::vector<double> temb;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || labels[r] >= spec.num_classes) throw DimensionError("denoiser: label out of range");
    for (std::size_t j = 0; j < h; ++j) in.input(r, j) = z_t(r, j);
    if (temb.empty() || cached_t != t[r]) {
      temb = timestep_embedding(t[r], te);
      cached_t = t[r];
    }
    for (std::size_t j = 0; j < te; ++j) in.input(r, h + j) = temb[j];
    const double* e = emb.data() + static_cast<std::size_t>(labels[r]) * width;
    for (std::size_t j = 0; j < width; ++j) in.shift(r, j) = e[j];
  }
  return in;
}

}  // namespace

Matrix denoiser_forward(const ParamVector& params, const DenoiserSpec& spec, const Matrix& z_t,
                        std::span<const std::size_t> t, std::span<const int> labels) {
  const DenoiserInputs in = build_inputs(params, spec, z_t, t, labels);
  return nn::mlp_forward(params, spec.mlp(), kPrefix, in.input, nullptr, &in.shift);
}

double cdm_loss_fixed(const ParamVector& params, const DenoiserSpec& spec, const Matrix& latents,
                      std::span<const int> labels, std::span<const std::size_t> t, const Matrix& eps,
                      const DiffusionSchedule& schedule, ParamVector* grad) {
  const std::size_t n = latents.rows;
  if (n == 0) return 0.0;
  if (eps.rows != n || eps.cols != latents.cols) throw DimensionError("cdm_loss: noise shape mismatch");
  Matrix z_t(n, latents.cols);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = forward_sample(latents.row(r), t[r], eps.row(r), schedule);
    std::copy(row.begin(), row.end(), z_t.row(r).begin());
  }
  const DenoiserInputs in = build_inputs(params, spec, z_t, t, labels);
  nn::MlpCache cache;
  const Matrix pred = nn::mlp_forward(params, spec.mlp(), kPrefix, in.input, grad ? &cache : nullptr, &in.shift);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  Matrix d(n, pred.cols);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double diff = eps.data[i] - pred.data[i];
    total += diff * diff;
    d.data[i] = -2.0 * diff * inv_n;
  }
  const double loss = total * inv_n;
  if (!std::isfinite(loss)) throw NumericError("cdm_loss: non-finite loss");
  if (grad) {
    const nn::MlpBackward back = nn::mlp_backward(params, spec.mlp(), kPrefix, cache, d, *grad);
    auto g_emb = grad->segment(kLabelEmbedding);
    const std::size_t width = spec.label_embed_dim();
    for (std::size_t r = 0; r < n; ++r) {
      double* ge = g_emb.data() + static_cast<std::size_t>(labels[r]) * width;
      for (std::size_t j = 0; j < width; ++j) ge[j] += back.d_first_pre(r, j);
    }
  }
  return loss;
}

double cdm_loss(const ParamVector& params, const DenoiserSpec& spec, const Matrix& latents,
                std::span<const int> labels, const DiffusionSchedule& schedule, Rng& rng, ParamVector* grad) {
  const std::size_t n = latents.rows;
  std::vector<std::size_t> t(n);
  Matrix eps(n, latents.cols);
  for (std::size_t r = 0; r < n; ++r) {
    t[r] = 1 + static_cast<std::size_t>(rng.below(schedule.steps()));
    for (auto& e : eps.row(r)) e = rng.gaussian();
  }
  return cdm_loss_fixed(params, spec, latents, labels, t, eps, schedule, grad);
}

nn::LossFn cdm_objective(DenoiserSpec spec, DiffusionSchedule schedule) {
  return [spec, schedule](const ParamVector& p, const nn::Batch& b, Rng& rng, ParamVector* g) {
    return cdm_loss(p, spec, b.x, b.y, schedule, rng, g);
  };
}

Matrix sample_latents_with(const NoisePredictor& predictor, std::size_t latent_dim, int label, std::size_t count,
                           const DiffusionSchedule& schedule, Rng& rng, PosteriorVariance variance) {
  Matrix z(count, latent_dim);
  for (auto& v : z.data) v = rng.gaussian();
  for (std::size_t t = schedule.steps(); t >= 1; --t) {
    const Matrix eps_hat = predictor(z, t, label);
    const double a = schedule.alpha_at(t);
    const double abar = schedule.alpha_bar_at(t);
    const double coef = (1.0 - a) / std::sqrt(1.0 - abar);
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double sigma = variance == PosteriorVariance::paper ? std::sqrt(1.0 - abar) : std::sqrt(schedule.beta_at(t));
    for (std::size_t i = 0; i < z.data.size(); ++i) {
      z.data[i] = inv_sqrt_a * (z.data[i] - coef * eps_hat.data[i]);
      if (t > 1) z.data[i] += sigma * rng.gaussian();
    }
  }
  return z;
}

Matrix sample_latents(const ParamVector& params, const DenoiserSpec& spec, int label, std::size_t count,
                      const DiffusionSchedule& schedule, Rng& rng, PosteriorVariance variance) {
  if (label < 0 || label >= spec.num_classes) throw DimensionError("sample_latents: label out of range");
  const NoisePredictor predictor = [&](const Matrix& z_t, std::size_t t, int y) {
    const std::vector<std::size_t> ts(z_t.rows, t);
    const std::vector<int> ys(z_t.rows, y);
    return denoiser_forward(params, spec, z_t, ts, ys);
  };
  return sample_latents_with(predictor, spec.latent_dim, label, count, schedule, rng, variance);
}

std::vector<double> sample_latent(const ParamVector& params, const DenoiserSpec& spec, int label,
                                  const DiffusionSchedule& schedule, Rng& rng, PosteriorVariance variance) {
  return sample_latents(params, spec, label, 1, schedule, rng, variance).data;
}

}  // namespace ddsa::diffusion
