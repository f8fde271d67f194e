#include <cmath>

#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::nn {

void VaeSpec::validate() const {
  if (input_dim < 1) throw std::invalid_argument("vae: input_dim must be >= 1");
  if (latent_dim < 1 || latent_dim > input_dim)
    throw std::invalid_argument("vae: latent_dim must lie in [1, input_dim]");
  for (auto h : hidden_dims)
    if (h < 1) throw std::invalid_argument("vae: hidden dims must be >= 1");
}

MlpSpec VaeSpec::encoder() const { return MlpSpec{input_dim, hidden_dims, 2 * latent_dim, activation}; }

MlpSpec VaeSpec::decoder() const {
  return MlpSpec{latent_dim, {hidden_dims.rbegin(), hidden_dims.rend()}, input_dim, activation};
}

ParamVector make_vae_params(const VaeSpec& spec) {
  spec.validate();
  ParamVector p;
  add_mlp_segments(p, spec.encoder(), "enc");
  add_mlp_segments(p, spec.decoder(), "dec");
  return p;
}

ParamVector init_vae(const VaeSpec& spec, std::uint64_t seed) {
  ParamVector p = make_vae_params(spec);
  Rng rng(seed);
  init_mlp(p, spec.encoder(), "enc", rng);
  init_mlp(p, spec.decoder(), "dec", rng);
  return p;
}

std::pair<Matrix, Matrix> vae_encode_batch(const ParamVector& params, const VaeSpec& spec, const Matrix& x) {
  const Matrix out = mlp_forward(params, spec.encoder(), "enc", x);
  const std::size_t h = spec.latent_dim;
  Matrix mu(x.rows, h), logvar(x.rows, h);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t j = 0; j < h; ++j) {
      mu(r, j) = out(r, j);
      logvar(r, j) = out(r, h + j);
    }
  return {std::move(mu), std::move(logvar)};
}

Matrix vae_decode_batch(const ParamVector& params, const VaeSpec& spec, const Matrix& z) {
  return mlp_forward(params, spec.decoder(), "dec", z);
}

Posterior vae_encode(const ParamVector& params, const VaeSpec& spec, std::span<const double> features) {
  Matrix x(1, features.size());
  std::copy(features.begin(), features.end(), x.data.begin());
  auto [mu, logvar] = vae_encode_batch(params, spec, x);
  return {std::move(mu.data), std::move(logvar.data)};
}

std::vector<double> vae_decode(const ParamVector& params, const VaeSpec& spec, std::span<const double> z) {
  Matrix m(1, z.size());
  std::copy(z.begin(), z.end(), m.data.begin());
  return vae_decode_batch(params, spec, m).data;
}

double kl_standard_normal(std::span<const double> mu, std::span<const double> logvar) {
  double kl = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j)
    kl += 0.5 * (mu[j] * mu[j] + std::exp(logvar[j]) - logvar[j] - 1.0);
  return kl;
}

double vae_loss_with_noise(const ParamVector& params, const VaeSpec& spec, const Batch& batch, double kl_weight,
                           const Matrix& eps, ParamVector* grad) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("vae_loss: empty batch");
  const std::size_t h = spec.latent_dim;
  const std::size_t d = spec.input_dim;
  if (eps.rows != n || eps.cols != h) throw DimensionError("vae_loss: noise has wrong shape");

  MlpCache enc_cache, dec_cache;
  const Matrix enc_out = mlp_forward(params, spec.encoder(), "enc", batch.x, grad ? &enc_cache : nullptr);
  Matrix z(n, h);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < h; ++j) z(r, j) = enc_out(r, j) + std::exp(0.5 * enc_out(r, h + j)) * eps(r, j);
  const Matrix recon = mlp_forward(params, spec.decoder(), "dec", z, grad ? &dec_cache : nullptr);

  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_d = 1.0 / static_cast<double>(d);
  double total = 0.0;
  Matrix d_recon(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    double se = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = recon(r, k) - batch.x(r, k);
      se += diff * diff;
      d_recon(r, k) = 2.0 * diff * inv_d * inv_n;
    }
    auto row = enc_out.row(r);
    total += se * inv_d + kl_weight * kl_standard_normal(row.subspan(0, h), row.subspan(h, h));
  }
  const double loss = total * inv_n;
  if (!std::isfinite(loss)) throw NumericError("vae_loss: non-finite loss");
  if (!grad) return loss;

  const MlpBackward dec_back = mlp_backward(params, spec.decoder(), "dec", dec_cache, d_recon, *grad);
  Matrix d_enc(n, 2 * h);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < h; ++j) {
      const double mu = enc_out(r, j);
      const double lv = enc_out(r, h + j);
      const double dz = dec_back.d_input(r, j);
      d_enc(r, j) = dz + kl_weight * mu * inv_n;
      d_enc(r, h + j) = dz * eps(r, j) * 0.5 * std::exp(0.5 * lv) + kl_weight * 0.5 * (std::exp(lv) - 1.0) * inv_n;
    }
  mlp_backward(params, spec.encoder(), "enc", enc_cache, d_enc, *grad);
  return loss;
}

double vae_loss(const ParamVector& params, const VaeSpec& spec, const Batch& batch, double kl_weight, Rng& rng,
                ParamVector* grad) {
  Matrix eps(batch.size(), spec.latent_dim);
  for (auto& e : eps.data) e = rng.gaussian();
  return vae_loss_with_noise(params, spec, batch, kl_weight, eps, grad);
}

LossFn vae_objective(VaeSpec spec, double kl_weight) {
  return [spec, kl_weight](const ParamVector& p, const Batch& b, Rng& rng, ParamVector* g) {
    return vae_loss(p, spec, b, kl_weight, rng, g);
  };
}

}  // namespace ddsa::nn
