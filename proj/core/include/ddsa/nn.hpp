#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ddsa/data.hpp"
#include "ddsa/rng.hpp"

namespace ddsa::nn {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Flat model parameters plus a named layout. Models address their weights
/// by segment name, so the order of segments in the flat buffer carries no
/// meaning.
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-filled segment.
  void add_segment(std::string name, std::size_t length);

  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;
  bool has_segment(std::string_view name) const;

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  const std::vector<Segment>& layout() const { return layout_; }

  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }
  ParamVector zeros_like() const;
  /// Same segments and values, laid out in `order`.
  ParamVector reordered(std::span<const std::string> order) const;

  /// Contiguous, non-overlapping layout and finite values.
  void validate() const;

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.layout_ == b.layout_ && a.values_ == b.values_;
  }

 private:
  const Segment& find(std::string_view name) const;

  std::vector<double> values_;
  std::vector<Segment> layout_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// `params.json` (layout) and `params.bin` (f32 little-endian values).
void save_params(const ParamVector& params, const std::filesystem::path& dir);
ParamVector load_params(const std::filesystem::path& dir);

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// A mini-batch: features as rows, labels (-1 where absent).
struct Batch {
  Matrix x;
  std::vector<int> y;

  std::size_t size() const { return x.rows; }
};

Batch make_batch(const data::Dataset& d);
Batch make_batch(const data::Dataset& d, std::span<const std::size_t> indices);

enum class Activation { relu, tanh };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;

  void validate() const;
};

/// Adds `<prefix>.l<i>.w` (out x in) and `<prefix>.l<i>.b` segments.
void add_mlp_segments(ParamVector& params, const MlpSpec& spec, std::string_view prefix);

/// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases.
void init_mlp(ParamVector& params, const MlpSpec& spec, std::string_view prefix, Rng& rng);

/// Per-layer activations kept for the backward pass.
struct MlpCache {
  std::vector<Matrix> inputs;  // input to each linear layer
  std::vector<Matrix> pre;     // pre-activation of each hidden layer
};

/// Forward pass. `first_layer_shift`, when given, is added to the first
/// layer's pre-activation (one row per batch item).
Matrix mlp_forward(const ParamVector& params, const MlpSpec& spec, std::string_view prefix,
                   const Matrix& x, MlpCache* cache = nullptr,
                   const Matrix* first_layer_shift = nullptr);

struct MlpBackward {
  Matrix d_input;
  Matrix d_first_pre;  // gradient w.r.t. the first layer's pre-activation
};

/// Reverse pass for `mlp_forward`. Parameter gradients are accumulated into
/// `grad`, which must share the layout of `params`.
MlpBackward mlp_backward(const ParamVector& params, const MlpSpec& spec, std::string_view prefix,
                         const MlpCache& cache, const Matrix& d_output, ParamVector& grad);

// ---------------------------------------------------------------------------
// Classifier

ParamVector make_classifier_params(const MlpSpec& spec);
ParamVector init_classifier(const MlpSpec& spec, std::uint64_t seed);

std::vector<double> classifier_forward(const ParamVector& params, const MlpSpec& spec,
                                       std::span<const double> features);
Matrix classifier_logits(const ParamVector& params, const MlpSpec& spec, const Matrix& x);
/// argmax of the logits, lowest index on ties.
std::vector<int> predict(const ParamVector& params, const MlpSpec& spec, const Matrix& x);

/// Softmax cross-entropy of one logit vector.
double cross_entropy(std::span<const double> logits, int label);

/// Mean cross-entropy over the batch. Fills `grad` when given.
double classifier_loss(const ParamVector& params, const MlpSpec& spec, const Batch& batch,
                       ParamVector* grad);

// ---------------------------------------------------------------------------
// Generic objective plumbing

/// Mean batch loss; adds the gradient into `grad` when it is non-null. The Rng
/// supplies any noise the objective needs, so a copied Rng replays the same
/// loss surface.
using LossFn = std::function<double(const ParamVector& params, const Batch& batch, Rng& rng,
                                    ParamVector* grad)>;

LossFn classifier_objective(MlpSpec spec);

/// Exact reverse-mode gradient of the mean batch loss. Throws NumericError
/// if the loss or any gradient entry is non-finite.
ParamVector gradient(const LossFn& loss, const ParamVector& params, const Batch& batch, Rng& rng);

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam, adamw };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(std::string_view s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One in-place update. SGD uses heavy-ball momentum with L2 weight decay
/// folded into the gradient; Adam does the same; AdamW decouples the decay.
/// `lr_scale` multiplies the configured learning rate.
void optimizer_step(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                    const OptimizerConfig& config, double lr_scale = 1.0);

// ---------------------------------------------------------------------------
// VAE

struct VaeSpec {
  std::size_t input_dim = 2;
  std::size_t latent_dim = 2;
  std::vector<std::size_t> hidden_dims{32};
  Activation activation = Activation::relu;

  void validate() const;
  double downsampling_factor() const {
    return static_cast<double>(input_dim) / static_cast<double>(latent_dim);
  }
  MlpSpec encoder() const;
  MlpSpec decoder() const;
};

ParamVector make_vae_params(const VaeSpec& spec);
ParamVector init_vae(const VaeSpec& spec, std::uint64_t seed);

struct Posterior {
  std::vector<double> mu;
  std::vector<double> logvar;
};

Posterior vae_encode(const ParamVector& params, const VaeSpec& spec, std::span<const double> features);
std::vector<double> vae_decode(const ParamVector& params, const VaeSpec& spec, std::span<const double> z);

/// Batched encoder; returns {mu, logvar}, each rows x latent_dim.
std::pair<Matrix, Matrix> vae_encode_batch(const ParamVector& params, const VaeSpec& spec, const Matrix& x);
Matrix vae_decode_batch(const ParamVector& params, const VaeSpec& spec, const Matrix& z);

/// KL(N(mu, exp(logvar)) || N(0, I)) for one item.
double kl_standard_normal(std::span<const double> mu, std::span<const double> logvar);

/// Mean over the batch of reconstruction MSE + kl_weight * KL, with the
/// reparameterisation noise supplied explicitly (rows x latent_dim).
double vae_loss_with_noise(const ParamVector& params, const VaeSpec& spec, const Batch& batch,
                           double kl_weight, const Matrix& eps, ParamVector* grad);

/// As above with eps ~ N(0, I) drawn from `rng`.
double vae_loss(const ParamVector& params, const VaeSpec& spec, const Batch& batch,
                double kl_weight, Rng& rng, ParamVector* grad);

LossFn vae_objective(VaeSpec spec, double kl_weight);

}  // namespace ddsa::nn
