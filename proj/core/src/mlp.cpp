#include <algorithm>
#include <cmath>
#include <limits>

#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::nn {

namespace {

std::string weight_name(std::string_view prefix, std::size_t layer) {
  return std::string(prefix) + ".l" + std::to_string(layer) + ".w";
}
std::string bias_name(std::string_view prefix, std::size_t layer) {
  return std::string(prefix) + ".l" + std::to_string(layer) + ".b";
}

std::vector<std::size_t> layer_dims(const MlpSpec& spec) {
  std::vector<std::size_t> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  dims.push_back(spec.output_dim);
  return dims;
}

// out = in * W^T + b, W stored (out_dim x in_dim).
Matrix linear(const Matrix& in, std::span<const double> w, std::span<const double> b, std::size_t out_dim) {
  const std::size_t in_dim = in.cols;
  if (w.size() != out_dim * in_dim || b.size() != out_dim)
    throw DimensionError("linear layer: parameter shape mismatch");
  Matrix out(in.rows, out_dim);
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* x = in.data.data() + r * in_dim;
    double* y = out.data.data() + r * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = w.data() + o * in_dim;
      double acc = b[o];
      for (std::size_t i = 0; i < in_dim; ++i) acc += wr[i] * x[i];
      y[o] = acc;
    }
  }
  return out;
}

double activate(Activation a, double v) { return a == Activation::relu ? (v > 0.0 ? v : 0.0) : std::tanh(v); }

double activate_grad(Activation a, double pre) {
  if (a == Activation::relu) return pre > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(pre);
  return 1.0 - t * t;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

void MlpSpec::validate() const {
  if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("mlp: dims must be >= 1");
  for (auto h : hidden_dims)
    if (h < 1) throw std::invalid_argument("mlp: hidden dims must be >= 1");
}

Batch make_batch(const data::Dataset& d) {
  Batch b;
  b.x = Matrix(d.size(), d.dim);
  b.y.resize(d.size());
  for (std::size_t r = 0; r < d.size(); ++r) {
    const auto& s = d.samples[r];
    std::copy(s.features.begin(), s.features.end(), b.x.row(r).begin());
    b.y[r] = s.label ? *s.label : -1;
  }
  return b;
}

Batch make_batch(const data::Dataset& d, std::span<const std::size_t> indices) {
  Batch b;
  b.x = Matrix(indices.size(), d.dim);
  b.y.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& s = d.samples.at(indices[r]);
    std::copy(s.features.begin(), s.features.end(), b.x.row(r).begin());
    b.y[r] = s.label ? *s.label : -1;
  }
  return b;
}

void add_mlp_segments(ParamVector& params, const MlpSpec& spec, std::string_view prefix) {
  spec.validate();
  const auto dims = layer_dims(spec);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    params.add_segment(weight_name(prefix, l), dims[l + 1] * dims[l]);
    params.add_segment(bias_name(prefix, l), dims[l + 1]);
  }
}

void init_mlp(ParamVector& params, const MlpSpec& spec, std::string_view prefix, Rng& rng) {
  const auto dims = layer_dims(spec);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double a = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    for (auto& w : params.segment(weight_name(prefix, l))) w = rng.uniform(-a, a);
    for (auto& b : params.segment(bias_name(prefix, l))) b = 0.0;
  }
}

Matrix mlp_forward(const ParamVector& params, const MlpSpec& spec, std::string_view prefix, const Matrix& x,
                   MlpCache* cache, const Matrix* first_layer_shift) {
  if (x.cols != spec.input_dim) throw DimensionError("mlp: input has wrong width");
  const auto dims = layer_dims(spec);
  const std::size_t layers = dims.size() - 1;
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = linear(h, params.segment(weight_name(prefix, l)), params.segment(bias_name(prefix, l)), dims[l + 1]);
    if (l == 0 && first_layer_shift) {
      if (first_layer_shift->rows != z.rows || first_layer_shift->cols != z.cols)
        throw DimensionError("mlp: first-layer shift has wrong shape");
      for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += first_layer_shift->data[i];
    }
    if (cache) cache->inputs.push_back(std::move(h));
    if (l + 1 == layers) return z;
    Matrix a(z.rows, z.cols);
    for (std::size_t i = 0; i < z.data.size(); ++i) a.data[i] = activate(spec.activation, z.data[i]);
    if (cache) cache->pre.push_back(std::move(z));
    h = std::move(a);
  }
  return h;
}

MlpBackward mlp_backward(const ParamVector& params, const MlpSpec& spec, std::string_view prefix,
                         const MlpCache& cache, const Matrix& d_output, ParamVector& grad) {
  const auto dims = layer_dims(spec);
  const std::size_t layers = dims.size() - 1;
  if (cache.inputs.size() != layers) throw std::logic_error("mlp_backward: cache does not match spec");
  Matrix d = d_output;
  MlpBackward out;
  for (std::size_t li = layers; li-- > 0;) {
    if (li + 1 < layers) {
      const Matrix& pre = cache.pre[li];
      for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] *= activate_grad(spec.activation, pre.data[i]);
    }
    const Matrix& in = cache.inputs[li];
    const std::size_t in_dim = dims[li];
    const std::size_t out_dim = dims[li + 1];
    auto gw = grad.segment(weight_name(prefix, li));
    auto gb = grad.segment(bias_name(prefix, li));
    auto w = params.segment(weight_name(prefix, li));
    Matrix d_in(d.rows, in_dim);
    for (std::size_t r = 0; r < d.rows; ++r) {
      const double* dr = d.data.data() + r * out_dim;
      const double* xr = in.data.data() + r * in_dim;
      double* dir = d_in.data.data() + r * in_dim;
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double g = dr[o];
        gb[o] += g;
        double* gwr = gw.data() + o * in_dim;
        const double* wr = w.data() + o * in_dim;
        for (std::size_t i = 0; i < in_dim; ++i) {
          gwr[i] += g * xr[i];
          dir[i] += g * wr[i];
        }
      }
    }
    if (li == 0) out.d_first_pre = d;
    d = std::move(d_in);
  }
  out.d_input = std::move(d);
  return out;
}

ParamVector make_classifier_params(const MlpSpec& spec) {
  ParamVector p;
  add_mlp_segments(p, spec, "clf");
  return p;
}

ParamVector init_classifier(const MlpSpec& spec, std::uint64_t seed) {
  ParamVector p = make_classifier_params(spec);
  Rng rng(seed);
  init_mlp(p, spec, "clf", rng);
  return p;
}

Matrix classifier_logits(const ParamVector& params, const MlpSpec& spec, const Matrix& x) {
  return mlp_forward(params, spec, "clf", x);
}

std::vector<double> classifier_forward(const ParamVector& params, const MlpSpec& spec,
                                       std::span<const double> features) {
  Matrix x(1, features.size());
  std::copy(features.begin(), features.end(), x.data.begin());
  Matrix logits = classifier_logits(params, spec, x);
  for (double v : logits.data) check_finite(v, "classifier logits");
  return logits.data;
}

std::vector<int> predict(const ParamVector& params, const MlpSpec& spec, const Matrix& x) {
  Matrix logits = classifier_logits(params, spec, x);
  std::vector<int> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw DimensionError("cross_entropy: label out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    check_finite(v, "cross_entropy logits");
    mx = std::max(mx, v);
  }
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[static_cast<std::size_t>(label)];
}

double classifier_loss(const ParamVector& params, const MlpSpec& spec, const Batch& batch, ParamVector* grad) {
  if (batch.size() == 0) return 0.0;
  MlpCache cache;
  Matrix logits = mlp_forward(params, spec, "clf", batch.x, grad ? &cache : nullptr);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  Matrix d(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto row = logits.row(r);
    const int y = batch.y[r];
    total += cross_entropy(row, y);
    if (grad) {
      const double mx = *std::max_element(row.begin(), row.end());
      double sum = 0.0;
      for (double v : row) sum += std::exp(v - mx);
      for (std::size_t c = 0; c < row.size(); ++c)
        d(r, c) = (std::exp(row[c] - mx) / sum - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  if (grad) mlp_backward(params, spec, "clf", cache, d, *grad);
  return total * inv_n;
}

LossFn classifier_objective(MlpSpec spec) {
  return [spec](const ParamVector& p, const Batch& b, Rng&, ParamVector* g) {
    return classifier_loss(p, spec, b, g);
  };
}

ParamVector gradient(const LossFn& loss, const ParamVector& params, const Batch& batch, Rng& rng) {
  ParamVector g = params.zeros_like();
  const double value = loss(params, batch, rng, &g);
  check_finite(value, "loss");
  for (double v : g.values()) check_finite(v, "gradient");
  return g;
}

}  // namespace ddsa::nn
