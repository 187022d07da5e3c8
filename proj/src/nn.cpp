#include "fedsim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fedsim/error.hpp"

namespace fedsim::nn {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count) {
  if (first + count > m.rows) throw ShapeError("row slice out of range");
  Matrix out(count, m.cols);
  std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(first * m.cols), count * m.cols,
              out.data.begin());
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows) throw ShapeError("row index out of range");
    auto src = m.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols != parts.front().cols) throw ShapeError("vstack: column count mismatch");
    rows += p.rows;
  }
  Matrix out(rows, parts.front().cols);
  auto it = out.data.begin();
  for (const auto& p : parts) it = std::copy(p.data.begin(), p.data.end(), it);
  return out;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::size_t MlpModel::input_dim() const { return layers.empty() ? 0 : layers.front().weights.cols; }
std::size_t MlpModel::output_dim() const { return layers.empty() ? 0 : layers.back().weights.rows; }

std::size_t MlpModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.data.size() + l.biases.size();
  return n;
}

std::vector<LayerSpec> MlpModel::specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back({l.weights.cols, l.weights.rows, l.activation});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays) n += a.size();
  return n;
}

bool ModelParams::congruent_with(const ModelParams& other) const {
  if (layout != other.layout || arrays.size() != other.arrays.size()) return false;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].size() != other.arrays[i].size()) return false;
  }
  return true;
}

ModelParams zeros_like(std::span<const LayerSpec> layout) {
  ModelParams p;
  p.layout.assign(layout.begin(), layout.end());
  for (const auto& s : layout) {
    p.arrays.emplace_back(s.output_dim * s.input_dim, 0.0);
    p.arrays.emplace_back(s.output_dim, 0.0);
  }
  return p;
}

ModelParams to_params(const MlpModel& model) {
  ModelParams p;
  p.layout = model.specs();
  p.arrays.reserve(model.layers.size() * 2);
  for (const auto& l : model.layers) {
    p.arrays.push_back(l.weights.data);
    p.arrays.push_back(l.biases);
  }
  return p;
}

namespace {

void check_layout(const ModelParams& p) {
  if (p.arrays.size() != p.layout.size() * 2) throw ShapeError("parameter array count mismatch");
  for (std::size_t k = 0; k < p.layout.size(); ++k) {
    const auto& s = p.layout[k];
    if (p.arrays[2 * k].size() != s.output_dim * s.input_dim ||
        p.arrays[2 * k + 1].size() != s.output_dim) {
      throw ShapeError("parameter array " + std::to_string(k) + " does not match its layout");
    }
  }
}

void check_congruent(const MlpModel& model, const ModelParams& p) {
  if (p.layout != model.specs()) throw ShapeError("parameter layout does not match model");
  check_layout(p);
}

void check_finite_config(std::span<const LayerSpec> specs) {
  if (specs.empty()) throw ConfigError("model needs at least one layer");
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (specs[k].input_dim < 1 || specs[k].output_dim < 1) {
      throw ConfigError("layer " + std::to_string(k) + " has a zero dimension");
    }
    if (k + 1 < specs.size() && specs[k].output_dim != specs[k + 1].input_dim) {
      throw ConfigError("layer " + std::to_string(k) + " output_dim " +
                        std::to_string(specs[k].output_dim) + " != layer " +
                        std::to_string(k + 1) + " input_dim " +
                        std::to_string(specs[k + 1].input_dim));
    }
  }
}

double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: break;
  }
  return z;
}

// Derivative expressed through the pre-activation z and output y.
double activation_slope(Activation a, double z, double y) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::identity: break;
  }
  return 1.0;
}

}  // namespace

MlpModel from_params(const ModelParams& params) {
  check_finite_config(params.layout);
  check_layout(params);
  MlpModel m;
  for (std::size_t k = 0; k < params.layout.size(); ++k) {
    const auto& s = params.layout[k];
    m.layers.push_back({Matrix(s.output_dim, s.input_dim, params.arrays[2 * k]),
                        params.arrays[2 * k + 1], s.activation});
  }
  return m;
}

void load_params(MlpModel& model, const ModelParams& params) {
  check_congruent(model, params);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    model.layers[k].weights.data = params.arrays[2 * k];
    model.layers[k].biases = params.arrays[2 * k + 1];
  }
}

AdamState AdamState::for_model(const MlpModel& model, double learning_rate) {
  AdamState s;
  const auto specs = model.specs();
  s.first_moment = zeros_like(specs);
  s.second_moment = zeros_like(specs);
  s.learning_rate = learning_rate;
  return s;
}

MlpModel init_model(std::span<const LayerSpec> specs, std::uint64_t seed) {
  check_finite_config(specs);
  std::mt19937_64 rng(seed);
  MlpModel m;
  for (const auto& s : specs) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(s.input_dim + s.output_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Matrix(s.output_dim, s.input_dim), std::vector<double>(s.output_dim, 0.0),
                     s.activation};
    for (auto& w : layer.weights.data) w = dist(rng);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

std::vector<LayerSpec> mlp_specs(std::size_t input_dim, std::span<const std::size_t> hidden,
                                 std::size_t num_classes, Activation hidden_activation) {
  std::vector<LayerSpec> specs;
  std::size_t prev = input_dim;
  for (auto h : hidden) {
    specs.push_back({prev, h, hidden_activation});
    prev = h;
  }
  specs.push_back({prev, num_classes, Activation::identity});
  return specs;
}

ForwardCache forward(const MlpModel& model, const Matrix& inputs) {
  if (model.layers.empty()) throw ShapeError("forward on an empty model");
  if (inputs.cols != model.input_dim()) {
    throw ShapeError("input has " + std::to_string(inputs.cols) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  }
  ForwardCache cache;
  cache.inputs = inputs;
  cache.pre_activations.reserve(model.layers.size());
  cache.activations.reserve(model.layers.size());
  const Matrix* x = &cache.inputs;
  for (const auto& layer : model.layers) {
    const std::size_t out = layer.weights.rows;
    const std::size_t in = layer.weights.cols;
    Matrix z(x->rows, out);
    for (std::size_t i = 0; i < x->rows; ++i) {
      const double* xi = x->data.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wo = layer.weights.data.data() + o * in;
        double acc = layer.biases[o];
        for (std::size_t k = 0; k < in; ++k) acc += xi[k] * wo[k];
        z(i, o) = acc;
      }
    }
    Matrix a = z;
    if (layer.activation != Activation::identity) {
      for (auto& v : a.data) v = activate(layer.activation, v);
    }
    cache.pre_activations.push_back(std::move(z));
    cache.activations.push_back(std::move(a));
    x = &cache.activations.back();
  }
  return cache;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      p(i, c) = std::exp(row[c] - mx);
      sum += p(i, c);
    }
    for (std::size_t c = 0; c < logits.cols; ++c) p(i, c) /= sum;
  }
  return p;
}

LossResult softmax_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " != batch size " +
                     std::to_string(logits.rows));
  }
  if (logits.rows == 0) throw ShapeError("empty batch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= logits.cols) {
      throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " outside [0, " + std::to_string(logits.cols) + ")");
    }
  }
  LossResult r;
  r.d_logits = Matrix(logits.rows, logits.cols);
  const double inv_batch = 1.0 / static_cast<double>(logits.rows);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double log_norm = mx + std::log(sum);
    total += log_norm - row[labels[i]];
    for (std::size_t c = 0; c < logits.cols; ++c) {
      const double p = std::exp(row[c] - log_norm);
      r.d_logits(i, c) = (p - (c == labels[i] ? 1.0 : 0.0)) * inv_batch;
    }
  }
  r.loss = total * inv_batch;
  return r;
}

GradientSet backward(const MlpModel& model, const ForwardCache& cache, const Matrix& d_logits) {
  const std::size_t n_layers = model.layers.size();
  if (cache.activations.size() != n_layers || cache.pre_activations.size() != n_layers) {
    throw ShapeError("forward cache does not belong to this model");
  }
  const std::size_t batch = cache.inputs.rows;
  if (d_logits.rows != batch || d_logits.cols != model.output_dim()) {
    throw ShapeError("d_logits shape does not match forward cache");
  }
  for (std::size_t k = 0; k < n_layers; ++k) {
    if (cache.pre_activations[k].cols != model.layers[k].weights.rows ||
        cache.pre_activations[k].rows != batch) {
      throw ShapeError("forward cache does not belong to this model");
    }
  }

  GradientSet g;
  g.values = zeros_like(model.specs());
  g.sample_count = batch;

  Matrix delta = d_logits;  // d loss / d post-activation of layer k
  for (std::size_t kk = n_layers; kk-- > 0;) {
    const auto& layer = model.layers[kk];
    const Matrix& z = cache.pre_activations[kk];
    const Matrix& y = cache.activations[kk];
    if (layer.activation != Activation::identity) {
      for (std::size_t i = 0; i < delta.data.size(); ++i) {
        delta.data[i] *= activation_slope(layer.activation, z.data[i], y.data[i]);
      }
    }
    const Matrix& x = kk == 0 ? cache.inputs : cache.activations[kk - 1];
    const std::size_t out = layer.weights.rows;
    const std::size_t in = layer.weights.cols;
    auto& dw = g.values.arrays[2 * kk];
    auto& db = g.values.arrays[2 * kk + 1];
    for (std::size_t i = 0; i < batch; ++i) {
      const double* xi = x.data.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(i, o);
        db[o] += d;
        if (d == 0.0) continue;
        double* dwo = dw.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) dwo[k] += d * xi[k];
      }
    }
    if (kk == 0) break;
    Matrix prev(batch, in);
    for (std::size_t i = 0; i < batch; ++i) {
      double* pi = prev.data.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(i, o);
        if (d == 0.0) continue;
        const double* wo = layer.weights.data.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) pi[k] += d * wo[k];
      }
    }
    delta = std::move(prev);
  }
  return g;
}

BatchResult loss_and_gradients(const MlpModel& model, const Matrix& inputs,
                               std::span<const std::size_t> labels) {
  const auto cache = forward(model, inputs);
  auto loss = softmax_cross_entropy(cache.logits(), labels);
  return {loss.loss, backward(model, cache, loss.d_logits)};
}

void adam_step(MlpModel& model, const GradientSet& grads, AdamState& state) {
  check_congruent(model, grads.values);
  check_congruent(model, state.first_moment);
  check_congruent(model, state.second_moment);
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    for (std::size_t part = 0; part < 2; ++part) {
      auto& p = part == 0 ? model.layers[k].weights.data : model.layers[k].biases;
      const auto& g = grads.values.arrays[2 * k + part];
      auto& m = state.first_moment.arrays[2 * k + part];
      auto& v = state.second_moment.arrays[2 * k + part];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double m_hat = m[i] / correction1;
        const double v_hat = v[i] / correction2;
        p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
      }
    }
  }
}

void sgd_step(MlpModel& model, const GradientSet& grads, double learning_rate) {
  check_congruent(model, grads.values);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    for (std::size_t part = 0; part < 2; ++part) {
      auto& p = part == 0 ? model.layers[k].weights.data : model.layers[k].biases;
      const auto& g = grads.values.arrays[2 * k + part];
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
    }
  }
}

ModelParams average_params(std::span<const ModelParams> models, std::span<const double> weights) {
  if (models.empty()) throw AggregationError("no models to average");
  if (weights.size() != models.size()) {
    throw AggregationError("model count " + std::to_string(models.size()) +
                           " != weight count " + std::to_string(weights.size()));
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw AggregationError("negative or non-finite weight");
    total += w;
  }
  if (!(total > 0.0)) throw AggregationError("aggregation weights sum to zero");
  for (const auto& m : models) {
    if (!m.congruent_with(models.front())) throw ShapeError("models have different shapes");
  }

  ModelParams out = zeros_like(models.front().layout);
  for (std::size_t j = 0; j < models.size(); ++j) {
    const double w = weights[j] / total;
    if (w == 0.0) continue;
    for (std::size_t a = 0; a < out.arrays.size(); ++a) {
      auto& dst = out.arrays[a];
      const auto& src = models[j].arrays[a];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
  }
  return out;
}

GradientSet average_gradients(std::span<const GradientSet> reports) {
  if (reports.empty()) throw AggregationError("no gradient reports to average");
  std::size_t total = 0;
  for (const auto& r : reports) {
    if (!r.values.congruent_with(reports.front().values)) {
      throw ShapeError("gradient reports have different shapes");
    }
    total += r.sample_count;
  }
  if (total == 0) throw AggregationError("gradient reports cover zero samples");

  GradientSet out;
  out.values = zeros_like(reports.front().values.layout);
  out.sample_count = total;
  for (const auto& r : reports) {
    const double w = static_cast<double>(r.sample_count) / static_cast<double>(total);
    if (w == 0.0) continue;
    for (std::size_t a = 0; a < out.values.arrays.size(); ++a) {
      auto& dst = out.values.arrays[a];
      const auto& src = r.values.arrays[a];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
  }
  return out;
}

std::vector<std::size_t> argmax_rows(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows, 0);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto row = logits.row(i);
    // max_element returns the first maximum, so ties resolve to the lowest index.
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<std::size_t> predict(const MlpModel& model, const Matrix& inputs) {
  return argmax_rows(forward(model, inputs).logits());
}

}  // namespace fedsim::nn
