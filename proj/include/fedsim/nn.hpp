#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fedsim::nn {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// Copies rows [first, first + count).
Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count);
/// Copies the listed rows in order.
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices);
/// Stacks matrices with equal column counts.
Matrix vstack(std::span<const Matrix> parts);

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2 };

const char* activation_name(Activation a);
Activation parse_activation(const std::string_view name);

struct LayerSpec {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Activation activation = Activation::identity;

  bool operator==(const LayerSpec&) const = default;
};

struct DenseLayer {
  Matrix weights;  // output_dim x input_dim
  std::vector<double> biases;
  Activation activation = Activation::identity;

  bool operator==(const DenseLayer&) const = default;
};

struct MlpModel {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  std::vector<LayerSpec> specs() const;

  bool operator==(const MlpModel&) const = default;
};

/// Flat parameter arrays in layer order: weights of layer 0, biases of layer 0,
/// weights of layer 1, ... The layout records the shapes the arrays follow.
struct ModelParams {
  std::vector<LayerSpec> layout;
  std::vector<std::vector<double>> arrays;

  std::size_t parameter_count() const;
  bool congruent_with(const ModelParams& other) const;

  bool operator==(const ModelParams&) const = default;
};

/// Zero-filled parameters for a layout.
ModelParams zeros_like(std::span<const LayerSpec> layout);

ModelParams to_params(const MlpModel& model);
MlpModel from_params(const ModelParams& params);
/// Overwrites the model's parameters. Throws ShapeError if the layouts differ.
void load_params(MlpModel& model, const ModelParams& params);

/// Gradient of the mean loss over `sample_count` examples.
struct GradientSet {
  ModelParams values;
  std::size_t sample_count = 0;

  bool operator==(const GradientSet&) const = default;
};

struct AdamState {
  ModelParams first_moment;
  ModelParams second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 0.001;

  static AdamState for_model(const MlpModel& model, double learning_rate = 0.001);

  bool operator==(const AdamState&) const = default;
};

struct ForwardCache {
  Matrix inputs;
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> activations;

  const Matrix& logits() const { return activations.back(); }
};

struct LossResult {
  double loss = 0.0;
  Matrix d_logits;
};

/// Glorot-uniform weights, zero biases. Throws ConfigError if the specs do not chain.
MlpModel init_model(std::span<const LayerSpec> specs, std::uint64_t seed);

/// Builds the layer chain input -> hidden... -> classes with `hidden_activation`
/// on every hidden layer and identity on the output.
std::vector<LayerSpec> mlp_specs(std::size_t input_dim, std::span<const std::size_t> hidden,
                                 std::size_t num_classes,
                                 Activation hidden_activation = Activation::relu);

ForwardCache forward(const MlpModel& model, const Matrix& inputs);

Matrix softmax(const Matrix& logits);

/// Mean categorical cross-entropy over the batch with softmax folded in.
/// d_logits = (softmax - onehot) / batch.
LossResult softmax_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels);

GradientSet backward(const MlpModel& model, const ForwardCache& cache, const Matrix& d_logits);

/// forward + loss + backward on one batch.
struct BatchResult {
  double loss = 0.0;
  GradientSet gradients;
};
BatchResult loss_and_gradients(const MlpModel& model, const Matrix& inputs,
                               std::span<const std::size_t> labels);

void adam_step(MlpModel& model, const GradientSet& grads, AdamState& state);
void sgd_step(MlpModel& model, const GradientSet& grads, double learning_rate);

/// sum_i w_i p_i / sum_i w_i, accumulated in input order.
ModelParams average_params(std::span<const ModelParams> models, std::span<const double> weights);

/// Sample-count-weighted mean of gradients, accumulated in input order.
GradientSet average_gradients(std::span<const GradientSet> reports);

/// Row-wise argmax; ties go to the lowest class index.
std::vector<std::size_t> argmax_rows(const Matrix& logits);
std::vector<std::size_t> predict(const MlpModel& model, const Matrix& inputs);

}  // namespace fedsim::nn
