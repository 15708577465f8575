#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lafa/common.hpp"
#include "lafa/ingest.hpp"

namespace lafa {

enum class HeadKind { Regression, Binary, Multilabel };

std::string to_string(HeadKind head);
HeadKind head_from_string(const std::string& name);

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t dim = 16;
  std::uint32_t hidden_width = 16;
  HeadKind head = HeadKind::Regression;
  std::uint32_t outputs = 1;  // K for multilabel; 1 otherwise
  std::uint64_t seed = 7;

  bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& config);

/// Embedding lookup -> per-token tanh layer -> mean pool -> linear head.
///
/// Scores are the pre-activation head outputs; predictions apply the sigmoid
/// for classification heads. Gradients are always taken of scores.
struct Model {
  ModelConfig config;
  Matrix embedding;      // vocab_size x dim
  Matrix hidden_weight;  // hidden_width x dim
  Vector hidden_bias;    // hidden_width
  Matrix head_weight;    // outputs x hidden_width
  Vector head_bias;      // outputs

  std::size_t output_width() const noexcept { return config.outputs; }
  bool operator==(const Model&) const = default;
};

/// Uniform(-b, b) weights with b = 1/sqrt(fan_in); the embedding table sees a
/// one-hot input, so its bound is 1.
Model init_model(const ModelConfig& config);

struct ForwardCache {
  Matrix embedded;    // T x dim, the input H
  Matrix hidden;      // T x hidden_width, tanh activations
  Vector pooled;      // hidden_width
  Vector scores;      // outputs, pre-activation
  Vector prediction;  // outputs
};

/// H0: rows are embedding-table rows of the token ids; the mask id maps to a
/// zero row. Throws LookupError for ids outside the vocabulary.
Matrix embed(const Model& model, const TokenizedText& text);

ForwardCache forward_embedded(const Model& model, const Matrix& embedded);
Vector forward(const Model& model, const TokenizedText& text);

/// Pre-activation score of one output coordinate at an arbitrary embedding input.
double output_score(const Model& model, const Matrix& embedded, std::size_t target);
/// d score_target / d H, same shape as H.
Matrix score_gradient(const Model& model, const Matrix& embedded, std::size_t target);

struct GradientMatrix {
  Matrix values;
  std::size_t target = 0;
};

GradientMatrix input_gradient(const Model& model, const TokenizedText& text, std::size_t target);

/// Layer 0 is H0; layer 1 the per-token tanh activations before pooling.
Matrix encode_layer(const Model& model, const TokenizedText& text, int layer);

struct TrainOptions {
  std::uint32_t epochs = 30;
  std::uint32_t batch_size = 32;
  double learning_rate = 0.01;
  std::uint64_t seed = 7;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_trace;  // mean per-sample loss seen during each epoch
};

/// Adam (0.9, 0.999, 1e-8). MSE for regression and multi-label (on sigmoid
/// outputs), cross-entropy for binary. Throws DivergenceError on a NaN loss.
TrainResult train(Model model, std::span<const TokenizedText> corpus, const TrainOptions& options);

/// Mean per-sample training objective over the corpus.
double evaluate_loss(const Model& model, std::span<const TokenizedText> corpus);

void save_model(const Model& model, const std::filesystem::path& file);
Model load_model(const std::filesystem::path& file);

/// Bundle with layers "0" (H0) and "1" (hidden activations) computed by the
/// model; requires hidden_width == dim.
Bundle encode_bundle(const Model& model, std::vector<TokenizedText> records, std::vector<std::string> vocab);

}  // namespace lafa
