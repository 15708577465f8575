#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lafa/common.hpp"
#include "lafa/ingest.hpp"
#include "lafa/kernels.hpp"
#include "lafa/micromodel.hpp"
#include "lafa/vecstore.hpp"

namespace lafa {

enum class Method { Rand, SimpleGrad, InputGrad, SmoothGrad, InteGrad, ShapGrad, ShapDeep, LAFA };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

struct AttributionVector {
  std::vector<double> scores;
  Method method = Method::SimpleGrad;
  RecordId text_id = 0;

  std::size_t size() const noexcept { return scores.size(); }
  bool operator==(const AttributionVector&) const = default;
};

/// Differentiable view of a model at its input-embedding layer.
class GradientProvider {
 public:
  virtual ~GradientProvider() = default;

  /// H0 for a text.
  virtual Matrix embed(const TokenizedText& text) const = 0;
  /// d F_target / d H evaluated at `embedded` (which need not equal H0).
  virtual Matrix gradient(const TokenizedText& text, const Matrix& embedded, std::size_t target) const = 0;
  /// F_target at `embedded`; the differentiated (pre-activation) score.
  virtual double score(const TokenizedText& text, const Matrix& embedded, std::size_t target) const = 0;
  virtual std::size_t output_width() const = 0;
  /// False when gradients exist only at H0 (ingested gradients).
  virtual bool accepts_perturbed_input() const { return true; }
};

class ModelProvider final : public GradientProvider {
 public:
  explicit ModelProvider(const Model& model) : model_(model) {}

  Matrix embed(const TokenizedText& text) const override { return lafa::embed(model_, text); }
  Matrix gradient(const TokenizedText&, const Matrix& embedded, std::size_t target) const override {
    return score_gradient(model_, embedded, target);
  }
  double score(const TokenizedText&, const Matrix& embedded, std::size_t target) const override {
    return output_score(model_, embedded, target);
  }
  std::size_t output_width() const override { return model_.output_width(); }
  const Model& model() const noexcept { return model_; }

 private:
  const Model& model_;
};

/// Serves externally computed gradients stored in a bundle layer. Only the
/// gradient at the stored H0 is available.
class BundleGradientProvider final : public GradientProvider {
 public:
  BundleGradientProvider(const Bundle& bundle, std::string layer);

  Matrix embed(const TokenizedText& text) const override;
  Matrix gradient(const TokenizedText& text, const Matrix& embedded, std::size_t target) const override;
  double score(const TokenizedText& text, const Matrix& embedded, std::size_t target) const override;
  std::size_t output_width() const override { return 1; }
  bool accepts_perturbed_input() const override { return false; }

 private:
  const Bundle& bundle_;
  const Layer& layer_;
};

// ---------------------------------------------------------------------------
// Target selection

enum class TargetRule { Predicted, Label, Fixed };

struct TargetSelector {
  TargetRule rule = TargetRule::Predicted;
  std::size_t fixed = 0;
};

/// Output coordinate to explain: argmax score, the (first) labelled class, or
/// a fixed index. Single-output heads always yield 0.
std::size_t resolve_target(const GradientProvider& provider, const TokenizedText& text, const TargetSelector& selector);

// ---------------------------------------------------------------------------
// Base methods. *_raw functions return the T x d matrix before reduction.

/// scores_i = sum_j raw(i, j)^2
template <typename Derived>
VectorX<typename Derived::Scalar> squared_reduce(const Eigen::MatrixBase<Derived>& raw) {
  return raw.rowwise().squaredNorm();
}

AttributionVector to_attribution(const Matrix& raw, Method method, RecordId text_id);

/// Truncates or zero-pads a reference embedding to `rows` rows.
Matrix align_reference(const Matrix& reference, Eigen::Index rows);

Matrix simple_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target);
Matrix grad_times_input_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target);
/// Mean gradient over N Gaussian perturbations of H0 (element-wise sd sigma).
/// The RNG stream is derived from (seed, text id).
Matrix smooth_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target, std::uint32_t samples,
                       double sigma, std::uint64_t seed);
/// Right-endpoint Riemann sum of the path integral from `reference` to H0.
Matrix integrated_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                           std::uint32_t steps, const Matrix& reference);
/// Mean gradient at alpha H0 + (1 - alpha) H_k, alpha ~ U(0, 1), H_k drawn
/// uniformly from the references.
Matrix shap_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target, std::uint32_t samples,
                     std::span<const Matrix> references, std::uint64_t seed);
/// Mean over references of gradient(H_k) * (H0 - H_k), element-wise.
Matrix shap_deep_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                     std::span<const Matrix> references);

AttributionVector simple_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target);
AttributionVector grad_times_input(const GradientProvider& p, const TokenizedText& text, std::size_t target);
AttributionVector smooth_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                              std::uint32_t samples, double sigma, std::uint64_t seed);
AttributionVector integrated_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                                  std::uint32_t steps, const Matrix& reference);
AttributionVector shap_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            std::uint32_t samples, std::span<const Matrix> references, std::uint64_t seed);
AttributionVector shap_deep(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            std::span<const Matrix> references);

/// Uniform(0, 1) scores from a stream derived from (seed, text id).
AttributionVector rand_baseline(const TokenizedText& text, std::uint64_t seed);

enum class ReferenceKind { Zero, Neighbors };

std::string to_string(ReferenceKind kind);
ReferenceKind reference_from_string(const std::string& name);

struct MethodConfig {
  Method method = Method::SimpleGrad;
  std::uint32_t samples = 25;  // N
  double sigma = 0.1;
  ReferenceKind reference = ReferenceKind::Zero;
  std::uint64_t seed = 7;
};

void validate(const MethodConfig& config);

/// Runs any non-LAFA method. `references` are used when the config asks for
/// neighbor references; otherwise the zero embedding is the only reference.
Matrix attribute_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                     const MethodConfig& config, std::span<const Matrix> references = {});
AttributionVector attribute(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            const MethodConfig& config, std::span<const Matrix> references = {});

// ---------------------------------------------------------------------------
// Local aggregation

/// A neighbor's base attribution together with its token embeddings (H0).
struct NeighborAttribution {
  std::vector<double> scores;
  Matrix embeddings;
};

/// E(w; X_sim) = 1/|X_sim| * sum_i sum_k m_ik k(h, h_ik) / T_i; 0 for no neighbors.
template <typename Derived>
double aggregate_neighbor_scores(const Eigen::MatrixBase<Derived>& h, std::span<const NeighborAttribution> neighbors,
                                 const KernelSpec& kernel) {
  if (neighbors.empty()) return 0.0;
  double outer = 0.0;
  for (const auto& n : neighbors) {
    if (static_cast<Eigen::Index>(n.scores.size()) != n.embeddings.rows() || n.scores.empty()) {
      throw ShapeError("neighbor attribution and embedding rows are not aligned");
    }
    double inner = 0.0;
    for (Eigen::Index k = 0; k < n.embeddings.rows(); ++k) {
      inner += n.scores[static_cast<std::size_t>(k)] * eval_kernel(kernel, h, n.embeddings.row(k).transpose());
    }
    outer += inner / static_cast<double>(n.embeddings.rows());
  }
  return outer / static_cast<double>(neighbors.size());
}

struct NeighborParams {
  std::size_t max_neighbors = 10;           // M
  std::optional<double> epsilon;            // explicit cutoff; else the index's
  double cutoff_quantile = 0.05;            // used when estimating the cutoff
  std::size_t sample_pairs = 10000;
  bool same_label_only = false;
};

struct LafaConfig {
  MethodConfig base;        // base.method must not be LAFA
  double lambda = 1.0;
  KernelSpec kernel;        // Indicator by default
  NeighborParams neighbors;
  std::string encoder_layer = "1";
  bool rescale = false;     // min-max rescale both terms before combining
};

void validate(const LafaConfig& config);

/// Cutoff for a query: the explicit epsilon, else the index's stored one,
/// else the configured quantile of sampled pair distances.
double resolve_epsilon(const SentenceIndex& index, const NeighborParams& params, std::uint64_t seed);

struct LafaResult {
  AttributionVector attribution;
  AttributionVector base;
  std::vector<double> aggregated;  // E per token of the text
  NeighborSet neighbors;
};

/// M(X0) + lambda * (E(w_1; X_sim), ..., E(w_T; X_sim)). Neighbors come from
/// the index, their base attributions use the same target, and every kernel
/// compares input-embedding rows. With no neighbors (or lambda = 0) the
/// result is the base attribution itself.
LafaResult lafa_detailed(const GradientProvider& p, const Bundle& bundle, const SentenceIndex& index,
                         const TokenizedText& text, std::size_t target, const LafaConfig& config);
AttributionVector lafa(const GradientProvider& p, const Bundle& bundle, const SentenceIndex& index,
                       const TokenizedText& text, std::size_t target, const LafaConfig& config);

}  // namespace lafa
