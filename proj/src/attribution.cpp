#include "lafa/attribution.hpp"

#include <algorithm>
#include <cctype>
#include <random>

namespace lafa {

namespace {

void check_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " differs from input " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

void require_perturbable(const GradientProvider& p, const char* method) {
  if (!p.accepts_perturbed_input()) {
    throw ConfigError(std::string(method) + " needs gradients at perturbed inputs; this provider has only H0");
  }
}

void require_references(std::span<const Matrix> refs, const char* method) {
  if (refs.empty()) throw ConfigError(std::string(method) + " needs a nonempty reference set");
}

// Running mean: stays bit-exact when every sample is identical.
void accumulate_mean(Matrix& mean, const Matrix& sample, std::uint32_t k) {
  if (k == 0) {
    mean = sample;
  } else {
    mean += (sample - mean) / static_cast<double>(k + 1);
  }
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

void min_max_rescale(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo;
  const double span = *hi - *lo;
  for (auto& x : v) x = span > 0.0 ? (x - a) / span : 0.0;
}

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::Rand: return "rand";
    case Method::SimpleGrad: return "simplegrad";
    case Method::InputGrad: return "inputgrad";
    case Method::SmoothGrad: return "smoothgrad";
    case Method::InteGrad: return "integrad";
    case Method::ShapGrad: return "shapgrad";
    case Method::ShapDeep: return "shapdeep";
    case Method::LAFA: return "lafa";
  }
  return "simplegrad";
}

Method method_from_string(const std::string& name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == '-' || c == '_' || c == '*'; }), s.end());
  if (s == "rand" || s == "random") return Method::Rand;
  if (s == "simplegrad" || s == "grad") return Method::SimpleGrad;
  if (s == "inputgrad" || s == "gradinput" || s == "gradtimesinput") return Method::InputGrad;
  if (s == "smoothgrad") return Method::SmoothGrad;
  if (s == "integrad" || s == "integratedgrad" || s == "integratedgradients") return Method::InteGrad;
  if (s == "shapgrad") return Method::ShapGrad;
  if (s == "shapdeep") return Method::ShapDeep;
  if (s == "lafa") return Method::LAFA;
  throw ConfigError("unknown method '" + name + "'");
}

std::string to_string(ReferenceKind kind) { return kind == ReferenceKind::Zero ? "zero" : "neighbors"; }

ReferenceKind reference_from_string(const std::string& name) {
  if (name == "zero") return ReferenceKind::Zero;
  if (name == "neighbors" || name == "sampled") return ReferenceKind::Neighbors;
  throw ConfigError("unknown reference '" + name + "' (expected zero or neighbors)");
}

BundleGradientProvider::BundleGradientProvider(const Bundle& bundle, std::string layer)
    : bundle_(bundle), layer_(bundle.layer(layer)) {
  if (!layer_.gradients) throw SchemaError("layer '" + layer + "' has no stored gradients");
}

Matrix BundleGradientProvider::embed(const TokenizedText& text) const {
  return layer_.embeddings[bundle_.record_index(text.id)];
}

Matrix BundleGradientProvider::gradient(const TokenizedText& text, const Matrix& embedded, std::size_t) const {
  const auto r = bundle_.record_index(text.id);
  if (embedded != layer_.embeddings[r]) {
    throw ConfigError("stored gradients are only available at the unperturbed input");
  }
  return (*layer_.gradients)[r];
}

double BundleGradientProvider::score(const TokenizedText&, const Matrix&, std::size_t) const {
  throw ConfigError("stored gradients carry no model outputs");
}

std::size_t resolve_target(const GradientProvider& p, const TokenizedText& text, const TargetSelector& sel) {
  const auto width = p.output_width();
  if (width == 1) return 0;
  switch (sel.rule) {
    case TargetRule::Fixed:
      if (sel.fixed >= width) throw RangeError("target " + std::to_string(sel.fixed) + " outside head");
      return sel.fixed;
    case TargetRule::Label:
      if (text.label) {
        if (const auto* set = std::get_if<std::vector<std::uint32_t>>(&*text.label); set && !set->empty()) {
          return std::min<std::size_t>(*std::min_element(set->begin(), set->end()), width - 1);
        }
        if (const auto* v = std::get_if<double>(&*text.label)) {
          return std::min<std::size_t>(static_cast<std::size_t>(std::max(0.0, *v)), width - 1);
        }
      }
      [[fallthrough]];
    case TargetRule::Predicted: {
      const Matrix h = p.embed(text);
      std::size_t best = 0;
      double best_score = p.score(text, h, 0);
      for (std::size_t k = 1; k < width; ++k) {
        const double s = p.score(text, h, k);
        if (s > best_score) {
          best = k;
          best_score = s;
        }
      }
      return best;
    }
  }
  return 0;
}

AttributionVector to_attribution(const Matrix& raw, Method method, RecordId text_id) {
  return AttributionVector{to_std(squared_reduce(raw)), method, text_id};
}

Matrix align_reference(const Matrix& reference, Eigen::Index rows) {
  Matrix out = Matrix::Zero(rows, reference.cols());
  const auto keep = std::min(rows, reference.rows());
  out.topRows(keep) = reference.topRows(keep);
  return out;
}

Matrix simple_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target) {
  const Matrix h0 = p.embed(text);
  Matrix g = p.gradient(text, h0, target);
  check_shape(g, h0, "gradient");
  return g;
}

Matrix grad_times_input_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target) {
  const Matrix h0 = p.embed(text);
  const Matrix g = p.gradient(text, h0, target);
  check_shape(g, h0, "gradient");
  return h0.cwiseProduct(g);
}

Matrix smooth_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target, std::uint32_t samples,
                       double sigma, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("SmoothGrad needs N >= 1");
  if (!(sigma >= 0.0)) throw ConfigError("SmoothGrad needs sigma >= 0");
  const Matrix h0 = p.embed(text);
  if (sigma > 0.0) require_perturbable(p, "SmoothGrad");
  std::mt19937_64 rng(derive_seed(seed, text.id));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix mean;
  Matrix noisy(h0.rows(), h0.cols());
  for (std::uint32_t k = 0; k < samples; ++k) {
    for (Eigen::Index i = 0; i < h0.rows(); ++i) {
      for (Eigen::Index j = 0; j < h0.cols(); ++j) noisy(i, j) = h0(i, j) + sigma * gauss(rng);
    }
    accumulate_mean(mean, p.gradient(text, noisy, target), k);
  }
  check_shape(mean, h0, "gradient");
  return mean;
}

Matrix integrated_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                           std::uint32_t steps, const Matrix& reference) {
  if (steps == 0) throw ConfigError("Integrated Gradient needs N >= 1");
  require_perturbable(p, "Integrated Gradient");
  const Matrix h0 = p.embed(text);
  check_shape(reference, h0, "reference");
  const Matrix diff = h0 - reference;
  Matrix mean;
  for (std::uint32_t k = 1; k <= steps; ++k) {
    const Matrix point = reference + (static_cast<double>(k) / steps) * diff;
    accumulate_mean(mean, p.gradient(text, point, target), k - 1);
  }
  return diff.cwiseProduct(mean);
}

Matrix shap_grad_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target, std::uint32_t samples,
                     std::span<const Matrix> references, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("SHAP-Gradient needs N >= 1");
  require_references(references, "SHAP-Gradient");
  require_perturbable(p, "SHAP-Gradient");
  const Matrix h0 = p.embed(text);
  for (const auto& r : references) check_shape(r, h0, "reference");
  std::mt19937_64 rng(derive_seed(seed, text.id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, references.size() - 1);
  Matrix mean;
  for (std::uint32_t k = 0; k < samples; ++k) {
    const double alpha = unit(rng);
    const Matrix& ref = references[pick(rng)];
    const Matrix point = alpha * h0 + (1.0 - alpha) * ref;
    accumulate_mean(mean, p.gradient(text, point, target), k);
  }
  return mean;
}

Matrix shap_deep_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                     std::span<const Matrix> references) {
  require_references(references, "SHAP-Deep");
  const Matrix h0 = p.embed(text);
  Matrix mean;
  std::uint32_t k = 0;
  for (const auto& ref : references) {
    check_shape(ref, h0, "reference");
    if (ref != h0) require_perturbable(p, "SHAP-Deep");
    const Matrix g = p.gradient(text, ref, target);
    accumulate_mean(mean, g.cwiseProduct(h0 - ref), k++);
  }
  return mean;
}

AttributionVector simple_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target) {
  return to_attribution(simple_grad_raw(p, text, target), Method::SimpleGrad, text.id);
}

AttributionVector grad_times_input(const GradientProvider& p, const TokenizedText& text, std::size_t target) {
  return to_attribution(grad_times_input_raw(p, text, target), Method::InputGrad, text.id);
}

AttributionVector smooth_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                              std::uint32_t samples, double sigma, std::uint64_t seed) {
  return to_attribution(smooth_grad_raw(p, text, target, samples, sigma, seed), Method::SmoothGrad, text.id);
}

AttributionVector integrated_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                                  std::uint32_t steps, const Matrix& reference) {
  return to_attribution(integrated_grad_raw(p, text, target, steps, reference), Method::InteGrad, text.id);
}

AttributionVector shap_grad(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            std::uint32_t samples, std::span<const Matrix> references, std::uint64_t seed) {
  return to_attribution(shap_grad_raw(p, text, target, samples, references, seed), Method::ShapGrad, text.id);
}

AttributionVector shap_deep(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            std::span<const Matrix> references) {
  return to_attribution(shap_deep_raw(p, text, target, references), Method::ShapDeep, text.id);
}

AttributionVector rand_baseline(const TokenizedText& text, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, text.id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AttributionVector out{std::vector<double>(text.length()), Method::Rand, text.id};
  for (auto& s : out.scores) s = unit(rng);
  return out;
}

void validate(const MethodConfig& c) {
  if (c.samples == 0) throw ConfigError("N must be at least 1");
  if (!(c.sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
}

Matrix attribute_raw(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                     const MethodConfig& c, std::span<const Matrix> references) {
  validate(c);
  std::vector<Matrix> refs;
  if (c.method == Method::InteGrad || c.method == Method::ShapGrad || c.method == Method::ShapDeep) {
    const Matrix h0 = p.embed(text);
    if (c.reference == ReferenceKind::Zero) {
      refs.push_back(Matrix::Zero(h0.rows(), h0.cols()));
    } else {
      if (references.empty()) {
        throw ConfigError(to_string(c.method) + " with neighbor references needs a nonempty reference set");
      }
      for (const auto& r : references) refs.push_back(align_reference(r, h0.rows()));
    }
  }
  switch (c.method) {
    case Method::SimpleGrad: return simple_grad_raw(p, text, target);
    case Method::InputGrad: return grad_times_input_raw(p, text, target);
    case Method::SmoothGrad: return smooth_grad_raw(p, text, target, c.samples, c.sigma, c.seed);
    case Method::InteGrad: {
      // Several references: average the per-reference path integrals.
      Matrix mean;
      std::uint32_t k = 0;
      for (const auto& ref : refs) accumulate_mean(mean, integrated_grad_raw(p, text, target, c.samples, ref), k++);
      return mean;
    }
    case Method::ShapGrad: return shap_grad_raw(p, text, target, c.samples, refs, c.seed);
    case Method::ShapDeep: return shap_deep_raw(p, text, target, refs);
    case Method::Rand:
    case Method::LAFA: break;
  }
  throw ConfigError(to_string(c.method) + " has no raw gradient matrix");
}

AttributionVector attribute(const GradientProvider& p, const TokenizedText& text, std::size_t target,
                            const MethodConfig& c, std::span<const Matrix> references) {
  if (c.method == Method::Rand) return rand_baseline(text, c.seed);
  if (c.method == Method::LAFA) throw ConfigError("LAFA needs a bundle and an index; use lafa()");
  return to_attribution(attribute_raw(p, text, target, c, references), c.method, text.id);
}

void validate(const LafaConfig& c) {
  if (c.base.method == Method::LAFA) throw ConfigError("LAFA cannot be its own base method");
  validate(c.base);
  validate(c.kernel);
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
  if (c.neighbors.epsilon && !(*c.neighbors.epsilon >= 0.0)) throw ConfigError("epsilon must be nonnegative");
  if (!(c.neighbors.cutoff_quantile >= 0.0 && c.neighbors.cutoff_quantile <= 1.0)) {
    throw ConfigError("cutoff quantile must lie in [0, 1]");
  }
}

double resolve_epsilon(const SentenceIndex& index, const NeighborParams& params, std::uint64_t seed) {
  if (params.epsilon) return *params.epsilon;
  if (index.epsilon) return *index.epsilon;
  return estimate_epsilon(index, params.cutoff_quantile, params.sample_pairs, seed);
}

LafaResult lafa_detailed(const GradientProvider& p, const Bundle& bundle, const SentenceIndex& index,
                         const TokenizedText& text, std::size_t target, const LafaConfig& config) {
  validate(config);
  if (!index.layer.empty() && index.layer != config.encoder_layer) {
    throw ConfigError("index was built on layer '" + index.layer + "', config expects '" + config.encoder_layer + "'");
  }

  // Step I: localisation.
  const double eps = resolve_epsilon(index, config.neighbors, config.base.seed);
  LafaResult out;
  out.neighbors = query_neighbors(index, text.id, config.neighbors.max_neighbors, eps,
                                  config.neighbors.same_label_only);

  std::vector<const TokenizedText*> members{&text};
  std::vector<Matrix> embeddings{p.embed(text)};
  for (auto id : out.neighbors.neighbor_ids) {
    members.push_back(&bundle.record(id));
    embeddings.push_back(p.embed(*members.back()));
  }

  // Step II: base attributions. Neighbor references for member m are the
  // other members of {X0} + X_sim; without neighbors fall back to zero.
  auto base_for = [&](std::size_t m) {
    MethodConfig base = config.base;
    std::vector<Matrix> refs;
    if (base.reference == ReferenceKind::Neighbors) {
      for (std::size_t o = 0; o < members.size(); ++o) {
        if (o != m) refs.push_back(embeddings[o]);
      }
      if (refs.empty()) base.reference = ReferenceKind::Zero;
    }
    return attribute(p, *members[m], target, base, refs);
  };

  out.base = base_for(0);
  out.attribution = out.base;
  out.attribution.method = Method::LAFA;
  out.aggregated.assign(text.length(), 0.0);
  if (out.neighbors.neighbor_ids.empty() || config.lambda == 0.0) return out;

  std::vector<NeighborAttribution> neighbors;
  neighbors.reserve(members.size() - 1);
  for (std::size_t m = 1; m < members.size(); ++m) {
    neighbors.push_back(NeighborAttribution{base_for(m).scores, embeddings[m]});
  }

  // Step III: kernel aggregation over input-embedding rows.
  const Matrix& h0 = embeddings[0];
  for (Eigen::Index i = 0; i < h0.rows(); ++i) {
    out.aggregated[static_cast<std::size_t>(i)] = aggregate_neighbor_scores(h0.row(i), neighbors, config.kernel);
  }
  auto own = out.base.scores;
  auto agg = out.aggregated;
  if (config.rescale) {
    min_max_rescale(own);
    min_max_rescale(agg);
  }
  for (std::size_t i = 0; i < own.size(); ++i) out.attribution.scores[i] = own[i] + config.lambda * agg[i];
  return out;
}

AttributionVector lafa(const GradientProvider& p, const Bundle& bundle, const SentenceIndex& index,
                       const TokenizedText& text, std::size_t target, const LafaConfig& config) {
  return lafa_detailed(p, bundle, index, text, target, config).attribution;
}

}  // namespace lafa
