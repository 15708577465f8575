#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lafa/attribution.hpp"
#include "lafa/ingest.hpp"
#include "lafa/micromodel.hpp"
#include "lafa/vecstore.hpp"

namespace lafa {

// ---------------------------------------------------------------------------
// Per-text metrics

/// Rank (Mann-Whitney) AUC; tied scores count one half. Gold entries must be
/// 0 or 1 with both classes present, else UndefinedMetricError.
double auc(std::span<const double> scores, std::span<const double> gold);

/// Sample Pearson correlation. Throws UndefinedMetricError for constant input.
double pearson(std::span<const double> scores, std::span<const double> gold);

/// Number of positions masked at p percent of T, rounding half up.
std::size_t mask_count(std::size_t length, double percent);

/// Replaces the round(p T / 100) highest-scoring tokens (earlier position
/// first on ties) with the mask token, which embeds to zero.
TokenizedText mask_top_p(const TokenizedText& text, std::span<const double> scores, double percent);

// ---------------------------------------------------------------------------
// Corpus-level reports

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n < 2
  std::size_t n = 0;
};

Summary summarize(std::span<const double> values);

/// "0.457(0.074)"
std::string format_mean_std(double mean, double std, int digits = 3);

struct EvalReport {
  std::string metric;
  std::vector<RecordId> ids;
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;
  std::size_t skipped = 0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
};

EvalReport make_report(std::string metric, std::vector<RecordId> ids, std::vector<double> values,
                       std::size_t skipped, nlohmann::json config = nlohmann::json::object());

/// AUC of each attribution against its record's gold. Records without gold or
/// with single-class gold are skipped and counted.
EvalReport evaluate_auc(std::span<const AttributionVector> attributions, const Bundle& bundle,
                        nlohmann::json config = nlohmann::json::object());
EvalReport evaluate_pearson(std::span<const AttributionVector> attributions, const Bundle& bundle,
                            nlohmann::json config = nlohmann::json::object());

// ---------------------------------------------------------------------------
// Masking evaluation

using Scorer = std::function<std::vector<double>(const TokenizedText&)>;

struct MapePoint {
  double percent = 0.0;
  double mape = 0.0;  // in percent
  std::size_t n = 0;
  std::size_t excluded = 0;  // texts with y == 0
};

struct MapeCurve {
  std::string method;
  std::vector<MapePoint> points;

  const MapePoint& at(double percent) const;
};

inline const std::vector<double> kDefaultPGrid{1, 2, 5, 10, 25, 50};

/// Texts whose regression prediction lies within `tolerance` relative error of
/// the label; a seeded random subset of at most `limit` of them, in id order.
std::vector<TokenizedText> select_eval_set(const Model& model, std::span<const TokenizedText> texts,
                                           double tolerance, std::size_t limit, std::uint64_t seed);

/// Mean |y - y_masked| / |y| (percent) after masking each text at every p of
/// the grid, using scores computed once on the unmasked text. The scorer is
/// called concurrently when threads > 1.
MapeCurve mask_eval(const Model& model, std::span<const TokenizedText> texts, const Scorer& scorer,
                    std::span<const double> p_grid, std::string method_name, std::size_t threads = 1);

/// CSV with header "p,method,MAPE,n".
std::string mape_csv(std::span<const MapeCurve> curves);

// ---------------------------------------------------------------------------
// Neighbor analyses

struct PrecisionReport {
  std::vector<RecordId> centers;
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;
  std::size_t skipped_empty = 0;
};

/// Fraction of each center's neighbors sharing its category. `categories` is
/// aligned with index rows; centers with no neighbors are skipped and counted.
/// `centers` limits the evaluation to a subset of index rows.
PrecisionReport neighbor_precision(const SentenceIndex& index, std::span<const std::int64_t> categories,
                                   std::size_t max_neighbors, double epsilon,
                                   std::optional<std::span<const std::size_t>> centers = std::nullopt);

/// Category keys of every record, in bundle order; throws DataError when one
/// is missing.
std::vector<std::int64_t> bundle_categories(const Bundle& bundle, LabelKey key = LabelKey::Category);

struct LayerSweepRow {
  std::string layer;
  double epsilon = 0.0;
  PrecisionReport precision;
};

/// Neighbor precision per layer over a seeded sample of at most `max_centers`
/// centers (the same sample for every layer), ranked best first.
std::vector<LayerSweepRow> layer_sweep(const Bundle& bundle, std::span<const std::string> layers,
                                       std::size_t max_neighbors, double quantile, std::size_t max_centers,
                                       std::uint64_t seed, LabelKey key = LabelKey::Category);

std::string render_layer_table(std::span<const LayerSweepRow> rows);

struct KernelSweep {
  std::vector<MapeCurve> curves;  // one per kernel family
  std::vector<double> p_grid;
  /// winners[p] lists every kernel attaining the maximum MAPE at that p.
  std::vector<std::vector<std::string>> winners;

  /// A kernel that is among the winners at every p, if any.
  std::optional<std::string> uniform_winner() const;
};

/// LAFA-guided masking MAPE for every kernel family, all else fixed.
KernelSweep kernel_sweep(const Model& model, const Bundle& bundle, const SentenceIndex& index,
                         std::span<const TokenizedText> eval_texts, const LafaConfig& base_config,
                         std::span<const double> p_grid, std::size_t threads = 1);

std::string render_kernel_table(const KernelSweep& sweep);

}  // namespace lafa
