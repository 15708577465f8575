#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lafa/common.hpp"
#include "lafa/ingest.hpp"

namespace lafa {

/// Mean pooling over token rows.
template <typename Derived>
VectorX<typename Derived::Scalar> sentence_embedding(const Eigen::MatrixBase<Derived>& tokens) {
  return tokens.colwise().mean().transpose();
}

/// Which record field decides "same label" when filtering neighbors.
enum class LabelKey { Category, Label };

/// One pooled vector per record at a chosen encoder layer.
struct SentenceIndex {
  std::string layer;
  std::string pooling = "mean";
  Matrix vectors;  // N x d, row r belongs to ids[r]
  std::vector<RecordId> ids;
  std::optional<double> epsilon;
  /// Per-row grouping keys used by same-label filtering, when known.
  std::optional<std::vector<std::int64_t>> filter_keys;

  std::size_t size() const noexcept { return ids.size(); }
  /// Row of a record id; throws LookupError.
  std::size_t position(RecordId id) const;
};

/// The grouping key of a record: its category, or its label (scalar labels
/// rounded to the nearest integer, label sets by their smallest class).
std::optional<std::int64_t> record_key(const TokenizedText& text, LabelKey key);

SentenceIndex build_index(const Bundle& bundle, const std::string& layer,
                          std::optional<LabelKey> label_filter_key = std::nullopt);

/// Linear-interpolation quantile (R type 7) of the values.
double quantile(std::vector<double> values, double q);

/// L2 distances of `sample_pairs` uniformly drawn unordered pairs of distinct
/// rows; every pair exactly once when sample_pairs covers all of them.
std::vector<double> sample_pair_distances(const SentenceIndex& index, std::size_t sample_pairs, std::uint64_t seed);

/// The q-quantile of sampled pair distances, used as the neighbor cutoff.
double estimate_epsilon(const SentenceIndex& index, double q, std::size_t sample_pairs, std::uint64_t seed);

struct NeighborSet {
  RecordId center_id = 0;
  std::vector<RecordId> neighbor_ids;  // ascending distance, ties by id
  std::vector<double> distances;
  double epsilon_used = 0.0;
  bool label_filter_applied = false;

  std::size_t size() const noexcept { return neighbor_ids.size(); }
};

/// Exhaustive search: up to `max_neighbors` records with distance strictly
/// below epsilon, never the center itself. With same_label_only, candidates
/// must share the center's key, taken from `labels` (aligned with index rows)
/// or else from the index's filter keys.
NeighborSet query_neighbors(const SentenceIndex& index, RecordId center_id, std::size_t max_neighbors,
                            double epsilon, bool same_label_only = false,
                            std::optional<std::span<const std::int64_t>> labels = std::nullopt);

/// `index.bin`: "LAFAIDX1", u32 dim, u32 count, f32 vectors, u32 ids, f64 epsilon (NaN when unset).
void save_index(const SentenceIndex& index, const std::filesystem::path& file);
SentenceIndex load_index(const std::filesystem::path& file);

}  // namespace lafa
