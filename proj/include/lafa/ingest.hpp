#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lafa/common.hpp"

namespace lafa {

/// Token id that maps to the zero embedding; produced by masking only.
inline constexpr std::uint32_t kMaskTokenId = 0xFFFFFFFFU;
inline constexpr const char* kMaskToken = "[MASK]";

/// Scalar labels cover regression targets and class indices; index sets are
/// multi-label targets.
using Label = std::variant<double, std::vector<std::uint32_t>>;

struct TokenizedText {
  RecordId id = 0;
  std::vector<std::string> tokens;
  std::vector<std::uint32_t> token_ids;
  std::optional<Label> label;
  std::optional<std::int64_t> category;
  std::optional<std::vector<double>> gold;

  std::size_t length() const noexcept { return token_ids.size(); }
  bool operator==(const TokenizedText&) const = default;
};

struct Layer {
  std::string name;
  std::vector<Matrix> embeddings;                 // one T_i x dim matrix per record
  std::optional<std::vector<Matrix>> gradients;   // optional d F / d H per record

  bool operator==(const Layer&) const = default;
};

/// In-memory interchange bundle. Records are kept in strictly ascending id
/// order; every layer holds one matrix per record, aligned by position.
struct Bundle {
  std::vector<std::string> vocab;
  std::uint32_t dim = 0;
  std::vector<TokenizedText> records;
  std::vector<Layer> layers;

  const Layer& layer(const std::string& name) const;
  bool has_layer(const std::string& name) const noexcept;
  std::vector<std::string> layer_names() const;

  /// Position of a record in `records`; throws LookupError.
  std::size_t record_index(RecordId id) const;
  const TokenizedText& record(RecordId id) const { return records[record_index(id)]; }

  bool operator==(const Bundle&) const = default;
};

/// Checks every bundle invariant. With `require_layers`, a bundle without
/// embeddings is rejected (a corpus-only directory is otherwise legal).
void validate_bundle(const Bundle& bundle, bool require_layers = true);

/// Sorts records ascending by id, permuting every layer alongside.
void sort_records(Bundle& bundle);

Bundle read_bundle(const std::filesystem::path& dir);
/// Like read_bundle, but accepts a corpus directory with no embedding layers.
Bundle read_corpus(const std::filesystem::path& dir);
void write_bundle(const Bundle& bundle, const std::filesystem::path& dir);

/// Reads one LAFABIN1 file. Exposed for the index and for tooling.
std::vector<Matrix> read_matrix_file(const std::filesystem::path& file, std::uint32_t* dim_out = nullptr);
void write_matrix_file(const std::filesystem::path& file, std::uint32_t dim, std::span<const Matrix> matrices);

// ---------------------------------------------------------------------------
// Gold construction

using Span = std::pair<std::size_t, std::size_t>;  // inclusive [start, end]

std::vector<double> spans_to_gold(const TokenizedText& text, std::span<const Span> spans);

/// |score - scale_mid| per token. The default midpoint suits a 1..25 scale.
std::vector<double> sentiment_to_gold(std::span<const double> word_scores, double scale_mid = 13.0);

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class Task { Regression, Binary, Multilabel };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct SyntheticConfig {
  std::uint32_t vocab_size = 400;
  std::uint32_t num_templates = 20;
  std::uint32_t key_tokens_per_template = 3;
  std::uint32_t texts = 2000;
  std::pair<std::uint32_t, std::uint32_t> length_range{10, 14};
  Task task = Task::Regression;
  double noise = 0.0;
  std::uint64_t seed = 7;
};

/// Throws ConfigError when the config cannot be realised.
void validate_synthetic_config(const SyntheticConfig& config);

struct SyntheticCorpus {
  std::vector<std::string> vocab;
  std::vector<TokenizedText> records;
  /// template_keys[t] lists the key token ids planted by template t.
  std::vector<std::vector<std::uint32_t>> template_keys;
  /// Per-vocabulary-id label weight; zero for filler tokens.
  std::vector<double> token_weights;
  /// Binary labels are 1 when the summed key weight exceeds this.
  double binary_threshold = 0.0;
};

/// Texts drawn from templates: a template's key tokens are planted at random
/// positions and the rest is filler. Labels depend only on the key tokens;
/// gold is 1 on key positions; category is the template id.
SyntheticCorpus generate_synthetic(const SyntheticConfig& config);

/// Corpus-only bundle (no layers) wrapping a synthetic corpus.
Bundle corpus_bundle(const SyntheticCorpus& corpus);

}  // namespace lafa
