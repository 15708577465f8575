#include "lafa/vecstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "lafa/detail/binary_io.hpp"

namespace lafa {

namespace {

constexpr std::string_view kIndexMagic = "LAFAIDX1";

double row_distance(const Matrix& v, std::size_t a, std::size_t b) {
  return (v.row(static_cast<Eigen::Index>(a)) - v.row(static_cast<Eigen::Index>(b))).norm();
}

}  // namespace

std::size_t SentenceIndex::position(RecordId id) const {
  // ids come from a bundle and are ascending; fall back to a scan otherwise.
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it != ids.end() && *it == id) return static_cast<std::size_t>(it - ids.begin());
  auto lin = std::find(ids.begin(), ids.end(), id);
  if (lin == ids.end()) throw LookupError("record " + std::to_string(id) + " is not in the index");
  return static_cast<std::size_t>(lin - ids.begin());
}

std::optional<std::int64_t> record_key(const TokenizedText& text, LabelKey key) {
  if (key == LabelKey::Category) return text.category;
  if (!text.label) return std::nullopt;
  if (const auto* v = std::get_if<double>(&*text.label)) return static_cast<std::int64_t>(std::llround(*v));
  const auto& set = std::get<std::vector<std::uint32_t>>(*text.label);
  if (set.empty()) return -1;
  return static_cast<std::int64_t>(*std::min_element(set.begin(), set.end()));
}

SentenceIndex build_index(const Bundle& bundle, const std::string& layer, std::optional<LabelKey> label_filter_key) {
  const auto& l = bundle.layer(layer);
  SentenceIndex index;
  index.layer = layer;
  index.vectors.resize(static_cast<Eigen::Index>(bundle.records.size()), bundle.dim);
  index.ids.reserve(bundle.records.size());
  for (std::size_t r = 0; r < bundle.records.size(); ++r) {
    index.vectors.row(static_cast<Eigen::Index>(r)) = sentence_embedding(l.embeddings[r]).transpose();
    index.ids.push_back(bundle.records[r].id);
  }
  if (label_filter_key) {
    std::vector<std::int64_t> keys;
    keys.reserve(bundle.records.size());
    for (const auto& rec : bundle.records) {
      auto k = record_key(rec, *label_filter_key);
      if (!k) throw DataError("record " + std::to_string(rec.id) + " lacks the label used for filtering");
      keys.push_back(*k);
    }
    index.filter_keys = std::move(keys);
  }
  return index;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InsufficientDataError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> sample_pair_distances(const SentenceIndex& index, std::size_t sample_pairs, std::uint64_t seed) {
  const std::size_t n = index.size();
  if (n < 2) throw InsufficientDataError("need at least 2 indexed vectors to sample pairs");
  const std::size_t all_pairs = n * (n - 1) / 2;
  std::vector<double> out;
  if (sample_pairs >= all_pairs) {
    out.reserve(all_pairs);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) out.push_back(row_distance(index.vectors, a, b));
    }
    return out;
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::uniform_int_distribution<std::size_t> second(0, n - 2);
  out.reserve(sample_pairs);
  for (std::size_t s = 0; s < sample_pairs; ++s) {
    const auto a = first(rng);
    auto b = second(rng);
    if (b >= a) ++b;
    out.push_back(row_distance(index.vectors, a, b));
  }
  return out;
}

double estimate_epsilon(const SentenceIndex& index, double q, std::size_t sample_pairs, std::uint64_t seed) {
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile must lie in [0, 1]");
  if (sample_pairs == 0) throw ConfigError("sample_pairs must be positive");
  return quantile(sample_pair_distances(index, sample_pairs, seed), q);
}

NeighborSet query_neighbors(const SentenceIndex& index, RecordId center_id, std::size_t max_neighbors,
                            double epsilon, bool same_label_only,
                            std::optional<std::span<const std::int64_t>> labels) {
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be nonnegative");
  const auto center = index.position(center_id);
  std::span<const std::int64_t> keys;
  if (same_label_only) {
    if (labels) {
      keys = *labels;
    } else if (index.filter_keys) {
      keys = *index.filter_keys;
    } else {
      throw ConfigError("same-label filtering needs per-record labels");
    }
    if (keys.size() != index.size()) throw ShapeError("label keys are not aligned with the index");
  }

  struct Candidate {
    double distance;
    RecordId id;
  };
  std::vector<Candidate> candidates;
  const auto c = index.vectors.row(static_cast<Eigen::Index>(center));
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (r == center) continue;
    if (same_label_only && keys[r] != keys[center]) continue;
    const double d = (index.vectors.row(static_cast<Eigen::Index>(r)) - c).norm();
    if (d < epsilon) candidates.push_back({d, index.ids[r]});
  }
  const auto by_distance = [](const Candidate& a, const Candidate& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  };
  const auto keep = std::min(max_neighbors, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                    by_distance);

  NeighborSet out;
  out.center_id = center_id;
  out.epsilon_used = epsilon;
  out.label_filter_applied = same_label_only;
  for (std::size_t k = 0; k < keep; ++k) {
    out.neighbor_ids.push_back(candidates[k].id);
    out.distances.push_back(candidates[k].distance);
  }
  return out;
}

void save_index(const SentenceIndex& index, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  detail::put_magic(out, kIndexMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(index.vectors.cols()));
  detail::put_u32(out, static_cast<std::uint32_t>(index.size()));
  for (Eigen::Index r = 0; r < index.vectors.rows(); ++r) {
    for (Eigen::Index j = 0; j < index.vectors.cols(); ++j) detail::put_f32(out, static_cast<float>(index.vectors(r, j)));
  }
  for (auto id : index.ids) detail::put_u32(out, id);
  detail::put_f64(out, index.epsilon.value_or(std::numeric_limits<double>::quiet_NaN()));
  if (!out) throw IoError("write failed for " + file.string());
}

SentenceIndex load_index(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  const auto name = file.filename().string();
  detail::expect_magic(in, kIndexMagic, name);
  const auto dim = detail::get_u32(in, name + " dim");
  const auto count = detail::get_u32(in, name + " count");
  SentenceIndex index;
  index.vectors.resize(count, dim);
  for (std::uint32_t r = 0; r < count; ++r) {
    for (std::uint32_t j = 0; j < dim; ++j) index.vectors(r, j) = detail::get_f32(in, name + " vectors");
  }
  index.ids.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) index.ids.push_back(detail::get_u32(in, name + " ids"));
  const double eps = detail::get_f64(in, name + " epsilon");
  if (!std::isnan(eps)) index.epsilon = eps;
  if (std::set<RecordId>(index.ids.begin(), index.ids.end()).size() != index.ids.size()) {
    throw CorruptBundleError(name + ": duplicate record ids");
  }
  return index;
}

}  // namespace lafa
