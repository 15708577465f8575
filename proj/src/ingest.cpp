#include "lafa/ingest.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lafa/detail/binary_io.hpp"

namespace lafa {

Matrix round_to_float(const Matrix& m) {
  const MatrixX<float> narrow = m.cast<float>();
  return narrow.cast<double>();
}

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kBundleMagic = "LAFABIN1";
constexpr const char* kManifest = "manifest.json";
constexpr const char* kTokens = "tokens.jsonl";

std::string emb_file(const std::string& layer) { return "emb_" + layer + ".bin"; }
std::string grad_file(const std::string& layer) { return "grad_" + layer + ".bin"; }

std::string record_tag(const TokenizedText& r) { return "record " + std::to_string(r.id); }

void check_matrices(const Bundle& b, const std::string& layer, const std::vector<Matrix>& mats,
                    const char* kind) {
  if (mats.size() != b.records.size()) {
    throw CorruptBundleError(std::string(kind) + " for layer '" + layer + "' has " +
                             std::to_string(mats.size()) + " matrices for " +
                             std::to_string(b.records.size()) + " records");
  }
  for (std::size_t i = 0; i < mats.size(); ++i) {
    const auto& r = b.records[i];
    if (static_cast<std::size_t>(mats[i].rows()) != r.length()) {
      throw CorruptBundleError(record_tag(r) + ": " + kind + " at layer '" + layer + "' has " +
                               std::to_string(mats[i].rows()) + " rows, text has " +
                               std::to_string(r.length()) + " tokens");
    }
    if (mats[i].cols() != static_cast<Eigen::Index>(b.dim)) {
      throw CorruptBundleError(record_tag(r) + ": " + kind + " at layer '" + layer + "' has " +
                               std::to_string(mats[i].cols()) + " columns, bundle dim is " +
                               std::to_string(b.dim));
    }
  }
}

json label_to_json(const Label& label) {
  if (const auto* v = std::get_if<double>(&label)) return *v;
  return std::get<std::vector<std::uint32_t>>(label);
}

Label label_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_array()) return j.get<std::vector<std::uint32_t>>();
  throw SchemaError("label must be a number or an array of class indices");
}

json record_to_json(const TokenizedText& r) {
  json j;
  j["id"] = r.id;
  j["tokens"] = r.tokens;
  j["token_ids"] = r.token_ids;
  if (r.label) j["label"] = label_to_json(*r.label);
  if (r.category) j["category"] = *r.category;
  if (r.gold) j["gold"] = *r.gold;
  return j;
}

TokenizedText record_from_json(const json& j) {
  TokenizedText r;
  try {
    r.id = j.at("id").get<RecordId>();
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    r.token_ids = j.at("token_ids").get<std::vector<std::uint32_t>>();
    if (j.contains("label") && !j["label"].is_null()) r.label = label_from_json(j["label"]);
    if (j.contains("category") && !j["category"].is_null()) r.category = j["category"].get<std::int64_t>();
    if (j.contains("gold") && !j["gold"].is_null()) r.gold = j["gold"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("tokens.jsonl: ") + e.what());
  }
  return r;
}

std::ofstream open_out(const fs::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  return in;
}

Bundle read_impl(const fs::path& dir, bool require_layers) {
  json manifest;
  {
    auto in = open_in(dir / kManifest);
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
  }
  if (!manifest.is_object() || manifest.value("version", 0) != 1) {
    throw FormatError("manifest.json: unsupported or missing version (expected 1)");
  }

  Bundle b;
  std::vector<std::string> files;
  std::size_t record_count = 0;
  try {
    b.dim = manifest.at("dim").get<std::uint32_t>();
    record_count = manifest.at("records").get<std::size_t>();
    for (const auto& name : manifest.at("layers").get<std::vector<std::string>>()) {
      b.layers.push_back(Layer{name, {}, std::nullopt});
    }
    files = manifest.at("files").get<std::vector<std::string>>();
    if (manifest.contains("vocab")) b.vocab = manifest["vocab"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest.json: ") + e.what());
  }

  {
    auto in = open_in(dir / kTokens);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw FormatError("tokens.jsonl line " + std::to_string(lineno) + ": " + e.what());
      }
      b.records.push_back(record_from_json(j));
    }
  }
  if (b.records.size() != record_count) {
    throw CorruptBundleError("manifest declares " + std::to_string(record_count) +
                             " records, tokens.jsonl has " + std::to_string(b.records.size()));
  }

  if (b.vocab.empty()) {
    // No stored vocabulary: rebuild id -> token from the records themselves.
    std::uint32_t max_id = 0;
    for (const auto& r : b.records) {
      for (auto id : r.token_ids) max_id = std::max(max_id, id);
    }
    if (!b.records.empty()) {
      b.vocab.assign(static_cast<std::size_t>(max_id) + 1, std::string{});
      for (const auto& r : b.records) {
        for (std::size_t i = 0; i < r.token_ids.size() && i < r.tokens.size(); ++i) {
          auto& slot = b.vocab[r.token_ids[i]];
          if (slot.empty()) slot = r.tokens[i];
        }
      }
    }
  }

  std::set<std::string> layer_names;
  for (const auto& l : b.layers) layer_names.insert(l.name);
  std::set<std::string> listed(files.begin(), files.end());
  for (const auto& f : files) {
    for (const std::string prefix : {"emb_", "grad_"}) {
      if (f.rfind(prefix, 0) == 0 && f.size() > prefix.size() + 4 && f.ends_with(".bin")) {
        const auto name = f.substr(prefix.size(), f.size() - prefix.size() - 4);
        if (!layer_names.contains(name)) {
          throw SchemaError("manifest.json: file " + f + " references unknown layer '" + name + "'");
        }
      }
    }
  }

  for (auto& layer : b.layers) {
    const auto ef = emb_file(layer.name);
    if (!listed.contains(ef)) throw SchemaError("manifest.json: layer '" + layer.name + "' has no " + ef);
    std::uint32_t file_dim = 0;
    layer.embeddings = read_matrix_file(dir / ef, &file_dim);
    if (file_dim != b.dim) {
      throw CorruptBundleError(ef + ": dim " + std::to_string(file_dim) + " differs from manifest dim " +
                               std::to_string(b.dim));
    }
    const auto gf = grad_file(layer.name);
    if (listed.contains(gf)) {
      layer.gradients = read_matrix_file(dir / gf, &file_dim);
      if (file_dim != b.dim) throw CorruptBundleError(gf + ": dim differs from manifest dim");
    }
  }

  validate_bundle(b, require_layers);
  return b;
}

}  // namespace

const Layer& Bundle::layer(const std::string& name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw SchemaError("unknown layer '" + name + "'");
}

bool Bundle::has_layer(const std::string& name) const noexcept {
  return std::any_of(layers.begin(), layers.end(), [&](const Layer& l) { return l.name == name; });
}

std::vector<std::string> Bundle::layer_names() const {
  std::vector<std::string> names;
  for (const auto& l : layers) names.push_back(l.name);
  return names;
}

std::size_t Bundle::record_index(RecordId id) const {
  auto it = std::lower_bound(records.begin(), records.end(), id,
                             [](const TokenizedText& r, RecordId v) { return r.id < v; });
  if (it == records.end() || it->id != id) throw LookupError("no record with id " + std::to_string(id));
  return static_cast<std::size_t>(it - records.begin());
}

void validate_bundle(const Bundle& b, bool require_layers) {
  if (b.records.empty()) throw SchemaError("bundle has zero records");
  if (require_layers && b.layers.empty()) throw SchemaError("bundle has no embedding layers");
  if (!b.layers.empty() && b.dim == 0) throw SchemaError("bundle dim must be positive");

  for (std::size_t i = 0; i < b.records.size(); ++i) {
    const auto& r = b.records[i];
    if (i > 0 && b.records[i - 1].id >= r.id) {
      throw SchemaError("record ids must be unique and ascending (at " + record_tag(r) + ")");
    }
    if (r.token_ids.empty()) throw SchemaError(record_tag(r) + " has no tokens");
    if (r.tokens.size() != r.token_ids.size()) {
      throw SchemaError(record_tag(r) + ": tokens and token_ids differ in length");
    }
    for (auto id : r.token_ids) {
      if (id >= b.vocab.size()) {
        throw SchemaError(record_tag(r) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(b.vocab.size()));
      }
    }
    if (r.gold && r.gold->size() != r.length()) {
      throw SchemaError(record_tag(r) + ": gold length differs from token count");
    }
  }

  std::set<std::string> names;
  for (const auto& l : b.layers) {
    if (l.name.empty() || l.name.find_first_of("/\\") != std::string::npos) {
      throw SchemaError("invalid layer name '" + l.name + "'");
    }
    if (!names.insert(l.name).second) throw SchemaError("duplicate layer name '" + l.name + "'");
    check_matrices(b, l.name, l.embeddings, "embedding");
    if (l.gradients) check_matrices(b, l.name, *l.gradients, "gradient");
  }
}

void sort_records(Bundle& b) {
  std::vector<std::size_t> order(b.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return b.records[x].id < b.records[y].id; });
  auto permute = [&](auto& v) {
    std::remove_reference_t<decltype(v)> out;
    out.reserve(v.size());
    for (auto i : order) out.push_back(std::move(v[i]));
    v = std::move(out);
  };
  permute(b.records);
  for (auto& l : b.layers) {
    if (l.embeddings.size() == order.size()) permute(l.embeddings);
    if (l.gradients && l.gradients->size() == order.size()) permute(*l.gradients);
  }
}

std::vector<Matrix> read_matrix_file(const fs::path& file, std::uint32_t* dim_out) {
  auto in = open_in(file);
  const auto name = file.filename().string();
  detail::expect_magic(in, kBundleMagic, name);
  const auto dim = detail::get_u32(in, name + " dim");
  const auto count = detail::get_u32(in, name + " record count");
  std::vector<Matrix> mats;
  mats.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto rows = detail::get_u32(in, name + " row count");
    Matrix m(rows, dim);
    for (std::uint32_t i = 0; i < rows; ++i) {
      for (std::uint32_t j = 0; j < dim; ++j) m(i, j) = detail::get_f32(in, name + " values");
    }
    mats.push_back(std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CorruptBundleError(name + ": trailing bytes after " + std::to_string(count) + " records");
  }
  if (dim_out) *dim_out = dim;
  return mats;
}

void write_matrix_file(const fs::path& file, std::uint32_t dim, std::span<const Matrix> matrices) {
  auto out = open_out(file);
  detail::put_magic(out, kBundleMagic);
  detail::put_u32(out, dim);
  detail::put_u32(out, static_cast<std::uint32_t>(matrices.size()));
  for (const auto& m : matrices) {
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f32(out, static_cast<float>(m(i, j)));
    }
  }
  if (!out) throw IoError("write failed for " + file.string());
}

Bundle read_bundle(const fs::path& dir) { return read_impl(dir, true); }
Bundle read_corpus(const fs::path& dir) { return read_impl(dir, false); }

void write_bundle(const Bundle& b, const fs::path& dir) {
  validate_bundle(b, false);

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json manifest;
  manifest["version"] = 1;
  manifest["dim"] = b.dim;
  manifest["layers"] = b.layer_names();
  manifest["records"] = b.records.size();
  manifest["vocab"] = b.vocab;
  std::vector<std::string> files{kTokens};
  for (const auto& l : b.layers) {
    files.push_back(emb_file(l.name));
    if (l.gradients) files.push_back(grad_file(l.name));
  }
  manifest["files"] = files;

  {
    auto out = open_out(dir / kTokens);
    for (const auto& r : b.records) out << record_to_json(r).dump() << '\n';
    if (!out) throw IoError("write failed for tokens.jsonl");
  }
  for (const auto& l : b.layers) {
    write_matrix_file(dir / emb_file(l.name), b.dim, l.embeddings);
    if (l.gradients) write_matrix_file(dir / grad_file(l.name), b.dim, *l.gradients);
  }
  // Manifest last: a directory with a manifest is complete.
  auto out = open_out(dir / kManifest);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed for manifest.json");
}

std::vector<double> spans_to_gold(const TokenizedText& text, std::span<const Span> spans) {
  const auto n = text.length();
  std::vector<double> gold(n, 0.0);
  for (const auto& [start, end] : spans) {
    if (start > end || end >= n) {
      throw BoundsError("span (" + std::to_string(start) + "," + std::to_string(end) +
                        ") outside text of length " + std::to_string(n));
    }
    std::fill(gold.begin() + static_cast<std::ptrdiff_t>(start),
              gold.begin() + static_cast<std::ptrdiff_t>(end) + 1, 1.0);
  }
  return gold;
}

std::vector<double> sentiment_to_gold(std::span<const double> word_scores, double scale_mid) {
  std::vector<double> gold(word_scores.size());
  std::transform(word_scores.begin(), word_scores.end(), gold.begin(),
                 [&](double s) { return std::abs(s - scale_mid); });
  return gold;
}

std::string to_string(Task task) {
  switch (task) {
    case Task::Regression: return "regression";
    case Task::Binary: return "binary";
    case Task::Multilabel: return "multilabel";
  }
  return "regression";
}

Task task_from_string(const std::string& name) {
  if (name == "regression") return Task::Regression;
  if (name == "binary") return Task::Binary;
  if (name == "multilabel") return Task::Multilabel;
  throw ConfigError("unknown task '" + name + "'");
}

void validate_synthetic_config(const SyntheticConfig& c) {
  const auto [lo, hi] = c.length_range;
  if (c.num_templates == 0 || c.texts == 0) throw ConfigError("need at least one template and one text");
  if (lo == 0 || lo > hi) throw ConfigError("length_range must satisfy 1 <= min <= max");
  if (c.key_tokens_per_template == 0) throw ConfigError("key_tokens_per_template must be positive");
  if (c.key_tokens_per_template > lo) throw ConfigError("key_tokens_per_template exceeds minimum length");
  if (static_cast<std::uint64_t>(c.vocab_size) <=
      static_cast<std::uint64_t>(c.num_templates) * c.key_tokens_per_template) {
    throw ConfigError("vocab_size must exceed num_templates * key_tokens_per_template");
  }
  if (c.noise < 0.0) throw ConfigError("noise must be nonnegative");
}

SyntheticCorpus generate_synthetic(const SyntheticConfig& c) {
  validate_synthetic_config(c);
  std::mt19937_64 rng(c.seed);

  SyntheticCorpus out;
  const std::uint32_t keys = c.key_tokens_per_template;
  const std::uint32_t key_total = c.num_templates * keys;
  out.vocab.reserve(c.vocab_size);
  for (std::uint32_t t = 0; t < c.num_templates; ++t) {
    for (std::uint32_t k = 0; k < keys; ++k) out.vocab.push_back("k" + std::to_string(t) + "_" + std::to_string(k));
  }
  for (std::uint32_t w = key_total; w < c.vocab_size; ++w) out.vocab.push_back("w" + std::to_string(w - key_total));

  out.template_keys.resize(c.num_templates);
  out.token_weights.assign(c.vocab_size, 0.0);
  std::uniform_real_distribution<double> positive_weight(0.5, 1.5);
  std::uniform_real_distribution<double> signed_weight(-1.0, 1.0);
  for (std::uint32_t t = 0; t < c.num_templates; ++t) {
    for (std::uint32_t k = 0; k < keys; ++k) {
      const std::uint32_t id = t * keys + k;
      out.template_keys[t].push_back(id);
      out.token_weights[id] = c.task == Task::Binary ? signed_weight(rng) : positive_weight(rng);
    }
  }

  std::uniform_int_distribution<std::uint32_t> pick_template(0, c.num_templates - 1);
  std::uniform_int_distribution<std::uint32_t> pick_length(c.length_range.first, c.length_range.second);
  std::uniform_int_distribution<std::uint32_t> pick_filler(key_total, c.vocab_size - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);

  out.records.reserve(c.texts);
  for (std::uint32_t n = 0; n < c.texts; ++n) {
    const auto t = pick_template(rng);
    const auto len = pick_length(rng);
    std::vector<std::uint32_t> positions(len);
    std::iota(positions.begin(), positions.end(), 0U);
    std::shuffle(positions.begin(), positions.end(), rng);

    TokenizedText r;
    r.id = n;
    r.token_ids.assign(len, 0);
    std::vector<double> gold(len, 0.0);
    for (std::uint32_t i = 0; i < len; ++i) r.token_ids[i] = pick_filler(rng);
    for (std::uint32_t k = 0; k < keys; ++k) {
      r.token_ids[positions[k]] = out.template_keys[t][k];
      gold[positions[k]] = 1.0;
    }
    for (auto id : r.token_ids) r.tokens.push_back(out.vocab[id]);

    // Summed in id order so that reordered texts get bit-identical labels.
    auto sorted_ids = r.token_ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    double signal = 0.0;
    for (auto id : sorted_ids) signal += out.token_weights[id];
    const double noise = c.noise > 0.0 ? c.noise * gauss(rng) : 0.0;
    switch (c.task) {
      case Task::Regression: r.label = signal + noise; break;
      case Task::Binary: r.label = (signal + noise > out.binary_threshold) ? 1.0 : 0.0; break;
      case Task::Multilabel: r.label = std::vector<std::uint32_t>{t}; break;
    }
    r.category = t;
    r.gold = std::move(gold);
    out.records.push_back(std::move(r));
  }
  return out;
}

Bundle corpus_bundle(const SyntheticCorpus& corpus) {
  Bundle b;
  b.vocab = corpus.vocab;
  b.records = corpus.records;
  return b;
}

}  // namespace lafa
