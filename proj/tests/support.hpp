// Shared fixtures for the test suites: temporary directories, random model
// and text generators, and loop-based reference implementations that avoid
// Eigen expressions so they stay independent of the library code.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "lafa/attribution.hpp"
#include "lafa/common.hpp"
#include "lafa/evalharness.hpp"
#include "lafa/ingest.hpp"
#include "lafa/kernels.hpp"
#include "lafa/micromodel.hpp"
#include "lafa/vecstore.hpp"

namespace lafa::test {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("lafa-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  }
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

inline Model random_model(std::mt19937_64& rng, std::uint32_t vocab, std::uint32_t dim, std::uint32_t hidden,
                          HeadKind head = HeadKind::Regression, std::uint32_t outputs = 1, double scale = 1.0) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = dim;
  c.hidden_width = hidden;
  c.head = head;
  c.outputs = outputs;
  Model m;
  m.config = c;
  m.embedding = random_matrix(rng, vocab, dim, scale);
  m.hidden_weight = random_matrix(rng, hidden, dim, scale);
  m.hidden_bias = random_vector(rng, hidden, scale);
  m.head_weight = random_matrix(rng, outputs, hidden, scale);
  m.head_bias = random_vector(rng, outputs, scale);
  return m;
}

inline TokenizedText random_text(std::mt19937_64& rng, std::uint32_t vocab, std::size_t length, RecordId id) {
  std::uniform_int_distribution<std::uint32_t> tok(0, vocab - 1);
  TokenizedText t;
  t.id = id;
  for (std::size_t i = 0; i < length; ++i) {
    t.token_ids.push_back(tok(rng));
    t.tokens.push_back("t" + std::to_string(t.token_ids.back()));
  }
  return t;
}

inline std::vector<std::string> numbered_vocab(std::uint32_t n) {
  std::vector<std::string> v;
  for (std::uint32_t i = 0; i < n; ++i) v.push_back("t" + std::to_string(i));
  return v;
}

/// F(H) = <A_T, H> / T, with one weight matrix per text length.
class LinearProvider final : public GradientProvider {
 public:
  LinearProvider(Matrix weights, std::vector<Matrix> inputs) : weights_(std::move(weights)), inputs_(std::move(inputs)) {}

  Matrix embed(const TokenizedText& text) const override { return inputs_.at(text.id); }
  Matrix gradient(const TokenizedText&, const Matrix& h, std::size_t) const override {
    return weights_.topRows(h.rows()) / static_cast<double>(h.rows());
  }
  double score(const TokenizedText&, const Matrix& h, std::size_t) const override {
    double s = 0.0;
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      for (Eigen::Index j = 0; j < h.cols(); ++j) s += weights_(i, j) * h(i, j);
    }
    return s / static_cast<double>(h.rows());
  }
  std::size_t output_width() const override { return 1; }

 private:
  Matrix weights_;
  std::vector<Matrix> inputs_;
};

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows rows_of(const Matrix& m) {
  Rows r(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  }
  return r;
}

inline double max_abs_diff(const Matrix& a, const Rows& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) worst = std::max(worst, std::abs(a(i, j) - b[i][j]));
  }
  return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Per-token hidden activations z[t][u].
inline Rows hidden(const Model& m, const Rows& h) {
  const auto width = static_cast<std::size_t>(m.config.hidden_width);
  Rows z(h.size(), std::vector<double>(width));
  for (std::size_t t = 0; t < h.size(); ++t) {
    for (std::size_t u = 0; u < width; ++u) {
      double a = m.hidden_bias(static_cast<Eigen::Index>(u));
      for (std::size_t j = 0; j < h[t].size(); ++j) a += m.hidden_weight(u, j) * h[t][j];
      z[t][u] = std::tanh(a);
    }
  }
  return z;
}

inline double score(const Model& m, const Rows& h, std::size_t target) {
  const auto z = hidden(m, h);
  double s = m.head_bias(static_cast<Eigen::Index>(target));
  for (std::size_t u = 0; u < z.front().size(); ++u) {
    double pooled = 0.0;
    for (std::size_t t = 0; t < z.size(); ++t) pooled += z[t][u];
    s += m.head_weight(target, u) * pooled / static_cast<double>(z.size());
  }
  return s;
}

inline Rows gradient(const Model& m, const Rows& h, std::size_t target) {
  const auto z = hidden(m, h);
  const double T = static_cast<double>(h.size());
  Rows g(h.size(), std::vector<double>(h.front().size(), 0.0));
  for (std::size_t t = 0; t < h.size(); ++t) {
    for (std::size_t j = 0; j < h[t].size(); ++j) {
      double s = 0.0;
      for (std::size_t u = 0; u < z[t].size(); ++u) {
        s += m.head_weight(target, u) * (1.0 - z[t][u] * z[t][u]) * m.hidden_weight(u, j);
      }
      g[t][j] = s / T;
    }
  }
  return g;
}

/// Central finite differences of the score.
inline Rows fd_gradient(const Model& m, Rows h, std::size_t target, double step = 1e-5) {
  Rows g(h.size(), std::vector<double>(h.front().size()));
  for (std::size_t t = 0; t < h.size(); ++t) {
    for (std::size_t j = 0; j < h[t].size(); ++j) {
      const double keep = h[t][j];
      h[t][j] = keep + step;
      const double up = score(m, h, target);
      h[t][j] = keep - step;
      const double down = score(m, h, target);
      h[t][j] = keep;
      g[t][j] = (up - down) / (2.0 * step);
    }
  }
  return g;
}

inline double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double kernel(const KernelSpec& k, const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0, l1 = 0.0;
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
    l1 += std::abs(a[i] - b[i]);
    same = same && a[i] == b[i] && std::signbit(a[i]) == std::signbit(b[i]);
  }
  const double dist = l2(a, b);
  switch (k.family) {
    case KernelFamily::RBF: return std::exp(-dist / (k.l * k.l));
    case KernelFamily::Cubic: return std::pow(k.gamma * dot + k.c0, k.degree);
    case KernelFamily::Cosine: return dot / (std::sqrt(na) * std::sqrt(nb));
    case KernelFamily::Laplacian: return std::exp(-l1 / (k.l * k.l));
    case KernelFamily::L2Clip: return 1.0 / std::min(std::max(dist, k.clip_left), k.clip_right);
    case KernelFamily::Indicator: return same ? 1.0 : 0.0;
  }
  return 0.0;
}

inline std::vector<double> squared_reduce(const Rows& raw) {
  std::vector<double> s;
  for (const auto& row : raw) {
    double acc = 0.0;
    for (double v : row) acc += v * v;
    s.push_back(acc);
  }
  return s;
}

using GradFn = std::function<Rows(const Rows&)>;

inline Rows smooth_grad_raw(const GradFn& grad, const Rows& h0, std::uint32_t n, double sigma, std::uint64_t seed,
                            RecordId id) {
  std::mt19937_64 rng(derive_seed(seed, id));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Rows sum(h0.size(), std::vector<double>(h0.front().size(), 0.0));
  for (std::uint32_t k = 0; k < n; ++k) {
    Rows noisy = h0;
    for (auto& row : noisy) {
      for (double& v : row) v += sigma * gauss(rng);
    }
    const auto g = grad(noisy);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      for (std::size_t j = 0; j < sum[i].size(); ++j) sum[i][j] += g[i][j];
    }
  }
  for (auto& row : sum) {
    for (double& v : row) v /= n;
  }
  return sum;
}

inline Rows integrated_grad_raw(const GradFn& grad, const Rows& h0, const Rows& ref, std::uint32_t n) {
  Rows sum(h0.size(), std::vector<double>(h0.front().size(), 0.0));
  for (std::uint32_t k = 1; k <= n; ++k) {
    Rows point = ref;
    for (std::size_t i = 0; i < h0.size(); ++i) {
      for (std::size_t j = 0; j < h0[i].size(); ++j) point[i][j] = ref[i][j] + k * (h0[i][j] - ref[i][j]) / n;
    }
    const auto g = grad(point);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      for (std::size_t j = 0; j < sum[i].size(); ++j) sum[i][j] += g[i][j];
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    for (std::size_t j = 0; j < sum[i].size(); ++j) sum[i][j] = (h0[i][j] - ref[i][j]) * sum[i][j] / n;
  }
  return sum;
}

inline Rows shap_grad_raw(const GradFn& grad, const Rows& h0, const std::vector<Rows>& refs, std::uint32_t n,
                          std::uint64_t seed, RecordId id) {
  std::mt19937_64 rng(derive_seed(seed, id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, refs.size() - 1);
  Rows sum(h0.size(), std::vector<double>(h0.front().size(), 0.0));
  for (std::uint32_t k = 0; k < n; ++k) {
    const double alpha = unit(rng);
    const auto& ref = refs[pick(rng)];
    Rows point = h0;
    for (std::size_t i = 0; i < h0.size(); ++i) {
      for (std::size_t j = 0; j < h0[i].size(); ++j) point[i][j] = alpha * h0[i][j] + (1.0 - alpha) * ref[i][j];
    }
    const auto g = grad(point);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      for (std::size_t j = 0; j < sum[i].size(); ++j) sum[i][j] += g[i][j];
    }
  }
  for (auto& row : sum) {
    for (double& v : row) v /= n;
  }
  return sum;
}

inline Rows shap_deep_raw(const GradFn& grad, const Rows& h0, const std::vector<Rows>& refs) {
  Rows sum(h0.size(), std::vector<double>(h0.front().size(), 0.0));
  for (const auto& ref : refs) {
    const auto g = grad(ref);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      for (std::size_t j = 0; j < sum[i].size(); ++j) sum[i][j] += g[i][j] * (h0[i][j] - ref[i][j]);
    }
  }
  for (auto& row : sum) {
    for (double& v : row) v /= static_cast<double>(refs.size());
  }
  return sum;
}

struct Neighbor {
  std::vector<double> scores;
  Rows embeddings;
};

/// E(h) = 1/|N| sum_i sum_k m_ik k(h, h_ik) / T_i
inline double aggregate(const std::vector<double>& h, const std::vector<Neighbor>& neighbors, const KernelSpec& k) {
  if (neighbors.empty()) return 0.0;
  double total = 0.0;
  for (const auto& n : neighbors) {
    for (std::size_t r = 0; r < n.embeddings.size(); ++r) {
      total += n.scores[r] * kernel(k, h, n.embeddings[r]) / static_cast<double>(n.embeddings.size()) /
               static_cast<double>(neighbors.size());
    }
  }
  return total;
}

/// Neighbor ids by sorting every distance; ties by id.
inline std::vector<RecordId> neighbors(const Matrix& vectors, const std::vector<RecordId>& ids, std::size_t center,
                                       std::size_t m, double eps, const std::vector<std::int64_t>* keys = nullptr) {
  std::vector<std::pair<double, RecordId>> all;
  const auto c = rows_of(vectors.row(static_cast<Eigen::Index>(center)));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (r == center) continue;
    if (keys && (*keys)[r] != (*keys)[center]) continue;
    const double d = l2(rows_of(vectors.row(static_cast<Eigen::Index>(r)))[0], c[0]);
    if (d < eps) all.emplace_back(d, ids[r]);
  }
  std::sort(all.begin(), all.end());
  std::vector<RecordId> out;
  for (std::size_t i = 0; i < std::min(m, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

/// R type 7 quantile.
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - (pos - lo)) + v[lo + 1] * (pos - lo);
}

/// Pairwise definition: P(score_pos > score_neg) + 0.5 P(tie).
inline double auc(const std::vector<double>& s, const std::vector<double>& gold) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (gold[i] == 1.0 && gold[j] == 0.0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

}  // namespace oracle

}  // namespace lafa::test

namespace lafa::test {

/// max |a - b| relative to the largest entry of b (the reference).
inline double max_relative_error(const Matrix& a, const oracle::Rows& b) {
  double scale = 0.0;
  for (const auto& row : b) {
    for (double v : row) scale = std::max(scale, std::abs(v));
  }
  return oracle::max_abs_diff(a, b) / std::max(scale, 1e-300);
}

}  // namespace lafa::test

namespace lafa::test::oracle {

inline Rows embed(const Model& m, const TokenizedText& t) {
  Rows h;
  for (auto id : t.token_ids) {
    std::vector<double> row(static_cast<std::size_t>(m.config.dim), 0.0);
    if (id != kMaskTokenId) {
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = m.embedding(id, j);
    }
    h.push_back(row);
  }
  return h;
}

using BaseFn = std::function<std::vector<double>(const TokenizedText&)>;

/// base(X0) + lambda * E over the exhaustively found neighbors.
inline std::vector<double> lafa(const Model& m, const Bundle& bundle, const Matrix& vectors,
                                const std::vector<RecordId>& ids, const TokenizedText& text, std::size_t max_neighbors,
                                double eps, const KernelSpec& kernel, double lambda, const BaseFn& base) {
  const auto center = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), text.id) - ids.begin());
  std::vector<Neighbor> hood;
  for (auto id : neighbors(vectors, ids, center, max_neighbors, eps)) {
    const auto& rec = bundle.record(id);
    hood.push_back(Neighbor{base(rec), oracle::embed(m, rec)});
  }
  auto out = base(text);
  const auto h = oracle::embed(m, text);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lambda * aggregate(h[i], hood, kernel);
  return out;
}

}  // namespace lafa::test::oracle

namespace lafa::test {

// A small model with a handful of texts drawn from a tiny vocabulary, so
// tokens repeat across texts and the indicator kernel fires.
struct World {
  Model model;
  Bundle bundle;
  SentenceIndex index;
  Matrix pooled;  // loop-pooled layer-1 vectors, aligned with bundle records
};

inline World make_world(std::uint64_t seed, std::size_t texts = 8, std::uint32_t vocab = 6) {
  std::mt19937_64 rng(seed);
  World w;
  const auto d = static_cast<std::uint32_t>(2 + seed % 3);
  w.model = test::random_model(rng, vocab, d, d);
  std::vector<TokenizedText> records;
  for (std::size_t i = 0; i < texts; ++i) {
    records.push_back(test::random_text(rng, vocab, 2 + rng() % 5, static_cast<RecordId>(10 + i)));
    records.back().category = static_cast<std::int64_t>(i % 2);
  }
  w.bundle = encode_bundle(w.model, records, test::numbered_vocab(vocab));
  w.index = build_index(w.bundle, "1");
  const auto& layer = w.bundle.layer("1").embeddings;
  w.pooled = Matrix::Zero(static_cast<Eigen::Index>(texts), d);
  for (std::size_t r = 0; r < texts; ++r) {
    for (Eigen::Index t = 0; t < layer[r].rows(); ++t) {
      for (Eigen::Index j = 0; j < d; ++j) w.pooled(r, j) += layer[r](t, j) / static_cast<double>(layer[r].rows());
    }
  }
  return w;
}

inline oracle::GradFn grad_of(const Model& m, std::size_t target) {
  return [&m, target](const oracle::Rows& h) { return oracle::gradient(m, h, target); };
}

inline std::vector<double> oracle_simple(const Model& m, const TokenizedText& t, std::size_t target) {
  return oracle::squared_reduce(oracle::gradient(m, oracle::embed(m, t), target));
}

}  // namespace lafa::test
