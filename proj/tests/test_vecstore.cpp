#include <doctest.h>

#include "support.hpp"

using namespace lafa;
namespace oracle = lafa::test::oracle;
using lafa::test::TempDir;

namespace {

SentenceIndex random_index(std::mt19937_64& rng, std::size_t n, Eigen::Index d, bool float_grid = false) {
  SentenceIndex index;
  index.layer = "0";
  index.vectors = test::random_matrix(rng, static_cast<Eigen::Index>(n), d);
  if (float_grid) {
    // Coarse values create exact distance ties.
    index.vectors = (index.vectors * 2.0).array().round().matrix();
  }
  for (std::size_t i = 0; i < n; ++i) index.ids.push_back(static_cast<RecordId>(3 * i + 1));
  return index;
}

Bundle bundle_of(const std::vector<Matrix>& embeddings) {
  Bundle b;
  b.dim = static_cast<std::uint32_t>(embeddings.front().cols());
  b.vocab = test::numbered_vocab(4);
  Layer l{"0", embeddings, std::nullopt};
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    TokenizedText t;
    t.id = static_cast<RecordId>(i);
    t.token_ids.assign(static_cast<std::size_t>(embeddings[i].rows()), 0);
    t.tokens.assign(t.token_ids.size(), "t0");
    t.category = static_cast<std::int64_t>(i % 2);
    t.label = static_cast<double>(i) * 0.6;
    b.records.push_back(t);
  }
  b.layers.push_back(l);
  return b;
}

}  // namespace

TEST_CASE("sentence_embedding is the column mean") {
  Matrix one(1, 3);
  one << 1, -2, 4;
  CHECK(sentence_embedding(one) == one.row(0).transpose());
  Matrix pm(2, 3);
  pm << 1, -2, 4, -1, 2, -4;
  CHECK(sentence_embedding(pm).isZero(0.0));
  std::mt19937_64 rng(1);
  const Matrix r = test::random_matrix(rng, 3, 4);
  const Vector mean = sentence_embedding(r);
  for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(mean(j) - (r(0, j) + r(1, j) + r(2, j)) / 3.0) < 1e-12);
}

TEST_CASE("build_index pools every record") {
  Matrix a(2, 2), b(1, 2), c(2, 2);
  a << 1, 2, 3, 4;
  b << 2, 3;
  c << 0, 0, 1, 1;
  const Bundle bundle = bundle_of({a, b, c});
  const auto index = build_index(bundle, "0");
  CHECK(index.size() == 3);
  CHECK(index.vectors.row(0) == index.vectors.row(1));
  CHECK((index.vectors.row(0) - index.vectors.row(1)).norm() == 0.0);
  CHECK_FALSE(index.filter_keys);
  CHECK_THROWS_AS(build_index(bundle, "9"), SchemaError);
  const auto keyed = build_index(bundle, "0", LabelKey::Category);
  CHECK(*keyed.filter_keys == std::vector<std::int64_t>{0, 1, 0});
  const auto by_label = build_index(bundle, "0", LabelKey::Label);
  CHECK(*by_label.filter_keys == std::vector<std::int64_t>{0, 1, 1});
}

TEST_CASE("quantile matches linear interpolation") {
  CHECK(quantile({1, 2, 3}, 0.5) == 2.0);
  CHECK(quantile({3, 1, 2}, 0.0) == 1.0);
  CHECK(quantile({3, 1, 2}, 1.0) == 3.0);
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK_THROWS_AS(quantile({}, 0.5), InsufficientDataError);
  CHECK_THROWS_AS(quantile({1.0}, 1.5), ConfigError);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + trial % 17);
    for (double& x : v) x = u(rng);
    const double q = (trial % 21) / 20.0;
    CHECK(std::abs(quantile(v, q) - oracle::quantile(v, q)) < 1e-12);
  }
}

TEST_CASE("estimate_epsilon on hand-computed distances") {
  SentenceIndex index;
  index.vectors.resize(3, 1);
  index.vectors << 0, 1, 3;  // pair distances 1, 3, 2
  index.ids = {0, 1, 2};
  CHECK(estimate_epsilon(index, 0.5, 100, 1) == 2.0);
  CHECK(estimate_epsilon(index, 0.0, 100, 1) == 1.0);
  CHECK(estimate_epsilon(index, 0.5, 3, 1) == estimate_epsilon(index, 0.5, 3, 99));
  SentenceIndex single;
  single.vectors = Matrix::Zero(1, 1);
  single.ids = {0};
  CHECK_THROWS_AS(estimate_epsilon(single, 0.5, 10, 1), InsufficientDataError);
  CHECK_THROWS_AS(estimate_epsilon(index, 0.5, 0, 1), ConfigError);
}

TEST_CASE("sampled pairs are distinct rows and seeded") {
  std::mt19937_64 rng(3);
  const auto index = random_index(rng, 40, 3);
  const auto a = sample_pair_distances(index, 200, 5);
  CHECK(a.size() == 200);
  CHECK(a == sample_pair_distances(index, 200, 5));
  CHECK(a != sample_pair_distances(index, 200, 6));
  for (double d : a) CHECK(d > 0.0);
  CHECK(sample_pair_distances(index, 10000, 1).size() == 40 * 39 / 2);
}

TEST_CASE("estimate_epsilon retains about q of sampled pairs") {
  std::mt19937_64 rng(4);
  const auto index = random_index(rng, 300, 4);
  const double eps = estimate_epsilon(index, 0.05, 10000, 7);
  const auto all = sample_pair_distances(index, index.size() * index.size(), 0);
  const double below = static_cast<double>(std::count_if(all.begin(), all.end(), [&](double d) { return d < eps; }));
  CHECK(std::abs(below / static_cast<double>(all.size()) - 0.05) < 0.01);
}

TEST_CASE("query_neighbors matches the exhaustive oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const auto index = random_index(rng, 50, 1 + trial % 4, trial % 2 == 0);
    // Nudged off the sampled distance so rounding in the oracle cannot flip
    // the strict comparison for the pair that defines it.
    const double eps = estimate_epsilon(index, 0.05 + 0.02 * (trial % 10), 10000, trial) * (1.0 + 1e-9);
    std::vector<std::int64_t> keys;
    for (std::size_t i = 0; i < index.size(); ++i) keys.push_back(static_cast<std::int64_t>(rng() % 3));
    for (std::size_t c = 0; c < index.size(); c += 7) {
      for (std::size_t m : {1, 3, 10}) {
        const auto got = query_neighbors(index, index.ids[c], m, eps);
        CHECK(got.neighbor_ids == oracle::neighbors(index.vectors, index.ids, c, m, eps));
        const std::span<const std::int64_t> ks(keys);
        const auto filtered = query_neighbors(index, index.ids[c], m, eps, true, ks);
        CHECK(filtered.label_filter_applied);
        CHECK(filtered.neighbor_ids == oracle::neighbors(index.vectors, index.ids, c, m, eps, &keys));
      }
    }
  }
}

TEST_CASE("neighbor set invariants") {
  std::mt19937_64 rng(6);
  const auto index = random_index(rng, 60, 2, true);
  for (std::size_t c = 0; c < index.size(); ++c) {
    const RecordId id = index.ids[c];
    const auto set = query_neighbors(index, id, 10, 1.5);
    CHECK(set.center_id == id);
    CHECK(set.size() <= 10);
    CHECK(std::find(set.neighbor_ids.begin(), set.neighbor_ids.end(), id) == set.neighbor_ids.end());
    CHECK(std::is_sorted(set.distances.begin(), set.distances.end()));
    for (double d : set.distances) CHECK(d < 1.5);
    CHECK(query_neighbors(index, id, 10, 0.0).size() == 0);
    std::size_t previous = 0;
    for (double eps : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
      const auto s = query_neighbors(index, id, 10, eps);
      CHECK(s.size() >= previous);
      previous = s.size();
    }
    CHECK(query_neighbors(index, id, 10, 100.0).size() == 10);
    CHECK(query_neighbors(index, id, 1000, 100.0).size() == index.size() - 1);
  }
  CHECK_THROWS_AS(query_neighbors(index, 2, 10, 1.0), LookupError);
  CHECK_THROWS_AS(query_neighbors(index, index.ids[0], 10, 1.0, true), ConfigError);
  CHECK_THROWS_AS(query_neighbors(index, index.ids[0], 10, -1.0), ConfigError);
}

TEST_CASE("ties at exactly epsilon are excluded and ties in distance go by id") {
  SentenceIndex index;
  index.vectors.resize(4, 1);
  index.vectors << 0, 1, -1, 2;
  index.ids = {10, 4, 7, 1};
  const auto set = query_neighbors(index, 10, 10, 2.0);
  CHECK(set.neighbor_ids == std::vector<RecordId>{4, 7});
  CHECK(query_neighbors(index, 10, 10, 2.0 + 1e-12).neighbor_ids == std::vector<RecordId>{4, 7, 1});
}

TEST_CASE("index file round trip") {
  TempDir dir;
  std::mt19937_64 rng(7);
  auto index = random_index(rng, 20, 3);
  index.vectors = round_to_float(index.vectors);
  save_index(index, dir / "index.bin");
  auto back = load_index(dir / "index.bin");
  CHECK(back.vectors == index.vectors);
  CHECK(back.ids == index.ids);
  CHECK_FALSE(back.epsilon);
  index.epsilon = 0.125;
  save_index(index, dir / "index.bin");
  back = load_index(dir / "index.bin");
  CHECK(back.epsilon == 0.125);
  const auto bytes = test::read_bytes(dir / "index.bin");
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "LAFAIDX1");
  CHECK(bytes.size() == 8 + 4 + 4 + 20 * 3 * 4 + 20 * 4 + 8);
  std::ofstream(dir / "bad.bin", std::ios::binary).write(bytes.data(), 30);
  CHECK_THROWS_AS(load_index(dir / "bad.bin"), CorruptBundleError);
}
