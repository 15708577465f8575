#include "lafa/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "lafa/detail/parallel.hpp"

namespace lafa {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* metric) {
  if (a != b) {
    throw ShapeError(std::string(metric) + ": scores have length " + std::to_string(a) + " but gold has " +
                     std::to_string(b));
  }
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : detail::pairwise_sum(v.data(), v.size()) / static_cast<double>(v.size());
}

std::vector<double> gold_of(const TokenizedText& rec) {
  if (!rec.gold) throw UndefinedMetricError("record " + std::to_string(rec.id) + " has no gold vector");
  return *rec.gold;
}

template <typename Metric>
EvalReport evaluate_each(std::string name, std::span<const AttributionVector> attributions, const Bundle& bundle,
                         nlohmann::json config, Metric metric) {
  std::vector<RecordId> ids;
  std::vector<double> values;
  std::size_t skipped = 0;
  for (const auto& a : attributions) {
    try {
      const auto gold = gold_of(bundle.record(a.text_id));
      values.push_back(metric(std::span<const double>(a.scores), std::span<const double>(gold)));
      ids.push_back(a.text_id);
    } catch (const UndefinedMetricError&) {
      ++skipped;
    }
  }
  return make_report(std::move(name), std::move(ids), std::move(values), skipped, std::move(config));
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

double auc(std::span<const double> scores, std::span<const double> gold) {
  require_same_length(scores.size(), gold.size(), "AUC");
  std::size_t positives = 0;
  for (double g : gold) {
    if (g != 0.0 && g != 1.0) throw DataError("AUC gold must be binary, got " + std::to_string(g));
    positives += g == 1.0;
  }
  const std::size_t negatives = gold.size() - positives;
  if (positives == 0 || negatives == 0) throw UndefinedMetricError("AUC undefined for single-class gold");

  // Average ranks over tie groups, then the Mann-Whitney U statistic.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) ++end;
    const double rank = 0.5 * static_cast<double>(start + 1 + end);
    for (std::size_t i = start; i < end; ++i) {
      if (gold[order[i]] == 1.0) positive_rank_sum += rank;
    }
    start = end;
  }
  const double np = static_cast<double>(positives);
  const double nn = static_cast<double>(negatives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double pearson(std::span<const double> scores, std::span<const double> gold) {
  require_same_length(scores.size(), gold.size(), "Pearson");
  if (scores.size() < 2) throw UndefinedMetricError("Pearson needs at least 2 points");
  const double mx = mean_of(scores);
  const double my = mean_of(gold);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double dx = scores[i] - mx;
    const double dy = gold[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError("Pearson undefined for a constant vector");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::size_t mask_count(std::size_t length, double percent) {
  if (!(percent >= 0.0 && percent <= 100.0)) throw RangeError("mask percent must lie in [0, 100]");
  const auto k = static_cast<std::size_t>(std::floor(percent * static_cast<double>(length) / 100.0 + 0.5));
  return std::min(k, length);
}

TokenizedText mask_top_p(const TokenizedText& text, std::span<const double> scores, double percent) {
  require_same_length(scores.size(), text.length(), "mask");
  const auto k = mask_count(text.length(), percent);
  std::vector<std::size_t> order(text.length());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  TokenizedText out = text;
  for (std::size_t i = 0; i < k; ++i) {
    out.token_ids[order[i]] = kMaskTokenId;
    out.tokens[order[i]] = kMaskToken;
  }
  return out;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  s.mean = mean_of(values);
  if (s.n >= 2) {
    std::vector<double> sq(values.size());
    std::transform(values.begin(), values.end(), sq.begin(), [&](double v) { return (v - s.mean) * (v - s.mean); });
    s.std = std::sqrt(detail::pairwise_sum(sq.data(), sq.size()) / static_cast<double>(s.n - 1));
  }
  return s;
}

std::string format_mean_std(double mean, double std, int digits) {
  return fixed(mean, digits) + "(" + fixed(std, digits) + ")";
}

nlohmann::json EvalReport::to_json() const {
  return {{"metric", metric}, {"ids", ids},         {"values", values}, {"mean", mean},
          {"std", std},       {"skipped", skipped}, {"config", config}};
}

EvalReport make_report(std::string metric, std::vector<RecordId> ids, std::vector<double> values, std::size_t skipped,
                       nlohmann::json config) {
  EvalReport r;
  const auto s = summarize(values);
  r.metric = std::move(metric);
  r.ids = std::move(ids);
  r.values = std::move(values);
  r.mean = s.mean;
  r.std = s.std;
  r.skipped = skipped;
  r.config = std::move(config);
  return r;
}

EvalReport evaluate_auc(std::span<const AttributionVector> attributions, const Bundle& bundle, nlohmann::json config) {
  return evaluate_each("AUC", attributions, bundle, std::move(config),
                       [](auto s, auto g) { return auc(s, g); });
}

EvalReport evaluate_pearson(std::span<const AttributionVector> attributions, const Bundle& bundle,
                            nlohmann::json config) {
  return evaluate_each("Pearson", attributions, bundle, std::move(config),
                       [](auto s, auto g) { return pearson(s, g); });
}

const MapePoint& MapeCurve::at(double percent) const {
  for (const auto& p : points) {
    if (p.percent == percent) return p;
  }
  throw LookupError("curve '" + method + "' has no point at p=" + fixed(percent, 2));
}

namespace {

double regression_label(const TokenizedText& text) {
  if (!text.label) throw DataError("record " + std::to_string(text.id) + " has no label");
  const auto* y = std::get_if<double>(&*text.label);
  if (y == nullptr) throw DataError("record " + std::to_string(text.id) + " has a non-scalar label");
  return *y;
}

void require_regression(const Model& model) {
  if (model.config.head != HeadKind::Regression || model.output_width() != 1) {
    throw ConfigError("masking evaluation needs a single-output regression model");
  }
}

}  // namespace

std::vector<TokenizedText> select_eval_set(const Model& model, std::span<const TokenizedText> texts, double tolerance,
                                           std::size_t limit, std::uint64_t seed) {
  require_regression(model);
  std::vector<std::size_t> accepted;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const double y = regression_label(texts[i]);
    if (y == 0.0) continue;
    const double yhat = forward(model, texts[i])(0);
    if (std::abs(yhat - y) / std::abs(y) < tolerance) accepted.push_back(i);
  }
  if (accepted.size() > limit) {
    std::mt19937_64 rng(seed);
    std::shuffle(accepted.begin(), accepted.end(), rng);
    accepted.resize(limit);
    std::sort(accepted.begin(), accepted.end());
  }
  std::vector<TokenizedText> out;
  out.reserve(accepted.size());
  for (auto i : accepted) out.push_back(texts[i]);
  return out;
}

MapeCurve mask_eval(const Model& model, std::span<const TokenizedText> texts, const Scorer& scorer,
                    std::span<const double> p_grid, std::string method_name, std::size_t threads) {
  require_regression(model);
  for (double p : p_grid) mask_count(1, p);

  // errors[t][g] holds text t's absolute percentage error at grid point g.
  std::vector<std::vector<double>> errors(texts.size());
  std::vector<char> excluded(texts.size(), 0);
  detail::parallel_for(texts.size(), threads, [&](std::size_t t) {
    const auto& text = texts[t];
    const double y = regression_label(text);
    if (y == 0.0) {
      excluded[t] = 1;
      return;
    }
    const auto scores = scorer(text);
    auto& row = errors[t];
    row.reserve(p_grid.size());
    for (double p : p_grid) {
      const double yhat = forward(model, mask_top_p(text, scores, p))(0);
      row.push_back(100.0 * std::abs(y - yhat) / std::abs(y));
    }
  });

  const auto n_excluded = static_cast<std::size_t>(std::count(excluded.begin(), excluded.end(), 1));
  MapeCurve curve;
  curve.method = std::move(method_name);
  for (std::size_t g = 0; g < p_grid.size(); ++g) {
    std::vector<double> column;
    column.reserve(texts.size());
    for (std::size_t t = 0; t < texts.size(); ++t) {
      if (!excluded[t]) column.push_back(errors[t][g]);
    }
    curve.points.push_back({p_grid[g], mean_of(column), column.size(), n_excluded});
  }
  return curve;
}

std::string mape_csv(std::span<const MapeCurve> curves) {
  std::ostringstream os;
  os << "p,method,MAPE,n\n" << std::setprecision(17);
  for (const auto& c : curves) {
    for (const auto& p : c.points) os << p.percent << ',' << c.method << ',' << p.mape << ',' << p.n << '\n';
  }
  return os.str();
}

PrecisionReport neighbor_precision(const SentenceIndex& index, std::span<const std::int64_t> categories,
                                   std::size_t max_neighbors, double epsilon,
                                   std::optional<std::span<const std::size_t>> centers) {
  if (categories.size() != index.size()) throw DataError("categories are not aligned with the index");
  if (max_neighbors == 0) throw ConfigError("max_neighbors must be positive");
  std::vector<std::size_t> all;
  if (!centers) {
    all.resize(index.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    centers = std::span<const std::size_t>(all);
  }
  PrecisionReport report;
  for (auto c : *centers) {
    if (c >= index.size()) throw BoundsError("center row " + std::to_string(c) + " outside the index");
    const auto set = query_neighbors(index, index.ids[c], max_neighbors, epsilon);
    if (set.size() == 0) {
      ++report.skipped_empty;
      continue;
    }
    std::size_t same = 0;
    for (auto id : set.neighbor_ids) same += categories[index.position(id)] == categories[c];
    report.centers.push_back(index.ids[c]);
    report.values.push_back(static_cast<double>(same) / static_cast<double>(set.size()));
  }
  const auto s = summarize(report.values);
  report.mean = s.mean;
  report.std = s.std;
  return report;
}

std::vector<std::int64_t> bundle_categories(const Bundle& bundle, LabelKey key) {
  std::vector<std::int64_t> out;
  out.reserve(bundle.records.size());
  for (const auto& rec : bundle.records) {
    auto k = record_key(rec, key);
    if (!k) throw DataError("record " + std::to_string(rec.id) + " has no category");
    out.push_back(*k);
  }
  return out;
}

std::vector<LayerSweepRow> layer_sweep(const Bundle& bundle, std::span<const std::string> layers,
                                       std::size_t max_neighbors, double quantile, std::size_t max_centers,
                                       std::uint64_t seed, LabelKey key) {
  if (layers.size() < 2) throw ConfigError("a layer sweep needs at least 2 layers");
  const auto categories = bundle_categories(bundle, key);

  std::vector<std::size_t> centers(bundle.records.size());
  std::iota(centers.begin(), centers.end(), std::size_t{0});
  if (centers.size() > max_centers) {
    std::mt19937_64 rng(seed);
    std::shuffle(centers.begin(), centers.end(), rng);
    centers.resize(max_centers);
    std::sort(centers.begin(), centers.end());
  }

  std::vector<LayerSweepRow> rows;
  for (const auto& layer : layers) {
    const auto index = build_index(bundle, layer);
    LayerSweepRow row;
    row.layer = layer;
    row.epsilon = estimate_epsilon(index, quantile, 10000, seed);
    row.precision = neighbor_precision(index, categories, max_neighbors, row.epsilon, centers);
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.precision.mean > b.precision.mean; });
  return rows;
}

std::string render_layer_table(std::span<const LayerSweepRow> rows) {
  std::ostringstream os;
  os << "rank\tlayer\tprecision\tcenters\tempty\tepsilon\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& p = rows[r].precision;
    os << r + 1 << '\t' << rows[r].layer << '\t' << format_mean_std(p.mean, p.std) << '\t' << p.values.size() << '\t'
       << p.skipped_empty << '\t' << fixed(rows[r].epsilon, 6) << '\n';
  }
  return os.str();
}

std::optional<std::string> KernelSweep::uniform_winner() const {
  if (winners.empty()) return std::nullopt;
  for (const auto& candidate : winners.front()) {
    const bool everywhere = std::all_of(winners.begin(), winners.end(), [&](const auto& w) {
      return std::find(w.begin(), w.end(), candidate) != w.end();
    });
    if (everywhere) return candidate;
  }
  return std::nullopt;
}

KernelSweep kernel_sweep(const Model& model, const Bundle& bundle, const SentenceIndex& index,
                         std::span<const TokenizedText> eval_texts, const LafaConfig& base_config,
                         std::span<const double> p_grid, std::size_t threads) {
  const ModelProvider provider(model);
  KernelSweep sweep;
  sweep.p_grid.assign(p_grid.begin(), p_grid.end());
  for (auto family : kAllKernelFamilies) {
    LafaConfig config = base_config;
    config.kernel.family = family;
    validate(config);
    const Scorer scorer = [&](const TokenizedText& text) {
      return lafa(provider, bundle, index, text, 0, config).scores;
    };
    sweep.curves.push_back(mask_eval(model, eval_texts, scorer, p_grid, to_string(family), threads));
  }
  for (std::size_t g = 0; g < p_grid.size(); ++g) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& c : sweep.curves) best = std::max(best, c.points[g].mape);
    std::vector<std::string> w;
    for (const auto& c : sweep.curves) {
      if (c.points[g].mape == best) w.push_back(c.method);
    }
    sweep.winners.push_back(std::move(w));
  }
  return sweep;
}

std::string render_kernel_table(const KernelSweep& sweep) {
  std::ostringstream os;
  os << "kernel";
  for (double p : sweep.p_grid) os << "\tp=" << p;
  os << '\n';
  for (const auto& c : sweep.curves) {
    os << c.method;
    for (const auto& p : c.points) os << '\t' << fixed(p.mape, 4);
    os << '\n';
  }
  os << "best";
  for (const auto& w : sweep.winners) {
    os << '\t';
    for (std::size_t i = 0; i < w.size(); ++i) os << (i ? "," : "") << w[i];
  }
  os << '\n';
  const auto uniform = sweep.uniform_winner();
  os << "uniform_winner\t" << (uniform ? *uniform : "none") << '\n';
  return os.str();
}

}  // namespace lafa
