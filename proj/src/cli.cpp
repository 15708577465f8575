#include "lafa/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "lafa/attribution.hpp"
#include "lafa/detail/parallel.hpp"
#include "lafa/evalharness.hpp"
#include "lafa/ingest.hpp"
#include "lafa/kernels.hpp"
#include "lafa/micromodel.hpp"
#include "lafa/vecstore.hpp"

namespace lafa::cli {

namespace {

using nlohmann::json;

/// Invalid flag combination detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  // Shared paths.
  std::string bundle;
  std::string model;
  std::string index;
  std::string out;
  std::string csv;
  std::string scores;

  // Pipeline settings.
  std::string layer = "1";
  std::string grad_layer = "0";
  std::string pool = "mean";
  std::string method = "simplegrad";
  std::string base_method;
  std::string kernel;
  double lambda = 1.0;
  std::size_t neighbors = 10;
  double cutoff_q = 0.05;
  std::size_t sample_pairs = 10000;
  std::optional<double> epsilon;
  bool same_label_only = false;
  std::uint32_t n_samples = 25;
  double sigma = 0.1;
  std::string reference = "zero";
  std::string target = "predicted";
  std::string p_grid = "1,2,5,10,25,50";
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  std::size_t limit = 0;

  // synth
  std::string task = "regression";
  std::uint32_t texts = 2000;
  std::uint32_t templates = 20;
  std::uint32_t vocab_size = 400;
  std::uint32_t keys = 3;
  std::uint32_t min_length = 10;
  std::uint32_t max_length = 14;
  double noise = 0.0;

  // train
  std::uint32_t dim = 16;
  std::uint32_t hidden = 16;
  std::uint32_t epochs = 30;
  std::uint32_t batch_size = 32;
  double lr = 0.01;
  std::string export_dir;

  // eval mask / sweep
  double tolerance = 0.01;
  std::size_t eval_limit = 200;
  std::vector<std::string> layers;
  std::size_t max_centers = 10000;

  // validate
  bool corpus_only = false;
};

void emit(const Options& o, const std::string& content, std::ostream& out) {
  if (o.out.empty()) {
    out << content;
    return;
  }
  std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + o.out + " for writing");
  f << content;
  if (!f) throw IoError("write failed for " + o.out);
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << content;
  if (!f) throw IoError("write failed for " + path);
}

std::vector<double> parse_p_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    std::size_t used = 0;
    double p = 0.0;
    try {
      p = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("--p-grid: '" + item + "' is not a number");
    }
    if (used != item.size() || !(p >= 0.0 && p <= 100.0)) throw UsageError("--p-grid: '" + item + "' is not in [0, 100]");
    grid.push_back(p);
  }
  if (grid.empty()) throw UsageError("--p-grid is empty");
  return grid;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

KernelSpec parse_kernel(const std::string& text) {
  if (text.empty()) return {};
  KernelSpec spec;
  if (text.front() == '{') {
    spec = kernel_from_json(text);
  } else {
    spec.family = kernel_family_from_string(text);
  }
  validate(spec);
  return spec;
}

TargetSelector parse_target(const std::string& text) {
  if (text == "predicted") return {TargetRule::Predicted, 0};
  if (text == "label") return {TargetRule::Label, 0};
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("--target must be 'predicted', 'label' or an index");
  return {TargetRule::Fixed, static_cast<std::size_t>(v)};
}

MethodConfig method_config(const Options& o, Method method) {
  MethodConfig c;
  c.method = method;
  c.samples = o.n_samples;
  c.sigma = o.sigma;
  c.reference = reference_from_string(o.reference);
  c.seed = o.seed;
  validate(c);
  return c;
}

LafaConfig lafa_config(const Options& o) {
  LafaConfig c;
  c.base = method_config(o, o.base_method.empty() ? Method::SimpleGrad : method_from_string(o.base_method));
  c.lambda = o.lambda;
  c.kernel = parse_kernel(o.kernel);
  c.neighbors.max_neighbors = o.neighbors;
  c.neighbors.epsilon = o.epsilon;
  c.neighbors.cutoff_quantile = o.cutoff_q;
  c.neighbors.sample_pairs = o.sample_pairs;
  c.neighbors.same_label_only = o.same_label_only;
  c.encoder_layer = o.layer;
  validate(c);
  return c;
}

json config_echo(const Options& o, const std::string& method) {
  json j;
  j["method"] = method;
  j["layer"] = o.layer;
  j["M"] = o.neighbors;
  j["cutoff_q"] = o.cutoff_q;
  j["seed"] = o.seed;
  if (method == "lafa") {
    j["lambda"] = o.lambda;
    j["kernel"] = json::parse(kernel_to_json(parse_kernel(o.kernel)));
    j["base_method"] = o.base_method.empty() ? "simplegrad" : o.base_method;
  }
  if (o.epsilon) j["epsilon"] = *o.epsilon;
  return j;
}

/// Index on the encoder layer, loaded or built, with its cutoff resolved once.
SentenceIndex prepare_index(const Options& o, const Bundle& bundle, const NeighborParams& params) {
  SentenceIndex index;
  if (!o.index.empty()) {
    index = load_index(o.index);
    index.layer = o.layer;
    if (index.size() != bundle.records.size() || index.ids != [&] {
          std::vector<RecordId> ids;
          for (const auto& r : bundle.records) ids.push_back(r.id);
          return ids;
        }()) {
      throw DataError("index " + o.index + " does not match the bundle's records");
    }
  } else {
    index = build_index(bundle, o.layer);
  }
  if (params.same_label_only) {
    index.filter_keys = bundle_categories(bundle, LabelKey::Category);
  }
  index.epsilon = resolve_epsilon(index, params, o.seed);
  return index;
}

struct Pipeline {
  Bundle bundle;
  std::optional<Model> model;
  std::unique_ptr<GradientProvider> provider;
};

/// Rand needs neither layers nor gradients, so that case reads only the corpus.
Pipeline load_pipeline(const Options& o, bool require_model, bool corpus_only = false) {
  Pipeline p;
  if (corpus_only && o.model.empty() && !require_model) {
    p.bundle = read_corpus(o.bundle);
    return p;
  }
  p.bundle = read_bundle(o.bundle);
  if (!o.model.empty()) {
    p.model = load_model(o.model);
    if (p.model->config.dim != p.bundle.dim) throw DataError("model and bundle embedding dimensions differ");
    p.provider = std::make_unique<ModelProvider>(*p.model);
  } else if (require_model) {
    throw UsageError("--model is required");
  } else {
    p.provider = std::make_unique<BundleGradientProvider>(p.bundle, o.grad_layer);
  }
  return p;
}

json attribution_json(const AttributionVector& a, std::size_t target, const NeighborSet* neighbors,
                      const LafaConfig* lafa) {
  json j;
  j["id"] = a.text_id;
  j["method"] = to_string(a.method);
  j["target"] = target;
  j["scores"] = a.scores;
  j["neighbors"] = neighbors ? json(neighbors->neighbor_ids) : json(nullptr);
  j["epsilon"] = neighbors ? json(neighbors->epsilon_used) : json(nullptr);
  j["lambda"] = lafa ? json(lafa->lambda) : json(nullptr);
  j["kernel"] = lafa ? json::parse(kernel_to_json(lafa->kernel)) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(const Options& o, std::ostream& out) {
  SyntheticConfig c;
  c.vocab_size = o.vocab_size;
  c.num_templates = o.templates;
  c.key_tokens_per_template = o.keys;
  c.texts = o.texts;
  c.length_range = {o.min_length, o.max_length};
  c.task = task_from_string(o.task);
  c.noise = o.noise;
  c.seed = o.seed;
  const auto corpus = generate_synthetic(c);
  write_bundle(corpus_bundle(corpus), o.out);
  out << "wrote " << corpus.records.size() << " records to " << o.out << '\n';
}

void cmd_train(const Options& o, std::ostream& out) {
  const auto corpus = read_corpus(o.bundle);
  ModelConfig mc;
  mc.vocab_size = static_cast<std::uint32_t>(corpus.vocab.size());
  mc.dim = o.dim;
  mc.hidden_width = o.hidden;
  mc.head = head_from_string(o.task);
  mc.seed = o.seed;
  if (mc.head == HeadKind::Multilabel) {
    std::uint32_t classes = 0;
    for (const auto& r : corpus.records) {
      if (!r.label) continue;
      if (const auto* set = std::get_if<std::vector<std::uint32_t>>(&*r.label)) {
        for (auto c : *set) classes = std::max(classes, c + 1);
      }
    }
    if (classes == 0) throw DataError("multilabel training needs label sets");
    mc.outputs = classes;
  }
  TrainOptions to;
  to.epochs = o.epochs;
  to.batch_size = o.batch_size;
  to.learning_rate = o.lr;
  to.seed = o.seed;
  const auto result = train(init_model(mc), corpus.records, to);
  save_model(result.model, o.out);
  if (!o.export_dir.empty()) {
    write_bundle(encode_bundle(result.model, corpus.records, corpus.vocab), o.export_dir);
  }
  json summary{{"model", o.out},
               {"head", to_string(mc.head)},
               {"outputs", mc.outputs},
               {"loss_trace", result.loss_trace},
               {"final_loss", evaluate_loss(result.model, corpus.records)}};
  out << summary.dump(2) << '\n';
}

void cmd_index(const Options& o, std::ostream& out) {
  const auto bundle = read_bundle(o.bundle);
  auto index = build_index(bundle, o.layer);
  index.epsilon = o.epsilon ? *o.epsilon : estimate_epsilon(index, o.cutoff_q, o.sample_pairs, o.seed);
  save_index(index, o.out);
  out << "indexed " << index.size() << " records of layer " << o.layer << ", epsilon " << *index.epsilon << '\n';
}

void cmd_attribute(const Options& o, std::ostream& out) {
  const auto method = method_from_string(o.method);
  const auto p = load_pipeline(o, false, method == Method::Rand);
  const auto selector = parse_target(o.target);
  const auto& records = p.bundle.records;
  const std::size_t count = o.limit == 0 ? records.size() : std::min(o.limit, records.size());

  std::optional<LafaConfig> lc;
  MethodConfig mc;
  if (method == Method::LAFA) {
    lc = lafa_config(o);
  } else {
    mc = method_config(o, method);
  }
  const bool needs_index = lc || mc.reference == ReferenceKind::Neighbors;
  NeighborParams params = lc ? lc->neighbors : NeighborParams{};
  if (!lc) {
    params.max_neighbors = o.neighbors;
    params.epsilon = o.epsilon;
    params.cutoff_quantile = o.cutoff_q;
    params.sample_pairs = o.sample_pairs;
    params.same_label_only = o.same_label_only;
  }
  std::optional<SentenceIndex> index;
  if (needs_index) index = prepare_index(o, p.bundle, params);

  std::vector<std::string> lines(count);
  detail::parallel_for(count, o.threads, [&](std::size_t r) {
    const auto& text = records[r];
    const auto target = p.provider ? resolve_target(*p.provider, text, selector) : 0;
    json j;
    if (lc) {
      const auto res = lafa_detailed(*p.provider, p.bundle, *index, text, target, *lc);
      j = attribution_json(res.attribution, target, &res.neighbors, &*lc);
    } else if (method == Method::Rand) {
      j = attribution_json(rand_baseline(text, o.seed), target, nullptr, nullptr);
    } else if (index) {
      const auto set = query_neighbors(*index, text.id, params.max_neighbors, *index->epsilon, params.same_label_only);
      std::vector<Matrix> refs;
      for (auto id : set.neighbor_ids) refs.push_back(p.provider->embed(p.bundle.record(id)));
      MethodConfig local = mc;
      if (refs.empty()) local.reference = ReferenceKind::Zero;
      j = attribution_json(attribute(*p.provider, text, target, local, refs), target, &set, nullptr);
    } else {
      j = attribution_json(attribute(*p.provider, text, target, mc), target, nullptr, nullptr);
    }
    lines[r] = j.dump() + '\n';
  });
  std::string content;
  for (const auto& l : lines) content += l;
  emit(o, content, out);
}

std::vector<AttributionVector> read_attributions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<AttributionVector> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      AttributionVector a;
      a.text_id = j.at("id").get<RecordId>();
      a.method = method_from_string(j.at("method").get<std::string>());
      a.scores = j.at("scores").get<std::vector<double>>();
      out.push_back(std::move(a));
    } catch (const json::exception& e) {
      throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void cmd_eval_metric(const Options& o, bool use_auc, std::ostream& out) {
  const auto bundle = read_corpus(o.bundle);
  const auto attributions = read_attributions(o.scores);
  json config{{"scores", o.scores}, {"bundle", o.bundle}};
  if (!attributions.empty()) config["method"] = to_string(attributions.front().method);
  const auto report = use_auc ? evaluate_auc(attributions, bundle, config) : evaluate_pearson(attributions, bundle, config);
  emit(o, report.to_json().dump(2) + '\n', out);
}

Scorer make_scorer(const std::string& name, const Options& o, const Pipeline& p, const SentenceIndex* index,
                   const std::optional<LafaConfig>& lc) {
  if (name == "gold") {
    return [](const TokenizedText& t) {
      if (!t.gold) throw DataError("record " + std::to_string(t.id) + " has no gold vector");
      return *t.gold;
    };
  }
  const auto method = method_from_string(name);
  if (method == Method::Rand) {
    return [seed = o.seed](const TokenizedText& t) { return rand_baseline(t, seed).scores; };
  }
  if (method == Method::LAFA) {
    return [&p, index, cfg = *lc](const TokenizedText& t) {
      return lafa(*p.provider, p.bundle, *index, t, 0, cfg).scores;
    };
  }
  auto mc = method_config(o, method);
  if (mc.reference == ReferenceKind::Neighbors) {
    return [&p, index, mc, m = o.neighbors, same = o.same_label_only](const TokenizedText& t) {
      const auto set = query_neighbors(*index, t.id, m, *index->epsilon, same);
      std::vector<Matrix> refs;
      for (auto id : set.neighbor_ids) refs.push_back(p.provider->embed(p.bundle.record(id)));
      auto local = mc;
      if (refs.empty()) local.reference = ReferenceKind::Zero;
      return attribute(*p.provider, t, 0, local, refs).scores;
    };
  }
  return [&p, mc](const TokenizedText& t) { return attribute(*p.provider, t, 0, mc).scores; };
}

json curve_json(const MapeCurve& c) {
  json points = json::array();
  for (const auto& p : c.points) {
    points.push_back({{"p", p.percent}, {"mape", p.mape}, {"n", p.n}, {"excluded", p.excluded}});
  }
  return {{"method", c.method}, {"points", points}};
}

std::vector<RecordId> ids_of(std::span<const TokenizedText> texts) {
  std::vector<RecordId> ids;
  for (const auto& t : texts) ids.push_back(t.id);
  return ids;
}

void cmd_eval_mask(const Options& o, std::ostream& out) {
  const auto p = load_pipeline(o, true);
  const auto grid = parse_p_grid(o.p_grid);
  const auto names = split_list(o.method);
  if (names.empty()) throw UsageError("--method lists no methods");

  std::optional<LafaConfig> lc;
  bool needs_index = false;
  for (const auto& n : names) {
    if (n == "gold") continue;
    const auto m = method_from_string(n);
    if (m == Method::LAFA) {
      lc = lafa_config(o);
      needs_index = true;
    } else if (m != Method::Rand && method_config(o, m).reference == ReferenceKind::Neighbors) {
      needs_index = true;
    }
  }
  NeighborParams params;
  params.max_neighbors = o.neighbors;
  params.epsilon = o.epsilon;
  params.cutoff_quantile = o.cutoff_q;
  params.sample_pairs = o.sample_pairs;
  params.same_label_only = o.same_label_only;
  std::optional<SentenceIndex> index;
  if (needs_index) index = prepare_index(o, p.bundle, params);

  const auto eval_set = select_eval_set(*p.model, p.bundle.records, o.tolerance, o.eval_limit, o.seed);
  if (eval_set.empty()) throw InsufficientDataError("no record is predicted within the tolerance");

  std::vector<MapeCurve> curves;
  for (const auto& n : names) {
    const auto scorer = make_scorer(n, o, p, index ? &*index : nullptr, lc);
    curves.push_back(mask_eval(*p.model, eval_set, scorer, grid, n, o.threads));
  }
  json report;
  report["metric"] = "MAPE-curve";
  report["ids"] = ids_of(eval_set);
  report["curves"] = json::array();
  for (const auto& c : curves) report["curves"].push_back(curve_json(c));
  report["skipped"] = curves.front().points.front().excluded;
  report["config"] = config_echo(o, lc ? "lafa" : names.front());
  report["config"]["methods"] = names;
  report["config"]["p_grid"] = grid;
  report["config"]["tolerance"] = o.tolerance;
  if (index) report["config"]["epsilon"] = *index->epsilon;
  if (!o.csv.empty()) write_text(o.csv, mape_csv(curves));
  emit(o, report.dump(2) + '\n', out);
}

void cmd_sweep_layers(const Options& o, std::ostream& out) {
  const auto bundle = read_bundle(o.bundle);
  const auto layers = o.layers.empty() ? bundle.layer_names() : o.layers;
  const auto rows = layer_sweep(bundle, layers, o.neighbors, o.cutoff_q, o.max_centers, o.seed);
  json report;
  report["metric"] = "Precision";
  report["ranking"] = json::array();
  for (const auto& r : rows) {
    report["ranking"].push_back({{"layer", r.layer},
                                 {"mean", r.precision.mean},
                                 {"std", r.precision.std},
                                 {"centers", r.precision.centers},
                                 {"values", r.precision.values},
                                 {"skipped", r.precision.skipped_empty},
                                 {"epsilon", r.epsilon}});
  }
  report["config"] = {{"M", o.neighbors}, {"cutoff_q", o.cutoff_q}, {"max_centers", o.max_centers}, {"seed", o.seed}};
  out << render_layer_table(rows);
  if (!o.out.empty()) write_text(o.out, report.dump(2) + '\n');
}

void cmd_sweep_kernels(const Options& o, std::ostream& out) {
  const auto p = load_pipeline(o, true);
  const auto grid = parse_p_grid(o.p_grid);
  const auto lc = lafa_config(o);
  const auto index = prepare_index(o, p.bundle, lc.neighbors);
  const auto eval_set = select_eval_set(*p.model, p.bundle.records, o.tolerance, o.eval_limit, o.seed);
  if (eval_set.empty()) throw InsufficientDataError("no record is predicted within the tolerance");
  const auto sweep = kernel_sweep(*p.model, p.bundle, index, eval_set, lc, grid, o.threads);

  json report;
  report["metric"] = "MAPE-curve";
  report["ids"] = ids_of(eval_set);
  report["curves"] = json::array();
  for (const auto& c : sweep.curves) report["curves"].push_back(curve_json(c));
  report["winners"] = sweep.winners;
  const auto uniform = sweep.uniform_winner();
  report["uniform_winner"] = uniform ? json(*uniform) : json(nullptr);
  report["config"] = config_echo(o, "lafa");
  report["config"].erase("kernel");
  report["config"]["p_grid"] = grid;
  report["config"]["epsilon"] = *index.epsilon;
  if (!o.csv.empty()) write_text(o.csv, mape_csv(sweep.curves));
  out << render_kernel_table(sweep);
  if (!o.out.empty()) write_text(o.out, report.dump(2) + '\n');
}

void cmd_validate(const Options& o, std::ostream& out) {
  const auto bundle = o.corpus_only ? read_corpus(o.bundle) : read_bundle(o.bundle);
  out << "ok: " << bundle.records.size() << " records, dim " << bundle.dim << ", vocab " << bundle.vocab.size()
      << ", layers [";
  const auto names = bundle.layer_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << (i ? "," : "") << names[i] << (bundle.layer(names[i]).gradients ? "+grad" : "");
  }
  out << "]\n";
}

// ---------------------------------------------------------------------------
// Flag registration

void add_bundle(CLI::App* app, Options& o) {
  app->add_option("--bundle", o.bundle, "Bundle directory")->required();
}

void add_out(CLI::App* app, Options& o, bool required, const std::string& what) {
  auto* opt = app->add_option("--out", o.out, what);
  if (required) opt->required();
}

void add_seed(CLI::App* app, Options& o) {
  app->add_option("--seed", o.seed, "Seed for every random choice")->capture_default_str();
}

void add_threads(CLI::App* app, Options& o) {
  app->add_option("--threads", o.threads, "Worker threads; results do not depend on it")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

void add_neighbor_flags(CLI::App* app, Options& o) {
  app->add_option("--layer", o.layer, "Encoder layer used to find neighbors")->capture_default_str();
  app->add_option("--pool", o.pool, "Sentence pooling")->check(CLI::IsMember({"mean"}))->capture_default_str();
  app->add_option("--index", o.index, "Prebuilt index file (else built from --layer)");
  app->add_option("--neighbors", o.neighbors, "Maximum neighbors M")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--cutoff-q", o.cutoff_q, "Quantile of pair distances used as the cutoff")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app->add_option("--epsilon", o.epsilon, "Explicit distance cutoff (overrides --cutoff-q)");
  app->add_option("--sample-pairs", o.sample_pairs, "Pairs sampled when estimating the cutoff")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_flag("--same-label-only", o.same_label_only, "Keep only neighbors sharing the center's category");
}

void add_method_flags(CLI::App* app, Options& o, bool with_method, bool with_kernel) {
  if (with_method) {
    app->add_option("--method", o.method,
                    "rand|simplegrad|inputgrad|smoothgrad|integrad|shapgrad|shapdeep|lafa")
        ->capture_default_str();
  }
  app->add_option("--base-method", o.base_method, "Base method inside lafa (default simplegrad)");
  if (with_kernel) {
    app->add_option("--kernel", o.kernel, "Kernel family name or JSON spec, lafa only (default indicator)");
  }
  app->add_option("--lambda", o.lambda, "Weight of the neighbor term")->capture_default_str();
  app->add_option("--n-samples", o.n_samples, "Samples or integration steps N")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--sigma", o.sigma, "SmoothGrad noise scale")->capture_default_str();
  app->add_option("--reference", o.reference, "zero|neighbors")
      ->check(CLI::IsMember({"zero", "neighbors"}))
      ->capture_default_str();
  app->add_option("--model", o.model, "Model file")->capture_default_str();
  app->add_option("--grad-layer", o.grad_layer, "Bundle layer with stored gradients, used without --model")
      ->capture_default_str();
  add_neighbor_flags(app, o);
}

void add_mask_flags(CLI::App* app, Options& o) {
  app->add_option("--p-grid", o.p_grid, "Comma-separated mask percentages")->capture_default_str();
  app->add_option("--tolerance", o.tolerance, "Relative prediction error admitting a text to the eval set")
      ->capture_default_str();
  app->add_option("--eval-limit", o.eval_limit, "Maximum eval-set size")->capture_default_str();
  app->add_option("--csv", o.csv, "Also write MAPE curves as CSV (p,method,MAPE,n)");
}

void check_combinations(const CLI::App& app, const Options& o) {
  const auto* attribute = app.get_subcommand("attribute");
  if (attribute->parsed()) {
    const bool is_lafa = method_from_string(o.method) == Method::LAFA;
    if (!is_lafa && attribute->count("--kernel") > 0) throw UsageError("--kernel requires --method lafa");
    if (!is_lafa && attribute->count("--base-method") > 0) throw UsageError("--base-method requires --method lafa");
    if (!is_lafa && attribute->count("--lambda") > 0) throw UsageError("--lambda requires --method lafa");
  }
  const auto* mask = app.get_subcommand("eval")->get_subcommand("mask");
  if (mask->parsed()) {
    const auto names = split_list(o.method);
    const bool has_lafa = std::any_of(names.begin(), names.end(), [](const auto& n) {
      return n != "gold" && method_from_string(n) == Method::LAFA;
    });
    if (!has_lafa && mask->count("--kernel") > 0) throw UsageError("--kernel requires --method lafa");
  }
  if (o.method.find("lafa") != std::string::npos && !o.base_method.empty() &&
      method_from_string(o.base_method) == Method::LAFA) {
    throw UsageError("--base-method cannot be lafa");
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Locally aggregated feature attribution toolkit", "lafa"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file of flag values; command-line flags take precedence");
  app.set_version_flag("--version", "lafa 0.1.0");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic key-token corpus");
  synth->add_option("--task", o.task, "regression|binary|multilabel")
      ->check(CLI::IsMember({"regression", "binary", "multilabel"}))
      ->capture_default_str();
  synth->add_option("--texts", o.texts, "Number of texts")->capture_default_str();
  synth->add_option("--templates", o.templates, "Number of templates")->capture_default_str();
  synth->add_option("--vocab-size", o.vocab_size, "Vocabulary size")->capture_default_str();
  synth->add_option("--keys", o.keys, "Key tokens per template")->capture_default_str();
  synth->add_option("--min-length", o.min_length, "Shortest text")->capture_default_str();
  synth->add_option("--max-length", o.max_length, "Longest text")->capture_default_str();
  synth->add_option("--noise", o.noise, "Label noise standard deviation")->capture_default_str();
  add_seed(synth, o);
  add_out(synth, o, true, "Output corpus directory");

  auto* train_cmd = app.add_subcommand("train", "Train a micromodel on a corpus");
  add_bundle(train_cmd, o);
  train_cmd->add_option("--task", o.task, "regression|binary|multilabel")
      ->check(CLI::IsMember({"regression", "binary", "multilabel"}))
      ->capture_default_str();
  train_cmd->add_option("--dim", o.dim, "Embedding dimension")->capture_default_str();
  train_cmd->add_option("--hidden", o.hidden, "Hidden width")->capture_default_str();
  train_cmd->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", o.batch_size, "Minibatch size")->capture_default_str();
  train_cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--export", o.export_dir, "Also write a bundle with the model's layers");
  add_seed(train_cmd, o);
  add_out(train_cmd, o, true, "Output model file");

  auto* index_cmd = app.add_subcommand("index", "Build a sentence index over one layer");
  add_bundle(index_cmd, o);
  index_cmd->add_option("--layer", o.layer, "Layer to index")->capture_default_str();
  index_cmd->add_option("--pool", o.pool, "Sentence pooling")->check(CLI::IsMember({"mean"}))->capture_default_str();
  index_cmd->add_option("--cutoff-q", o.cutoff_q, "Quantile of pair distances stored as the cutoff")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  index_cmd->add_option("--epsilon", o.epsilon, "Explicit cutoff to store");
  index_cmd->add_option("--sample-pairs", o.sample_pairs, "Pairs sampled when estimating the cutoff")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_seed(index_cmd, o);
  add_out(index_cmd, o, true, "Output index file");

  auto* attribute_cmd = app.add_subcommand("attribute", "Compute attributions as JSONL");
  add_bundle(attribute_cmd, o);
  add_method_flags(attribute_cmd, o, true, true);
  attribute_cmd->add_option("--target", o.target, "predicted|label|<index>")->capture_default_str();
  attribute_cmd->add_option("--limit", o.limit, "Only the first N records (0 = all)")->capture_default_str();
  add_seed(attribute_cmd, o);
  add_threads(attribute_cmd, o);
  add_out(attribute_cmd, o, false, "Output JSONL file (default stdout)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate attributions");
  eval_cmd->require_subcommand(1);
  auto* eval_auc = eval_cmd->add_subcommand("auc", "Per-text AUC against gold spans");
  auto* eval_pearson = eval_cmd->add_subcommand("pearson", "Per-text Pearson correlation against gold");
  for (auto* sub : {eval_auc, eval_pearson}) {
    add_bundle(sub, o);
    sub->add_option("--scores", o.scores, "Attribution JSONL from 'attribute'")->required();
    add_out(sub, o, false, "report.json path (default stdout)");
  }
  auto* eval_mask = eval_cmd->add_subcommand("mask", "MAPE after masking the top-p% tokens");
  add_bundle(eval_mask, o);
  add_method_flags(eval_mask, o, false, true);
  eval_mask->add_option("--method", o.method, "Comma-separated methods; 'gold' masks gold tokens")
      ->capture_default_str();
  add_mask_flags(eval_mask, o);
  add_seed(eval_mask, o);
  add_threads(eval_mask, o);
  add_out(eval_mask, o, false, "report.json path (default stdout)");

  auto* sweep_cmd = app.add_subcommand("sweep", "Layer and kernel sweeps");
  sweep_cmd->require_subcommand(1);
  auto* sweep_layers = sweep_cmd->add_subcommand("layers", "Rank layers by neighbor precision");
  add_bundle(sweep_layers, o);
  sweep_layers->add_option("--layers", o.layers, "Layers to compare (default all)")->delimiter(',');
  sweep_layers->add_option("--neighbors", o.neighbors, "Maximum neighbors M")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sweep_layers->add_option("--cutoff-q", o.cutoff_q, "Quantile of pair distances used as the cutoff")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  sweep_layers->add_option("--max-centers", o.max_centers, "Centers sampled per layer")->capture_default_str();
  add_seed(sweep_layers, o);
  add_out(sweep_layers, o, false, "report.json path");
  auto* sweep_kernels = sweep_cmd->add_subcommand("kernels", "LAFA masking MAPE for every kernel family");
  add_bundle(sweep_kernels, o);
  add_method_flags(sweep_kernels, o, false, false);
  add_mask_flags(sweep_kernels, o);
  add_seed(sweep_kernels, o);
  add_threads(sweep_kernels, o);
  add_out(sweep_kernels, o, false, "report.json path");

  auto* validate_cmd = app.add_subcommand("validate", "Check a bundle against the interchange format");
  add_bundle(validate_cmd, o);
  validate_cmd->add_flag("--corpus-only", o.corpus_only, "Accept a bundle without layers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    check_combinations(app, o);
    if (synth->parsed()) cmd_synth(o, out);
    if (train_cmd->parsed()) cmd_train(o, out);
    if (index_cmd->parsed()) cmd_index(o, out);
    if (attribute_cmd->parsed()) cmd_attribute(o, out);
    if (eval_auc->parsed()) cmd_eval_metric(o, true, out);
    if (eval_pearson->parsed()) cmd_eval_metric(o, false, out);
    if (eval_mask->parsed()) cmd_eval_mask(o, out);
    if (sweep_layers->parsed()) cmd_sweep_layers(o, out);
    if (sweep_kernels->parsed()) cmd_sweep_kernels(o, out);
    if (validate_cmd->parsed()) cmd_validate(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"lafa"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lafa::cli
