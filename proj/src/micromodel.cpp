#include "lafa/micromodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "lafa/detail/binary_io.hpp"

namespace lafa {

namespace {

constexpr std::string_view kModelMagic = "LAFAMDL1";

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Vector target_vector(const Model& model, const TokenizedText& text) {
  if (!text.label) throw DataError("record " + std::to_string(text.id) + " has no label");
  const auto k = model.output_width();
  Vector y = Vector::Zero(static_cast<Eigen::Index>(k));
  if (model.config.head == HeadKind::Multilabel) {
    auto mark = [&](std::uint32_t c) {
      if (c >= k) throw DataError("record " + std::to_string(text.id) + ": class " + std::to_string(c) + " >= " + std::to_string(k));
      y(c) = 1.0;
    };
    if (const auto* set = std::get_if<std::vector<std::uint32_t>>(&*text.label)) {
      for (auto c : *set) mark(c);
    } else {
      mark(static_cast<std::uint32_t>(std::get<double>(*text.label)));
    }
    return y;
  }
  const auto* v = std::get_if<double>(&*text.label);
  if (!v) throw DataError("record " + std::to_string(text.id) + ": head needs a scalar label");
  if (model.config.head == HeadKind::Binary && *v != 0.0 && *v != 1.0) {
    throw DataError("record " + std::to_string(text.id) + ": binary label must be 0 or 1");
  }
  y(0) = *v;
  return y;
}

// Loss and d loss / d scores for one sample.
double sample_loss(const Model& model, const Vector& scores, const Vector& y, Vector* dscores) {
  const auto k = static_cast<double>(scores.size());
  switch (model.config.head) {
    case HeadKind::Regression: {
      const Vector r = scores - y;
      if (dscores) *dscores = 2.0 * r / k;
      return r.squaredNorm() / k;
    }
    case HeadKind::Multilabel: {
      const Vector p = scores.unaryExpr(&sigmoid);
      const Vector r = p - y;
      if (dscores) *dscores = (2.0 / k) * r.cwiseProduct(p.cwiseProduct((1.0 - p.array()).matrix()));
      return r.squaredNorm() / k;
    }
    case HeadKind::Binary: {
      const double s = scores(0);
      if (dscores) *dscores = Vector::Constant(1, sigmoid(s) - y(0));
      return y(0) * softplus(-s) + (1.0 - y(0)) * softplus(s);
    }
  }
  return 0.0;
}

struct Gradients {
  Matrix embedding;
  Matrix hidden_weight;
  Vector hidden_bias;
  Matrix head_weight;
  Vector head_bias;

  explicit Gradients(const Model& m)
      : embedding(Matrix::Zero(m.embedding.rows(), m.embedding.cols())),
        hidden_weight(Matrix::Zero(m.hidden_weight.rows(), m.hidden_weight.cols())),
        hidden_bias(Vector::Zero(m.hidden_bias.size())),
        head_weight(Matrix::Zero(m.head_weight.rows(), m.head_weight.cols())),
        head_bias(Vector::Zero(m.head_bias.size())) {}

  void clear() {
    embedding.setZero();
    hidden_weight.setZero();
    hidden_bias.setZero();
    head_weight.setZero();
    head_bias.setZero();
  }
};

void accumulate(const Model& model, const TokenizedText& text, const ForwardCache& fc, const Vector& dscores,
                Gradients& g) {
  const auto t = static_cast<double>(fc.embedded.rows());
  g.head_weight.noalias() += dscores * fc.pooled.transpose();
  g.head_bias += dscores;
  const RowVector dpool = (model.head_weight.transpose() * dscores).transpose() / t;
  // d pre-activation per token
  const Matrix da = (1.0 - fc.hidden.array().square()).rowwise() * dpool.array();
  g.hidden_weight.noalias() += da.transpose() * fc.embedded;
  g.hidden_bias += da.colwise().sum().transpose();
  const Matrix de = da * model.hidden_weight;
  for (std::size_t i = 0; i < text.token_ids.size(); ++i) {
    const auto id = text.token_ids[i];
    if (id == kMaskTokenId) continue;
    g.embedding.row(id) += de.row(static_cast<Eigen::Index>(i));
  }
}

class Adam {
 public:
  explicit Adam(const Model& m, double lr) : lr_(lr), m_(m), v_(m) {}

  void step(Model& model, const Gradients& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    update(model.embedding, g.embedding, m_.embedding, v_.embedding, c1, c2);
    update(model.hidden_weight, g.hidden_weight, m_.hidden_weight, v_.hidden_weight, c1, c2);
    update(model.hidden_bias, g.hidden_bias, m_.hidden_bias, v_.hidden_bias, c1, c2);
    update(model.head_weight, g.head_weight, m_.head_weight, v_.head_weight, c1, c2);
    update(model.head_bias, g.head_bias, m_.head_bias, v_.head_bias, c1, c2);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  template <typename P>
  void update(P& param, const P& grad, P& m, P& v, double c1, double c2) const {
    m = kBeta1 * m + (1.0 - kBeta1) * grad;
    v = kBeta2 * v + (1.0 - kBeta2) * grad.cwiseProduct(grad);
    param.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
  }

  double lr_;
  std::uint64_t t_ = 0;
  Gradients m_;
  Gradients v_;
};

template <typename P>
void put_params(std::ostream& out, const P& p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) detail::put_f64(out, p.data()[i]);
}

template <typename P>
void get_params(std::istream& in, P& p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = detail::get_f64(in, "model parameters");
}

}  // namespace

std::string to_string(HeadKind head) {
  switch (head) {
    case HeadKind::Regression: return "regression";
    case HeadKind::Binary: return "binary";
    case HeadKind::Multilabel: return "multilabel";
  }
  return "regression";
}

HeadKind head_from_string(const std::string& name) {
  if (name == "regression") return HeadKind::Regression;
  if (name == "binary") return HeadKind::Binary;
  if (name == "multilabel") return HeadKind::Multilabel;
  throw ConfigError("unknown head '" + name + "'");
}

void validate(const ModelConfig& c) {
  if (c.vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (c.dim == 0) throw ConfigError("dim must be positive");
  if (c.hidden_width == 0) throw ConfigError("hidden_width must be positive");
  if (c.outputs == 0) throw ConfigError("head needs at least one output");
  if (c.head != HeadKind::Multilabel && c.outputs != 1) throw ConfigError("only multilabel heads have K > 1");
}

Model init_model(const ModelConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  auto fill = [&](auto& p, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  };
  Model m;
  m.config = config;
  m.embedding.resize(config.vocab_size, config.dim);
  m.hidden_weight.resize(config.hidden_width, config.dim);
  m.hidden_bias.resize(config.hidden_width);
  m.head_weight.resize(config.outputs, config.hidden_width);
  m.head_bias.resize(config.outputs);
  const double hidden_bound = 1.0 / std::sqrt(static_cast<double>(config.dim));
  const double head_bound = 1.0 / std::sqrt(static_cast<double>(config.hidden_width));
  fill(m.embedding, 1.0);
  fill(m.hidden_weight, hidden_bound);
  fill(m.hidden_bias, hidden_bound);
  fill(m.head_weight, head_bound);
  fill(m.head_bias, head_bound);
  return m;
}

Matrix embed(const Model& model, const TokenizedText& text) {
  Matrix h(static_cast<Eigen::Index>(text.length()), model.config.dim);
  for (std::size_t i = 0; i < text.length(); ++i) {
    const auto id = text.token_ids[i];
    const auto row = static_cast<Eigen::Index>(i);
    if (id == kMaskTokenId) {
      h.row(row).setZero();
    } else if (id >= model.config.vocab_size) {
      throw LookupError("record " + std::to_string(text.id) + ": token id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(model.config.vocab_size));
    } else {
      h.row(row) = model.embedding.row(id);
    }
  }
  return h;
}

ForwardCache forward_embedded(const Model& model, const Matrix& embedded) {
  if (embedded.rows() == 0) throw ShapeError("empty input");
  if (embedded.cols() != model.config.dim) throw ShapeError("input width differs from model dim");
  ForwardCache fc;
  fc.embedded = embedded;
  fc.hidden = ((embedded * model.hidden_weight.transpose()).rowwise() + model.hidden_bias.transpose())
                  .array()
                  .tanh()
                  .matrix();
  fc.pooled = fc.hidden.colwise().mean().transpose();
  fc.scores = model.head_weight * fc.pooled + model.head_bias;
  fc.prediction = model.config.head == HeadKind::Regression ? fc.scores : fc.scores.unaryExpr(&sigmoid);
  return fc;
}

Vector forward(const Model& model, const TokenizedText& text) {
  return forward_embedded(model, embed(model, text)).prediction;
}

double output_score(const Model& model, const Matrix& embedded, std::size_t target) {
  if (target >= model.output_width()) throw RangeError("target " + std::to_string(target) + " outside head");
  return forward_embedded(model, embedded).scores(static_cast<Eigen::Index>(target));
}

Matrix score_gradient(const Model& model, const Matrix& embedded, std::size_t target) {
  if (target >= model.output_width()) throw RangeError("target " + std::to_string(target) + " outside head");
  const auto fc = forward_embedded(model, embedded);
  const auto t = static_cast<double>(embedded.rows());
  const RowVector dpool = model.head_weight.row(static_cast<Eigen::Index>(target)) / t;
  const Matrix da = (1.0 - fc.hidden.array().square()).rowwise() * dpool.array();
  return da * model.hidden_weight;
}

GradientMatrix input_gradient(const Model& model, const TokenizedText& text, std::size_t target) {
  return GradientMatrix{score_gradient(model, embed(model, text), target), target};
}

Matrix encode_layer(const Model& model, const TokenizedText& text, int layer) {
  switch (layer) {
    case 0: return embed(model, text);
    case 1: return forward_embedded(model, embed(model, text)).hidden;
    default: throw RangeError("layer " + std::to_string(layer) + " not in {0, 1}");
  }
}

double evaluate_loss(const Model& model, std::span<const TokenizedText> corpus) {
  if (corpus.empty()) return 0.0;
  double total = 0.0;
  for (const auto& text : corpus) {
    const auto fc = forward_embedded(model, embed(model, text));
    total += sample_loss(model, fc.scores, target_vector(model, text), nullptr);
  }
  return total / static_cast<double>(corpus.size());
}

TrainResult train(Model model, std::span<const TokenizedText> corpus, const TrainOptions& options) {
  if (corpus.empty()) throw DataError("empty training corpus");
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Vector> targets;
  targets.reserve(corpus.size());
  for (const auto& text : corpus) targets.push_back(target_vector(model, text));

  TrainResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Gradients grads(model);
  Adam adam(model, options.learning_rate);
  Vector dscores;

  for (std::uint32_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const auto stop = std::min(order.size(), start + options.batch_size);
      grads.clear();
      for (std::size_t b = start; b < stop; ++b) {
        const auto& text = corpus[order[b]];
        const auto fc = forward_embedded(model, embed(model, text));
        epoch_loss += sample_loss(model, fc.scores, targets[order[b]], &dscores);
        dscores /= static_cast<double>(stop - start);
        accumulate(model, text, fc, dscores, grads);
      }
      if (!std::isfinite(epoch_loss)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
      }
      adam.step(model, grads);
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.model = std::move(model);
  return result;
}

void save_model(const Model& model, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  const auto& c = model.config;
  detail::put_magic(out, kModelMagic);
  detail::put_u32(out, c.vocab_size);
  detail::put_u32(out, c.dim);
  detail::put_u32(out, c.hidden_width);
  detail::put_u32(out, static_cast<std::uint32_t>(c.head));
  detail::put_u32(out, c.outputs);
  detail::put_u32(out, static_cast<std::uint32_t>(c.seed & 0xFFFFFFFFU));
  detail::put_u32(out, static_cast<std::uint32_t>(c.seed >> 32));
  put_params(out, model.embedding);
  put_params(out, model.hidden_weight);
  put_params(out, model.hidden_bias);
  put_params(out, model.head_weight);
  put_params(out, model.head_bias);
  if (!out) throw IoError("write failed for " + file.string());
}

Model load_model(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  detail::expect_magic(in, kModelMagic, file.filename().string());
  ModelConfig c;
  c.vocab_size = detail::get_u32(in, "model config");
  c.dim = detail::get_u32(in, "model config");
  c.hidden_width = detail::get_u32(in, "model config");
  const auto head = detail::get_u32(in, "model config");
  if (head > static_cast<std::uint32_t>(HeadKind::Multilabel)) throw FormatError("model.bin: unknown head kind");
  c.head = static_cast<HeadKind>(head);
  c.outputs = detail::get_u32(in, "model config");
  const std::uint64_t lo = detail::get_u32(in, "model config");
  const std::uint64_t hi = detail::get_u32(in, "model config");
  c.seed = lo | (hi << 32);
  validate(c);
  Model m;
  m.config = c;
  m.embedding.resize(c.vocab_size, c.dim);
  m.hidden_weight.resize(c.hidden_width, c.dim);
  m.hidden_bias.resize(c.hidden_width);
  m.head_weight.resize(c.outputs, c.hidden_width);
  m.head_bias.resize(c.outputs);
  get_params(in, m.embedding);
  get_params(in, m.hidden_weight);
  get_params(in, m.hidden_bias);
  get_params(in, m.head_weight);
  get_params(in, m.head_bias);
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptBundleError("model.bin: trailing bytes");
  return m;
}

Bundle encode_bundle(const Model& model, std::vector<TokenizedText> records, std::vector<std::string> vocab) {
  if (model.config.hidden_width != model.config.dim) {
    throw ConfigError("bundle export needs hidden_width == dim so both layers share one width");
  }
  Bundle b;
  b.vocab = std::move(vocab);
  b.dim = model.config.dim;
  b.records = std::move(records);
  Layer l0{"0", {}, std::nullopt};
  Layer l1{"1", {}, std::nullopt};
  for (const auto& r : b.records) {
    // Narrow to the f32 file precision so the in-memory bundle equals its
    // on-disk form.
    auto h0 = embed(model, r);
    auto h1 = forward_embedded(model, h0).hidden;
    l0.embeddings.push_back(round_to_float(h0));
    l1.embeddings.push_back(round_to_float(h1));
  }
  b.layers.push_back(std::move(l0));
  b.layers.push_back(std::move(l1));
  sort_records(b);
  validate_bundle(b);
  return b;
}

}  // namespace lafa
