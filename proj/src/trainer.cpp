#include "cmle/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cmle/rng.hpp"

namespace cmle::train {

namespace {

// Independent rng streams derived from one seed.
enum Stream : std::uint64_t {
  kTrainData = 1,
  kValidationData = 2,
  kTestData = 3,  // + index of the test set
  kInterventionalTrain = 10,
  kInterventionalHeldout = 11,
  kInit = 100,
  kBatching = 101,
  kNoise = 102,
  kClassifierInit = 103,
  kClassifierBatching = 104,
};

constexpr std::size_t kEvalChunk = 1024;
constexpr std::size_t kTraceTail = 20;

std::vector<double> tail(const std::vector<double>& trace) {
  const std::size_t n = std::min(trace.size(), kTraceTail);
  return {trace.end() - static_cast<long>(n), trace.end()};
}

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
}

// Consecutive slices of a shuffled permutation; a trailing slice of one
// example is folded into the previous batch.
std::vector<std::span<const std::size_t>> batches(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::span<const std::size_t>> out;
  std::size_t start = 0;
  while (start < order.size()) {
    std::size_t end = std::min(order.size(), start + size);
    if (order.size() - end == 1) end = order.size();
    out.emplace_back(order.data() + start, end - start);
    start = end;
  }
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

scm::Dataset load_or_sample(const std::optional<std::string>& path, scm::Variant variant, std::size_t n,
                            std::uint64_t seed) {
  if (path) return scm::read_dataset(*path, variant);
  return scm::sample_dataset({n, seed, variant});
}

std::vector<scm::Example> plain_records(scm::Dataset d, std::string_view role) {
  if (d.examples.empty()) throw std::invalid_argument(std::string(role) + " data must hold plain (x, t, y) records");
  return std::move(d.examples);
}

void set_output_affine(nn::OutcomeModel& model, const std::vector<scm::Example>& train) {
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (const auto& e : train) mean += e.y[c];
    mean /= static_cast<double>(train.size());
    double var = 0.0;
    for (const auto& e : train) var += (e.y[c] - mean) * (e.y[c] - mean);
    var /= static_cast<double>(train.size());
    model.out_shift[c] = mean;
    model.out_scale[c] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
}

std::vector<Tensor> collect(const ad::Gradients& grads, std::span<const Var> a, std::span<const Var> b = {}) {
  std::vector<Tensor> out;
  out.reserve(a.size() + b.size());
  for (Var v : a) out.push_back(grads[v]);
  for (Var v : b) out.push_back(grads[v]);
  return out;
}

struct ClassifierBatch {
  Tensor x, y;
  std::vector<int> t;
};

ClassifierBatch classifier_batch(const std::vector<scm::Example>& data, std::span<const std::size_t> rows) {
  const std::size_t d = data.front().x.size();
  ClassifierBatch b{Tensor(rows.size(), d), Tensor(rows.size(), 2), {}};
  b.t.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = data[rows[i]];
    std::copy(e.x.begin(), e.x.end(), b.x.row_span(i).begin());
    b.y(i, 0) = e.y[0];
    b.y(i, 1) = e.y[1];
    b.t.push_back(e.t);
  }
  return b;
}

double accuracy(const nn::Classifier& c, const std::vector<scm::Example>& data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  const auto all = iota(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, data.size() - start);
    auto b = classifier_batch(data, std::span(all).subspan(start, n));
    Tensor in(n, b.x.cols() + 2);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(b.x.row_span(i).begin(), b.x.row_span(i).end(), in.row_span(i).begin());
      in(i, b.x.cols()) = b.y(i, 0);
      in(i, b.x.cols() + 1) = b.y(i, 1);
    }
    const Tensor logits = c.net.apply(in);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.row_span(i);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      hits += static_cast<int>(best) + 1 == b.t[i];
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

std::string_view to_string(TestSet s) {
  switch (s) {
    case TestSet::observational: return "observational";
    case TestSet::counterfactual: return "counterfactual";
    case TestSet::ood1: return "ood1";
    case TestSet::ood2: return "ood2";
    default: return "ood3";
  }
}

scm::Variant variant_of(TestSet s) {
  switch (s) {
    case TestSet::observational: return scm::Variant::observational;
    case TestSet::counterfactual: return scm::Variant::counterfactual;
    case TestSet::ood1: return scm::Variant::ood1;
    case TestSet::ood2: return scm::Variant::ood2;
    default: return scm::Variant::ood3;
  }
}

void TrainConfig::validate() const {
  objective.validate();
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be a positive number");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  if (n_train < 2 || n_val < 1 || n_test < 1) throw std::invalid_argument("dataset sizes too small");
  if (architecture.encoder.size() < 2 || architecture.encoder.front() != scm::kFeatures)
    throw std::invalid_argument("encoder must start at the feature dimension");
}

AdamState::AdamState(std::span<const nn::ParamRef> params) {
  for (const auto& p : params) {
    m.emplace_back(p.tensor->rows(), p.tensor->cols());
    v.emplace_back(p.tensor->rows(), p.tensor->cols());
  }
}

void adam_step(AdamState& state, std::span<const nn::ParamRef> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(*params[i].tensor) || !state.m[i].same_shape(grads[i]))
      throw std::invalid_argument("adam_step: shape mismatch for " + params[i].name);
    if (!grads[i].all_finite()) throw DivergenceError("non-finite gradient in " + params[i].name, {});
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor->values();
    auto g = grads[i].values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = AdamState::beta1 * m[k] + (1.0 - AdamState::beta1) * g[k];
      v[k] = AdamState::beta2 * v[k] + (1.0 - AdamState::beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + AdamState::eps);
    }
  }
}

RunData prepare_data(const TrainConfig& config) {
  const std::uint64_t base = config.resample_data ? config.seed : config.data_seed;
  const auto& paths = config.datasets;
  RunData d;
  d.train = plain_records(
      load_or_sample(paths.train, scm::Variant::observational, config.n_train, mix_seed(base, kTrainData)), "training");
  d.validation = plain_records(load_or_sample(paths.validation, scm::Variant::observational, config.n_val,
                                              mix_seed(base, kValidationData)),
                               "validation");
  for (std::size_t i = 0; i < kTestSets.size(); ++i) {
    d.test[i] = load_or_sample(paths.test[i], variant_of(kTestSets[i]), config.n_test, mix_seed(base, kTestData + i));
    if (d.test[i].size() == 0) throw std::invalid_argument(std::string(to_string(kTestSets[i])) + " test set is empty");
  }
  if (d.train.size() < 2) throw std::invalid_argument("training set needs at least two records");
  return d;
}

ClassifierResult pretrain_classifier(const TrainConfig& config, obj::PhiSource source, const RunData& data) {
  const std::uint64_t base = config.resample_data ? config.seed : config.data_seed;
  const std::vector<scm::Example>* train = &data.train;
  const std::vector<scm::Example>* heldout = &data.validation;
  std::vector<scm::Example> int_train, int_heldout;
  if (source == obj::PhiSource::interventional) {
    int_train = scm::sample_dataset({config.n_train, mix_seed(base, kInterventionalTrain), scm::Variant::interventional})
                    .examples;
    int_heldout =
        scm::sample_dataset({config.n_val, mix_seed(base, kInterventionalHeldout), scm::Variant::interventional})
            .examples;
    train = &int_train;
    heldout = &int_heldout;
  }
  const std::uint64_t offset = source == obj::PhiSource::interventional ? 1000 : 0;
  Rng init(mix_seed(config.seed, kClassifierInit + offset));
  Rng order_rng(mix_seed(config.seed, kClassifierBatching + offset));

  ClassifierResult out{nn::Classifier::for_benchmark(config.architecture, init), 0.0, train->size()};
  auto params = out.classifier.parameters();
  AdamState adam(params);
  auto order = iota(train->size());
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < config.classifier_epochs; ++epoch) {
    shuffle(order, order_rng);
    for (auto rows : batches(order, config.batch_size)) {
      auto b = classifier_batch(*train, rows);
      Tape tape;
      auto bc = nn::bind(tape, out.classifier, true);
      Var lp = nn::pick_log_prob(nn::classifier_log_probs(bc, tape.constant(b.x), tape.constant(b.y)), b.t);
      Var loss = ad::scale(ad::mean(lp), -1.0);
      const double value = loss.value().item();
      trace.push_back(value);
      if (!std::isfinite(value)) throw DivergenceError("classifier loss is not finite", tail(trace));
      adam_step(adam, params, collect(tape.backward(loss), bc.net), config.learning_rate);
    }
  }
  out.heldout_accuracy = accuracy(out.classifier, *heldout);
  return out;
}

RunResult train_run(const TrainConfig& config, const RunData& data, const nn::Classifier* classifier) {
  config.validate();
  const auto& cfg = config.objective;
  if (cfg.kind == obj::Kind::explicit_ && classifier == nullptr)
    throw std::invalid_argument("train_run: the explicit objective needs a pretrained classifier");
  if (data.train.size() < 2 || data.validation.empty())
    throw std::invalid_argument("train_run: training and validation sets must be non-empty");

  Rng init(mix_seed(config.seed, kInit));
  Rng order_rng(mix_seed(config.seed, kBatching));
  Rng noise_rng(mix_seed(config.seed, kNoise));

  RunResult result;
  result.seed = config.seed;
  result.config = config;
  nn::OutcomeModel model(config.architecture, init);
  set_output_affine(model, data.train);
  auto params = model.parameters();
  AdamState adam(params);

  nn::OutcomeModel best = model;
  result.best_validation_mse = evaluate_mse(model, data.validation);
  auto order = iota(data.train.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order, order_rng);
    for (auto rows : batches(order, config.batch_size)) {
      const obj::Batch batch = obj::make_batch(data.train, rows);
      Tape tape;
      auto bound = nn::bind(tape, model);
      obj::LossParts parts;
      switch (cfg.kind) {
        case obj::Kind::mle: parts = obj::mle_batch_loss(bound, batch); break;
        case obj::Kind::implicit: parts = obj::implicit_cmle_batch_loss(bound, batch, cfg); break;
        case obj::Kind::explicit_: {
          const auto noise = obj::sample_explicit_noise(batch.t, noise_rng);
          parts = obj::explicit_cmle_batch_loss(bound, nn::bind(tape, *classifier, false), batch, cfg, noise);
          break;
        }
      }
      const double value = parts.total.value().item();
      result.loss_trace.push_back(value);
      result.sinkhorn_floor_hits += parts.sinkhorn_floor_hits;
      std::ostringstream where;
      where << "epoch " << epoch << ", step " << result.loss_trace.size();
      if (!std::isfinite(value))
        throw DivergenceError("training loss is not finite at " + where.str(), tail(result.loss_trace));
      try {
        adam_step(adam, params, collect(tape.backward(parts.total), bound.encoder, bound.head),
                  config.learning_rate);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at " + where.str(), tail(result.loss_trace));
      }
    }
    const double val = evaluate_mse(model, data.validation);
    if (!std::isfinite(val))
      throw DivergenceError("validation MSE is not finite after epoch " + std::to_string(epoch),
                            tail(result.loss_trace));
    if (val < result.best_validation_mse) {
      result.best_validation_mse = val;
      result.best_epoch = epoch;
      best = model;
    }
  }

  for (std::size_t i = 0; i < kTestSets.size(); ++i) result.mse[i] = evaluate_mse(best, data.test[i]);
  result.model = std::move(best);
  return result;
}

double evaluate_mse(const nn::OutcomeModel& model, const std::vector<scm::Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate_mse: empty dataset");
  double total = 0.0;
  const std::size_t d = examples.front().x.size();
  for (std::size_t start = 0; start < examples.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, examples.size() - start);
    Tensor x(n, d);
    std::vector<int> t(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = examples[start + i];
      std::copy(e.x.begin(), e.x.end(), x.row_span(i).begin());
      t[i] = e.t;
    }
    const Tensor mu = nn::predict_batch(model, x, t);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& y = examples[start + i].y;
      total += (y[0] - mu(i, 0)) * (y[0] - mu(i, 0)) + (y[1] - mu(i, 1)) * (y[1] - mu(i, 1));
    }
  }
  return total / static_cast<double>(examples.size());
}

double evaluate_mse(const nn::OutcomeModel& model, const scm::Dataset& dataset) {
  if (!dataset.toy.empty()) throw std::invalid_argument("evaluate_mse: discrete toy records have no MSE");
  if (!dataset.examples.empty()) return evaluate_mse(model, dataset.examples);
  const auto& cf = dataset.counterfactuals;
  if (cf.empty()) throw std::invalid_argument("evaluate_mse: empty dataset");
  // Expand to (record, non-factual t) pairs and reuse the batched path.
  std::vector<scm::Example> pairs;
  pairs.reserve(cf.size() * (scm::kTreatments - 1));
  for (const auto& r : cf)
    for (int t = 1; t <= static_cast<int>(scm::kTreatments); ++t)
      if (t != r.factual_t) pairs.push_back({r.x, t, r.outcome(t)});
  return evaluate_mse(model, pairs);
}

double evaluate_mse(const obj::Predictor& predict, const scm::Dataset& dataset) {
  if (!dataset.toy.empty()) throw std::invalid_argument("evaluate_mse: discrete toy records have no MSE");
  double total = 0.0;
  std::size_t count = 0;
  auto add = [&](std::span<const double> x, int t, const scm::Outcome& y) {
    const auto mu = predict(x, t);
    total += (y[0] - mu[0]) * (y[0] - mu[0]) + (y[1] - mu[1]) * (y[1] - mu[1]);
    ++count;
  };
  for (const auto& e : dataset.examples) add(e.x, e.t, e.y);
  for (const auto& r : dataset.counterfactuals)
    for (int t = 1; t <= static_cast<int>(scm::kTreatments); ++t)
      if (t != r.factual_t) add(r.x, t, r.outcome(t));
  if (count == 0) throw std::invalid_argument("evaluate_mse: empty dataset");
  return total / static_cast<double>(count);
}

}  // namespace cmle::train
