#include "cmle/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cmle/rng.hpp"

namespace cmle::obj {

namespace {

template <class E, std::size_t N>
E parse_named(std::string_view s, const std::array<E, N>& values, const char* what) {
  for (E v : values) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Kind v) {
  switch (v) {
    case Kind::mle: return "mle";
    case Kind::implicit: return "implicit";
    case Kind::explicit_: return "explicit";
  }
  return "unknown";
}

std::string_view to_string(Estimator v) {
  switch (v) {
    case Estimator::reparam: return "reparam";
    case Estimator::gumbel: return "gumbel";
    case Estimator::reinforce: return "reinforce";
  }
  return "unknown";
}

std::string_view to_string(PhiSource v) {
  return v == PhiSource::observational ? "observational" : "interventional";
}

std::string_view to_string(WassMarginals v) { return v == WassMarginals::batch ? "batch" : "global"; }

Kind parse_kind(std::string_view s) {
  return parse_named(s, std::array{Kind::mle, Kind::implicit, Kind::explicit_}, "objective");
}
Estimator parse_estimator(std::string_view s) {
  return parse_named(s, std::array{Estimator::reparam, Estimator::gumbel, Estimator::reinforce}, "estimator");
}
PhiSource parse_phi_source(std::string_view s) {
  return parse_named(s, std::array{PhiSource::observational, PhiSource::interventional}, "phi source");
}
WassMarginals parse_wass_marginals(std::string_view s) {
  return parse_named(s, std::array{WassMarginals::batch, WassMarginals::global}, "wass marginals");
}

void ObjectiveConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be a finite value >= 0");
  if (!(gumbel_tau > 0.0) || !std::isfinite(gumbel_tau)) throw std::invalid_argument("gumbel_tau must be > 0");
  if (kind == Kind::mle && alpha != 0.0) throw std::invalid_argument("alpha has no meaning for the mle objective");
}

std::array<double, scm::kTreatments> Batch::shares(WassMarginals marginals) const {
  std::array<double, scm::kTreatments> p{};
  const bool global = marginals == WassMarginals::global;
  const double n = static_cast<double>(global ? dataset_size : size());
  if (n == 0.0) throw std::invalid_argument("Batch::shares: no examples");
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = static_cast<double>(global ? dataset_counts[j] : counts[j]) / n;
  return p;
}

Batch make_batch(const std::vector<scm::Example>& data, std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.x = Tensor(rows.size(), scm::kFeatures);
  b.y = Tensor(rows.size(), scm::kOutcomeDim);
  b.t.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = data.at(rows[i]);
    if (e.x.size() != scm::kFeatures) throw std::invalid_argument("make_batch: example with wrong feature count");
    std::copy(e.x.begin(), e.x.end(), b.x.row_span(i).begin());
    b.y(i, 0) = e.y[0];
    b.y(i, 1) = e.y[1];
    b.t.push_back(e.t);
    ++b.counts.at(static_cast<std::size_t>(e.t - 1));
  }
  for (const auto& e : data) ++b.dataset_counts.at(static_cast<std::size_t>(e.t - 1));
  b.dataset_size = data.size();
  return b;
}

namespace {

void require_nonempty(const Batch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("objective: empty batch");
  if (batch.x.rows() != batch.size() || batch.y.rows() != batch.size()) {
    throw std::invalid_argument("objective: batch tensors disagree on size");
  }
}

}  // namespace

LossParts mle_batch_loss(const nn::BoundOutcome& model, const Batch& batch) {
  require_nonempty(batch);
  Tape& tape = *model.tape;
  Var mu = nn::outcome_forward(model, tape.constant(batch.x), batch.t);
  Var loss = ad::mean(nn::squared_error_rows(mu, tape.constant(batch.y)));
  LossParts out{loss, loss.value().item(), 0.0, 0};
  return out;
}

LossParts implicit_cmle_batch_loss(const nn::BoundOutcome& model, const Batch& batch, const ObjectiveConfig& config,
                                   FrozenPlans* frozen) {
  require_nonempty(batch);
  Tape& tape = *model.tape;
  const std::size_t n = batch.size();
  const auto p = batch.shares(config.wass_marginals);

  Var r = nn::encode(model, tape.constant(batch.x));
  Var mu = nn::head_forward(model, r, batch.t);
  Var losses = nn::squared_error_rows(mu, tape.constant(batch.y));
  Tensor w(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double share = p[static_cast<std::size_t>(batch.t[i] - 1)];
    if (!(share > 0.0)) throw std::invalid_argument("implicit objective: treatment with zero share in batch");
    w(i, 0) = 1.0 / share;
  }
  Var factual = ad::scale(ad::sum(ad::mul(losses, tape.constant(w))), 1.0 / static_cast<double>(n));
  LossParts out{factual, factual.value().item(), 0.0, 0};
  if (config.alpha == 0.0) return out;

  std::optional<Var> penalty;
  for (int j = 1; j <= scm::kTreatments; ++j) {
    std::vector<std::size_t> group, rest;
    for (std::size_t i = 0; i < n; ++i) (batch.t[i] == j ? group : rest).push_back(i);
    if (group.empty() || rest.empty()) continue;
    const double pj = p[static_cast<std::size_t>(j - 1)];
    Var a = ad::select_rows(r, group);
    Var b = ad::select_rows(r, rest);
    std::optional<ot::TransportPlan> local;
    std::optional<ot::TransportPlan>& plan = frozen ? frozen->plans[static_cast<std::size_t>(j - 1)] : local;
    if (!plan) {
      const std::vector<double> ma(group.size(), pj), mb(rest.size(), 1.0 - pj);
      plan = ot::sinkhorn_plan(ot::pairwise_l2(a.value(), b.value()), ma, mb);
    }
    out.sinkhorn_floor_hits += plan->floor_hits;
    Var term = ad::scale(ot::wass_loss_term(*plan, a, b), 1.0 - pj);
    penalty = penalty ? ad::add(*penalty, term) : term;
  }
  if (penalty) {
    out.penalty = penalty->value().item();
    out.total = ad::add(factual, ad::scale(*penalty, config.alpha));
  }
  return out;
}

int sample_kt(int t, int m, Rng& rng) {
  if (m < 2) throw std::invalid_argument("sample_kt: need at least two treatments");
  if (t < 1 || t > m) throw std::invalid_argument("sample_kt: t outside 1..m");
  const double u = rng.uniform();
  int idx = static_cast<int>(u * static_cast<double>(m - 1));
  idx = std::min(idx, m - 2);
  const int k = idx + 1;
  return k >= t ? k + 1 : k;
}

ExplicitNoise sample_explicit_noise(std::span<const int> t, Rng& rng) {
  ExplicitNoise noise;
  noise.k.reserve(t.size());
  noise.eps = Tensor(t.size(), scm::kOutcomeDim);
  for (std::size_t i = 0; i < t.size(); ++i) {
    noise.k.push_back(sample_kt(t[i], scm::kTreatments, rng));
    noise.eps(i, 0) = rng.normal();
    noise.eps(i, 1) = rng.normal();
  }
  return noise;
}

Var reparam_sample(Var mu, const Tensor& eps) { return ad::add(mu, mu.tape->constant(eps)); }

std::array<double, 2> reparam_sample(std::array<double, 2> mu, Rng& rng) {
  mu[0] += rng.normal();
  mu[1] += rng.normal();
  return mu;
}

LossParts explicit_cmle_batch_loss(const nn::BoundOutcome& model, const nn::BoundClassifier& classifier,
                                   const Batch& batch, const ObjectiveConfig& config, const ExplicitNoise& noise) {
  require_nonempty(batch);
  if (config.alpha == 0.0) return mle_batch_loss(model, batch);
  const std::size_t n = batch.size();
  if (noise.k.size() != n || noise.eps.rows() != n) {
    throw std::invalid_argument("explicit objective: noise does not match the batch");
  }
  Tape& tape = *model.tape;
  Var x = tape.constant(batch.x);
  Var r = nn::encode(model, x);
  Var losses = nn::squared_error_rows(nn::head_forward(model, r, batch.t), tape.constant(batch.y));
  Var y_cf = reparam_sample(nn::head_forward(model, r, noise.k), noise.eps);
  Var j = ad::scale(nn::pick_log_prob(nn::classifier_log_probs(classifier, x, y_cf), noise.k), -1.0);
  if (!j.value().all_finite()) throw std::runtime_error("explicit objective: classifier produced a non-finite loss");
  const double inv_n = 1.0 / static_cast<double>(n);
  Var total = ad::scale(ad::sum(ad::add(losses, ad::scale(j, config.alpha))), inv_n);
  LossParts out{total, 0.0, 0.0, 0};
  for (double v : losses.value().values()) out.factual += v;
  for (double v : j.value().values()) out.penalty += v;
  out.factual *= inv_n;
  out.penalty *= inv_n;
  return out;
}

std::vector<double> gumbel_softmax(std::span<const double> pi, double tau, Rng& rng, std::size_t* floor_hits) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  if (pi.empty()) throw std::invalid_argument("gumbel_softmax: empty probability vector");
  std::vector<double> z(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (!(pi[i] >= 0.0) || !std::isfinite(pi[i])) throw std::invalid_argument("gumbel_softmax: invalid probability");
    double p = pi[i];
    if (p < 1e-12) {
      p = 1e-12;
      if (floor_hits) ++*floor_hits;
    }
    z[i] = (std::log(p) + rng.gumbel()) / tau;
  }
  const double top = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - top);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

Var gumbel_softmax(Var log_pi, double tau, const Tensor& gumbel_noise) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  return ad::softmax(ad::scale(ad::add(log_pi, log_pi.tape->constant(gumbel_noise)), 1.0 / tau));
}

namespace {

int inverse_cdf(std::span<const double> p, double u) {
  double c = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c += p[i];
    if (u < c) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace

ReinforceEstimate reinforce_grad(const LogitsFunction& logits, std::span<const Tensor> params,
                                 const std::function<double(int)>& J, Rng& rng) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& p : params) vars.push_back(tape.parameter(p));
  Var lp = ad::log_softmax(logits(tape, vars));
  if (lp.value().rows() != 1) throw std::invalid_argument("reinforce_grad: logits must be a single row");
  std::vector<double> probs(lp.value().cols());
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(lp.value()(0, i));
  ReinforceEstimate est;
  est.y = inverse_cdf(probs, rng.uniform());
  est.weight = J(est.y);
  Tensor pick(1, probs.size());
  pick(0, static_cast<std::size_t>(est.y)) = est.weight;
  auto grads = tape.backward(ad::sum(ad::mul(lp, tape.constant(pick))));
  for (const Var& v : vars) est.grad.push_back(grads[v]);
  return est;
}

ReinforceEstimate reinforce_grad(const nn::ToyOutcomeModel& model, const nn::Classifier& classifier,
                                 std::span<const double> x, int t, int k, Rng& rng) {
  if (k == t) throw std::invalid_argument("reinforce_grad: k must differ from the factual treatment");
  const Tensor xrow(1, x.size(), {x.begin(), x.end()});
  const int ks[1] = {k};
  LogitsFunction f = [&](Tape& tape, std::span<const Var> vars) {
    return nn::toy_logits(model, vars, tape.constant(xrow), ks);
  };
  auto J = [&](int y) {
    std::vector<double> z(model.classes(), 0.0);
    z[static_cast<std::size_t>(y)] = 1.0;
    return -nn::classifier_logprob(classifier, x, z, k);
  };
  return reinforce_grad(f, model.net.params(), J, rng);
}

ToyNoise sample_toy_noise(std::span<const int> t, std::size_t classes, Rng& rng) {
  ToyNoise noise;
  noise.gumbel = Tensor(t.size(), classes);
  for (std::size_t i = 0; i < t.size(); ++i) {
    noise.k.push_back(sample_kt(t[i], scm::kToyTreatments, rng));
    for (std::size_t c = 0; c < classes; ++c) noise.gumbel(i, c) = rng.gumbel();
    noise.uniforms.push_back(rng.uniform());
  }
  return noise;
}

LossParts toy_explicit_batch_loss(const nn::ToyOutcomeModel& model, std::span<const Var> vars,
                                  const nn::BoundClassifier& classifier, const ToyBatch& batch,
                                  const ObjectiveConfig& config, const ToyNoise& noise) {
  const std::size_t n = batch.t.size();
  if (n == 0) throw std::invalid_argument("toy objective: empty batch");
  if (batch.y.size() != n || batch.x.rows() != n || noise.k.size() != n) {
    throw std::invalid_argument("toy objective: batch and noise sizes disagree");
  }
  Tape& tape = *vars.front().tape;
  Var x = tape.constant(batch.x);
  std::vector<int> y1(batch.y.begin(), batch.y.end());
  for (int& v : y1) ++v;
  Var nll = ad::scale(nn::pick_log_prob(ad::log_softmax(nn::toy_logits(model, vars, x, batch.t)), y1), -1.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  Var factual = ad::scale(ad::sum(nll), inv_n);
  LossParts out{factual, factual.value().item(), 0.0, 0};
  if (config.alpha == 0.0) return out;

  Var lp_k = ad::log_softmax(nn::toy_logits(model, vars, x, noise.k));
  switch (config.estimator) {
    case Estimator::gumbel: {
      Var z = gumbel_softmax(lp_k, config.gumbel_tau, noise.gumbel);
      Var j = ad::scale(nn::pick_log_prob(nn::classifier_log_probs(classifier, x, z), noise.k), -1.0);
      out.penalty = ad::sum(j).value().item() * inv_n;
      out.total = ad::add(factual, ad::scale(ad::sum(j), config.alpha * inv_n));
      return out;
    }
    case Estimator::reinforce: {
      const std::size_t classes = lp_k.value().cols();
      Tensor draws(n, classes);
      std::vector<double> probs(classes);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < classes; ++c) probs[c] = std::exp(lp_k.value()(i, c));
        draws(i, static_cast<std::size_t>(inverse_cdf(probs, noise.uniforms.at(i)))) = 1.0;
      }
      Var j = ad::scale(nn::pick_log_prob(nn::classifier_log_probs(classifier, x, tape.constant(draws)), noise.k), -1.0);
      Tensor weights(n, classes);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < classes; ++c) weights(i, c) = draws(i, c) * j.value()(i, 0);
      out.penalty = ad::sum(j).value().item() * inv_n;
      Var surrogate = ad::sum(ad::mul(lp_k, tape.constant(weights)));
      out.total = ad::add(factual, ad::scale(surrogate, config.alpha * inv_n));
      return out;
    }
    case Estimator::reparam:
      break;
  }
  throw std::invalid_argument("toy objective: the discrete pipeline needs the gumbel or reinforce estimator");
}

BoundConstants bound_constants(std::span<const double> p_t, double delta1, double delta2, int m) {
  if (m < 2) throw std::invalid_argument("bound_constants: m must be at least 2");
  if (!(0.0 < delta1 && delta1 < delta2 && delta2 < 1.0)) {
    throw std::invalid_argument("bound_constants: need 0 < delta1 < delta2 < 1");
  }
  if (p_t.size() != static_cast<std::size_t>(m)) throw std::invalid_argument("bound_constants: p(t) must have m entries");
  BoundConstants c{{}, 0.0, delta1, delta2, m};
  const double md = static_cast<double>(m);
  for (double p : p_t) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("bound_constants: p(t) entries must lie in (0, 1)");
    c.eta.push_back(1.0 + (1.0 / p) * (1.0 - 1.0 / md));
  }
  c.mu = (md * delta2 - md * delta1 - md + 1.0) * std::log(md);
  return c;
}

namespace {

using LossTable = std::vector<std::array<double, scm::kTreatments>>;

LossTable loss_table(const Predictor& predict, const std::vector<scm::CounterfactualExample>& data) {
  LossTable table(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int t = 1; t <= scm::kTreatments; ++t) {
      const auto mu = predict(data[i].x, t);
      const auto& y = data[i].outcome(t);
      const double d0 = y[0] - mu[0], d1 = y[1] - mu[1];
      table[i][static_cast<std::size_t>(t - 1)] = d0 * d0 + d1 * d1;
    }
  }
  return table;
}

LossTable loss_table(const nn::OutcomeModel& model, const std::vector<scm::CounterfactualExample>& data) {
  LossTable table(data.size());
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t rows = std::min(kChunk, data.size() - start);
    Tensor x(rows, scm::kFeatures);
    for (std::size_t i = 0; i < rows; ++i) std::copy(data[start + i].x.begin(), data[start + i].x.end(), x.row_span(i).begin());
    for (int t = 1; t <= scm::kTreatments; ++t) {
      const std::vector<int> ts(rows, t);
      const Tensor mu = nn::predict_batch(model, x, ts);
      for (std::size_t i = 0; i < rows; ++i) {
        const auto& y = data[start + i].outcome(t);
        const double d0 = y[0] - mu(i, 0), d1 = y[1] - mu(i, 1);
        table[start + i][static_cast<std::size_t>(t - 1)] = d0 * d0 + d1 * d1;
      }
    }
  }
  return table;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

EpsilonEstimates estimates_from(const LossTable& table, const std::vector<scm::CounterfactualExample>& data) {
  std::array<MeanSe, scm::kTreatments> f{}, cf{};
  std::array<double, scm::kTreatments> f2{}, cf2{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t t = 0; t < scm::kTreatments; ++t) {
      const double l = table[i][t];
      auto& acc = static_cast<int>(t + 1) == data[i].factual_t ? f[t] : cf[t];
      auto& sq = static_cast<int>(t + 1) == data[i].factual_t ? f2[t] : cf2[t];
      acc.mean += l;
      sq += l * l;
      ++acc.n;
    }
  }
  EpsilonEstimates out;
  auto finish = [](MeanSe& a, double sq, std::optional<double>& value, double& se) {
    if (a.n == 0) return;
    const double n = static_cast<double>(a.n);
    const double mean = a.mean / n;
    value = mean;
    se = a.n > 1 ? std::sqrt(std::max(0.0, (sq - n * mean * mean) / (n - 1.0)) / n) : 0.0;
  };
  for (std::size_t t = 0; t < scm::kTreatments; ++t) {
    finish(f[t], f2[t], out.factual[t], out.factual_se[t]);
    finish(cf[t], cf2[t], out.counterfactual[t], out.counterfactual_se[t]);
  }
  return out;
}

DecompositionResult decompose(const LossTable& table, const std::vector<scm::CounterfactualExample>& data,
                              std::span<const double> p_t) {
  if (p_t.size() != static_cast<std::size_t>(scm::kTreatments)) {
    throw std::invalid_argument("decomposition_check: p(t) needs one entry per treatment");
  }
  if (data.size() < 2) throw std::invalid_argument("decomposition_check: need at least two records");
  const auto eps = estimates_from(table, data);
  std::array<double, scm::kTreatments> nf{};
  for (const auto& r : data) ++nf.at(static_cast<std::size_t>(r.factual_t - 1));
  const double n = static_cast<double>(data.size());

  DecompositionResult out;
  for (std::size_t t = 0; t < scm::kTreatments; ++t) {
    if (!eps.factual[t] || !eps.counterfactual[t]) {
      throw std::runtime_error("decomposition_check: treatment " + std::to_string(t + 1) +
                               " lacks factual or counterfactual records");
    }
    out.rhs += p_t[t] * *eps.factual[t] + (1.0 - p_t[t]) * *eps.counterfactual[t];
  }
  // Influence of each record on lhs - rhs, treating p_t as known.
  std::vector<double> lhs_terms(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double l : table[i]) lhs_terms[i] += l;
    out.lhs += lhs_terms[i];
  }
  out.lhs /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double infl = lhs_terms[i] - out.lhs;
    for (std::size_t t = 0; t < scm::kTreatments; ++t) {
      const double l = table[i][t];
      if (static_cast<int>(t + 1) == data[i].factual_t) {
        infl -= p_t[t] * (n / nf[t]) * (l - *eps.factual[t]);
      } else {
        infl -= (1.0 - p_t[t]) * (n / (n - nf[t])) * (l - *eps.counterfactual[t]);
      }
    }
    ss += infl * infl;
  }
  out.se = std::sqrt(ss / (n - 1.0) / n);
  const double diff = out.lhs - out.rhs;
  out.z = out.se > 0.0 ? diff / out.se : (diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff));
  return out;
}

}  // namespace

EpsilonEstimates epsilon_estimates(const Predictor& predict, const std::vector<scm::CounterfactualExample>& data) {
  return estimates_from(loss_table(predict, data), data);
}

EpsilonEstimates epsilon_estimates(const nn::OutcomeModel& model,
                                   const std::vector<scm::CounterfactualExample>& data) {
  return estimates_from(loss_table(model, data), data);
}

DecompositionResult decomposition_check(const Predictor& predict, const std::vector<scm::CounterfactualExample>& data,
                                        std::span<const double> p_t) {
  return decompose(loss_table(predict, data), data, p_t);
}

DecompositionResult decomposition_check(const nn::OutcomeModel& model,
                                        const std::vector<scm::CounterfactualExample>& data) {
  const auto p = scm::treatment_marginal();
  return decompose(loss_table(model, data), data, p);
}

}  // namespace cmle::obj
