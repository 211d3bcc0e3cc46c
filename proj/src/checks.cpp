#include "cmle/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "cmle/objectives.hpp"
#include "cmle/rng.hpp"
#include "cmle/sinkhorn.hpp"
#include "cmle/trainer.hpp"

namespace cmle::checks {

namespace {

using ad::Tape;
using ad::Tensor;
using ad::Var;

constexpr double kGradientTolerance = 1e-4;
constexpr double kStep = 1e-5;
constexpr double kSinkhornTolerance = 0.10;
constexpr double kMarginalTolerance = 1e-12;
constexpr double kSigmas = 3.0;

Assertion at_most(std::string name, double value, double bound, std::string detail = {}) {
  return {std::move(name), value <= bound, value, bound, std::move(detail)};
}

Tensor gaussian(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(r, c);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

nn::Architecture small_arch() {
  nn::Architecture a;
  a.encoder = {5, 4, 3};
  a.head_hidden = {4};
  a.classifier_hidden = {4};
  return a;
}

SuiteReport gradients(const CheckOptions& o) {
  SuiteReport rep{"gradients", {}};
  Rng rng(o.seed);
  nn::OutcomeModel model(small_arch(), rng);
  model.out_scale = {3.0, 0.5};
  model.out_shift = {1.0, -1.0};
  std::vector<Tensor> params;
  for (auto& r : model.parameters()) params.push_back(*r.tensor);
  const std::size_t ne = model.encoder.params().size();
  auto bind_from = [&](Tape& tape, std::span<const Var> p) {
    return nn::BoundOutcome{&model, &tape, {p.begin(), p.begin() + static_cast<long>(ne)},
                            {p.begin() + static_cast<long>(ne), p.end()}};
  };

  obj::Batch b;
  b.x = gaussian(4, 5, rng);
  b.y = gaussian(4, 2, rng);
  b.t = {1, 3, 2, 3};
  for (int t : b.t) ++b.counts[static_cast<std::size_t>(t - 1)];
  b.dataset_counts = b.counts;
  b.dataset_size = 4;

  ad::ScalarFunction mle = [&](Tape& tape, std::span<const Var> p) {
    return obj::mle_batch_loss(bind_from(tape, p), b).total;
  };
  rep.assertions.push_back(at_most("mle", ad::finite_diff_check(mle, params, kStep), kGradientTolerance));

  obj::ObjectiveConfig imp{obj::Kind::implicit, 0.8};
  obj::FrozenPlans plans;
  ad::ScalarFunction implicit = [&](Tape& tape, std::span<const Var> p) {
    return obj::implicit_cmle_batch_loss(bind_from(tape, p), b, imp, &plans).total;
  };
  rep.assertions.push_back(
      at_most("implicit (frozen plans)", ad::finite_diff_check(implicit, params, kStep), kGradientTolerance));

  obj::ObjectiveConfig exp{obj::Kind::explicit_, 0.7};
  nn::Classifier cls(7, {4}, 3, rng);
  const auto noise = obj::sample_explicit_noise(b.t, rng);
  ad::ScalarFunction expl = [&](Tape& tape, std::span<const Var> p) {
    return obj::explicit_cmle_batch_loss(bind_from(tape, p), nn::bind(tape, cls, false), b, exp, noise).total;
  };
  rep.assertions.push_back(
      at_most("explicit (frozen noise)", ad::finite_diff_check(expl, params, kStep), kGradientTolerance));

  auto toy = nn::ToyOutcomeModel::for_toy(rng);
  auto toy_cls = nn::toy_classifier(rng);
  obj::ToyBatch tb{gaussian(4, 10, rng), {1, 2, 2, 1}, {0, 7, 3, 5}};
  const auto toy_noise = obj::sample_toy_noise(tb.t, toy.classes(), rng);
  obj::ObjectiveConfig gs{obj::Kind::explicit_, 0.6};
  gs.estimator = obj::Estimator::gumbel;
  gs.gumbel_tau = 0.7;
  ad::ScalarFunction gumbel = [&](Tape& tape, std::span<const Var> p) {
    return obj::toy_explicit_batch_loss(toy, p, nn::bind(tape, toy_cls, false), tb, gs, toy_noise).total;
  };
  rep.assertions.push_back(at_most("toy explicit (gumbel-softmax, frozen noise)",
                                   ad::finite_diff_check(gumbel, toy.net.params(), kStep), kGradientTolerance));
  return rep;
}

SuiteReport sinkhorn(const CheckOptions& o) {
  if (o.max_size < 1 || o.max_size * o.max_size > 64)
    throw std::invalid_argument("sinkhorn suite: max-size must be in 1..8");
  SuiteReport rep{"sinkhorn", {}};
  Rng rng(o.seed);
  double worst_gap = 0.0, worst_column = 0.0;
  std::size_t failures = 0;
  std::string worst;
  for (std::size_t k = 0; k < o.instances; ++k) {
    const std::size_t n1 = 1 + rng.below(o.max_size), n2 = 1 + rng.below(o.max_size);
    const Tensor cost = ot::pairwise_l2(gaussian(n1, 8, rng), gaussian(n2, 8, rng));
    const std::vector<double> a(n1, 1.0 / static_cast<double>(n1)), b(n2, 1.0 / static_cast<double>(n2));
    const auto plan = ot::sinkhorn_plan(cost, a, b);
    const double exact = ot::exact_ot_oracle(cost, a, b);
    const double gap = std::abs(plan.cost - exact) / std::max(exact, 1e-6);
    if (gap > kSinkhornTolerance) ++failures;
    if (gap > worst_gap) {
      worst_gap = gap;
      worst = "instance " + std::to_string(k) + " (" + std::to_string(n1) + "x" + std::to_string(n2) + ")";
    }
    for (std::size_t j = 0; j < n2; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n1; ++i) col += plan.plan(i, j);
      worst_column = std::max(worst_column, std::abs(col - b[j]));
    }
  }
  rep.assertions.push_back(at_most("relative gap to exact OT", worst_gap, kSinkhornTolerance,
                                   std::to_string(failures) + " of " + std::to_string(o.instances) +
                                       " instances above bound; worst " + worst));
  rep.assertions.push_back(at_most("column marginal error", worst_column, kMarginalTolerance));
  return rep;
}

SuiteReport gumbel(const CheckOptions& o) {
  SuiteReport rep{"gumbel", {}};
  Rng rng(o.seed);
  const std::vector<double> pi{0.7, 0.2, 0.1};
  for (double tau : {0.1, 1.0, 5.0}) {
    std::array<std::size_t, 3> hits{};
    for (std::size_t i = 0; i < o.draws; ++i) {
      const auto z = obj::gumbel_softmax(pi, tau, rng);
      ++hits[static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin())];
    }
    const double n = static_cast<double>(o.draws);
    double worst = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double se = std::sqrt(pi[k] * (1.0 - pi[k]) / n);
      worst = std::max(worst, std::abs(static_cast<double>(hits[k]) / n - pi[k]) / se);
    }
    char name[64];
    std::snprintf(name, sizeof name, "argmax law, tau = %g (max |z|)", tau);
    rep.assertions.push_back(at_most(name, worst, kSigmas));
  }
  return rep;
}

SuiteReport reinforce(const CheckOptions& o) {
  SuiteReport rep{"reinforce", {}};
  Rng rng(o.seed);
  const std::vector<Tensor> theta{Tensor::row({0.4, -0.3})};
  obj::LogitsFunction logits = [](Tape& tape, std::span<const Var> p) {
    return ad::concat(p[0], tape.constant(Tensor(1, 1, 0.0)));
  };
  const double zsum = std::exp(0.4) + std::exp(-0.3) + 1.0;
  const std::array<double, 3> prob{std::exp(0.4) / zsum, std::exp(-0.3) / zsum, 1.0 / zsum};

  auto run = [&](const std::array<double, 3>& jv, const std::string& label) {
    std::array<double, 2> s{}, s2{};
    for (std::size_t i = 0; i < o.draws; ++i) {
      const auto est = obj::reinforce_grad(logits, theta, [&](int y) { return jv[static_cast<std::size_t>(y)]; }, rng);
      for (std::size_t a = 0; a < 2; ++a) {
        s[a] += est.grad[0](0, a);
        s2[a] += est.grad[0](0, a) * est.grad[0](0, a);
      }
    }
    const double n = static_cast<double>(o.draws);
    for (std::size_t a = 0; a < 2; ++a) {
      double exact = 0.0;
      for (std::size_t y = 0; y < 3; ++y) exact += jv[y] * prob[y] * ((y == a ? 1.0 : 0.0) - prob[a]);
      const double mean = s[a] / n;
      const double se = std::sqrt(std::max(s2[a] / n - mean * mean, 0.0) / n);
      rep.assertions.push_back(at_most(label + ", coordinate " + std::to_string(a + 1) + " (|z|)",
                                       se > 0.0 ? std::abs(mean - exact) / se : std::abs(mean - exact), kSigmas));
    }
  };
  run({1.0, 3.0, -2.0}, "exhaustive gradient");
  run({2.5, 2.5, 2.5}, "constant J has zero mean");
  return rep;
}

SuiteReport decomposition(const CheckOptions& o) {
  SuiteReport rep{"decomposition", {}};
  const auto data = scm::sample_dataset({o.records, o.seed, scm::Variant::counterfactual}).counterfactuals;
  const auto p = scm::treatment_marginal();
  auto add = [&](const std::string& name, const obj::DecompositionResult& d) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "lhs %.6g rhs %.6g se %.3g", d.lhs, d.rhs, d.se);
    rep.assertions.push_back(at_most(name + " (|z|)", std::abs(d.z), kSigmas, buf));
  };
  obj::Predictor oracle = [](std::span<const double> x, int t) { return scm::outcome_mean(x, t); };
  add("oracle predictor", obj::decomposition_check(oracle, data, p));

  Rng rng(mix_seed(o.seed, 1));
  nn::OutcomeModel random(nn::Architecture{}, rng);
  add("random model", obj::decomposition_check(random, data));

  train::TrainConfig cfg;
  cfg.seed = mix_seed(o.seed, 2);
  cfg.epochs = o.trained_epochs;
  const auto run = train::train_run(cfg, train::prepare_data(cfg));
  add("trained model", obj::decomposition_check(run.model, data));
  return rep;
}

}  // namespace

bool SuiteReport::passed() const {
  return !assertions.empty() && std::all_of(assertions.begin(), assertions.end(), [](const Assertion& a) { return a.passed; });
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"gradients", "sinkhorn", "gumbel", "reinforce", "decomposition"};
  return names;
}

SuiteReport run_suite(const std::string& name, const CheckOptions& options) {
  if (name == "gradients") return gradients(options);
  if (name == "sinkhorn") return sinkhorn(options);
  if (name == "gumbel") return gumbel(options);
  if (name == "reinforce") return reinforce(options);
  if (name == "decomposition") return decomposition(options);
  throw std::invalid_argument("unknown suite '" + name + "'");
}

std::string format_report(const SuiteReport& r) {
  std::ostringstream os;
  os << "[" << (r.passed() ? "PASS" : "FAIL") << "] " << r.suite << "\n";
  char buf[64];
  for (const auto& a : r.assertions) {
    std::snprintf(buf, sizeof buf, "%.4g <= %.4g", a.value, a.bound);
    os << "  " << (a.passed ? "ok  " : "FAIL") << "  " << a.name << ": " << buf;
    if (!a.detail.empty()) os << "  (" << a.detail << ")";
    os << "\n";
  }
  return os.str();
}

nlohmann::json report_json(const SuiteReport& r) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& a : r.assertions)
    list.push_back({{"name", a.name}, {"passed", a.passed}, {"value", a.value}, {"bound", a.bound}, {"detail", a.detail}});
  return {{"suite", r.suite}, {"passed", r.passed()}, {"assertions", list}};
}

}  // namespace cmle::checks
