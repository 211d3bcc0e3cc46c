#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cmle/objectives.hpp"
#include "cmle/rng.hpp"

using namespace cmle;
using namespace cmle::obj;
using doctest::Approx;

namespace {

nn::Architecture small_arch() {
  nn::Architecture a;
  a.encoder = {5, 4, 3};
  a.head_hidden = {4};
  a.classifier_hidden = {4};
  return a;
}

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

Batch toy_batch(std::vector<int> t, Rng& rng, std::size_t features = 5) {
  Batch b;
  b.x = random_tensor(t.size(), features, rng);
  b.y = random_tensor(t.size(), 2, rng);
  for (int v : t) ++b.counts[static_cast<std::size_t>(v - 1)];
  b.dataset_counts = b.counts;
  b.dataset_size = t.size();
  b.t = std::move(t);
  return b;
}

std::vector<Tensor> flat_params(nn::OutcomeModel& m) {
  std::vector<Tensor> out;
  for (auto& ref : m.parameters()) out.push_back(*ref.tensor);
  return out;
}

nn::BoundOutcome bind_from(const nn::OutcomeModel& m, Tape& tape, std::span<const Var> p) {
  const std::size_t ne = m.encoder.params().size();
  return {&m, &tape, {p.begin(), p.begin() + static_cast<long>(ne)}, {p.begin() + static_cast<long>(ne), p.end()}};
}

// 3-sigma band for a binomial frequency.
bool within_band(std::size_t hits, std::size_t n, double p) {
  const double f = static_cast<double>(hits) / static_cast<double>(n);
  return std::abs(f - p) <= 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

}  // namespace

TEST_CASE("config names and validation") {
  CHECK(parse_kind("explicit") == Kind::explicit_);
  CHECK(to_string(Kind::implicit) == "implicit");
  CHECK(parse_estimator("gumbel") == Estimator::gumbel);
  CHECK(parse_phi_source("interventional") == PhiSource::interventional);
  CHECK(parse_wass_marginals("global") == WassMarginals::global);
  CHECK_THROWS_AS(parse_kind("map"), std::invalid_argument);
  ObjectiveConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.kind = Kind::implicit;
  CHECK_NOTHROW(c.validate());
  c.alpha = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.alpha = 0.1;
  c.gumbel_tau = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("make_batch counts") {
  std::vector<scm::Example> data(5);
  const int ts[] = {1, 3, 3, 2, 3};
  for (std::size_t i = 0; i < 5; ++i) {
    data[i].x.assign(100, static_cast<double>(i));
    data[i].t = ts[i];
    data[i].y = {static_cast<double>(i), -1.0};
  }
  const std::vector<std::size_t> rows{4, 0};
  Batch b = make_batch(data, rows);
  CHECK(b.size() == 2);
  CHECK(b.t == std::vector<int>{3, 1});
  CHECK(b.counts == std::array<std::size_t, 3>{1, 0, 1});
  CHECK(b.dataset_counts == std::array<std::size_t, 3>{1, 1, 3});
  CHECK(b.x(0, 7) == 4.0);
  CHECK(b.y(1, 1) == -1.0);
  CHECK(b.shares(WassMarginals::batch)[0] == 0.5);
  CHECK(b.shares(WassMarginals::global)[2] == Approx(0.6));
  CHECK_THROWS_AS(make_batch(data, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST_CASE("mle loss examples") {
  Rng rng(1);
  nn::OutcomeModel zero(small_arch());
  Batch b = toy_batch({1, 2, 3, 1}, rng);
  Tape tape;
  b.y = Tensor(4, 2, 0.0);
  CHECK(mle_batch_loss(nn::bind(tape, zero), b).total.value().item() == 0.0);
  for (std::size_t i = 0; i < 4; ++i) b.y(i, 0) = 1.0;
  CHECK(mle_batch_loss(nn::bind(tape, zero), b).total.value().item() == Approx(1.0));
  b.t.clear();
  CHECK_THROWS_AS(mle_batch_loss(nn::bind(tape, zero), b), std::invalid_argument);
}

TEST_CASE("implicit objective reductions") {
  Rng rng(2);
  nn::OutcomeModel m(small_arch(), rng);
  Batch b = toy_batch({1, 2, 3, 3, 1, 2}, rng);
  ObjectiveConfig cfg;
  cfg.kind = Kind::implicit;
  Tape tape;
  auto bound = nn::bind(tape, m);

  SUBCASE("balanced batch, alpha 0, is three times MLE") {
    const double mle = mle_batch_loss(bound, b).total.value().item();
    const double imp = implicit_cmle_batch_loss(bound, b, cfg).total.value().item();
    CHECK(imp / 3.0 == Approx(mle).epsilon(1e-13));
  }
  SUBCASE("unbalanced batch weights n / u_t") {
    Batch u = toy_batch({1, 1, 1, 2}, rng);
    const Tensor mu = nn::predict_batch(m, u.x, u.t);
    double expect = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double l = std::pow(u.y(i, 0) - mu(i, 0), 2) + std::pow(u.y(i, 1) - mu(i, 1), 2);
      expect += (u.t[i] == 1 ? 4.0 / 3.0 : 4.0) * l;
    }
    CHECK(implicit_cmle_batch_loss(bound, u, cfg).total.value().item() == Approx(expect / 4.0).epsilon(1e-12));
  }
  SUBCASE("balanced batch penalty uses coefficient 2/3 per class") {
    cfg.alpha = 0.25;
    auto parts = implicit_cmle_batch_loss(bound, b, cfg);
    Tensor r = m.encoder.apply(b.x);
    double expect = 0.0;
    for (int j = 1; j <= 3; ++j) {
      std::vector<std::size_t> g, rest;
      for (std::size_t i = 0; i < 6; ++i) (b.t[i] == j ? g : rest).push_back(i);
      Tensor ga(g.size(), 3), rb(rest.size(), 3);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) ga(i, c) = r(g[i], c);
      for (std::size_t i = 0; i < rest.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) rb(i, c) = r(rest[i], c);
      auto plan = ot::sinkhorn_plan(ot::pairwise_l2(ga, rb), std::vector<double>(g.size(), 1.0 / 3.0),
                                    std::vector<double>(rest.size(), 2.0 / 3.0));
      expect += (2.0 / 3.0) * plan.cost;
    }
    CHECK(parts.penalty == Approx(expect).epsilon(1e-12));
    CHECK(parts.total.value().item() == Approx(parts.factual + 0.25 * expect).epsilon(1e-12));
  }
  SUBCASE("identical representations contribute nothing") {
    nn::OutcomeModel flat(small_arch(), rng);
    for (auto& p : flat.encoder.params()) for (double& v : p.values()) v = 0.0;
    cfg.alpha = 10.0;
    Tape t2;
    auto parts = implicit_cmle_batch_loss(nn::bind(t2, flat), b, cfg);
    CHECK(parts.penalty == 0.0);
    CHECK(parts.total.value().item() == parts.factual);
  }
  SUBCASE("classes with an empty side are skipped") {
    cfg.alpha = 1.0;
    Batch one = toy_batch({2, 2, 2, 2}, rng);
    auto parts = implicit_cmle_batch_loss(bound, one, cfg);
    CHECK(parts.penalty == 0.0);
    Batch two = toy_batch({1, 2, 2, 1}, rng);
    FrozenPlans fp;
    implicit_cmle_batch_loss(bound, two, cfg, &fp);
    CHECK(fp.plans[0].has_value());
    CHECK(fp.plans[1].has_value());
    CHECK_FALSE(fp.plans[2].has_value());
  }
  SUBCASE("global marginals use dataset shares") {
    cfg.alpha = 0.0;
    cfg.wass_marginals = WassMarginals::global;
    Batch g = toy_batch({1, 2, 3, 3}, rng);
    g.dataset_counts = {50, 30, 20};
    g.dataset_size = 100;
    const Tensor mu = nn::predict_batch(m, g.x, g.t);
    double expect = 0.0;
    const double w[] = {2.0, 100.0 / 30.0, 5.0};
    for (std::size_t i = 0; i < 4; ++i) {
      expect += w[g.t[i] - 1] * (std::pow(g.y(i, 0) - mu(i, 0), 2) + std::pow(g.y(i, 1) - mu(i, 1), 2));
    }
    CHECK(implicit_cmle_batch_loss(bound, g, cfg).total.value().item() == Approx(expect / 4.0).epsilon(1e-12));
  }
}

TEST_CASE("objective gradients match finite differences") {
  Rng rng(3);
  nn::OutcomeModel m(small_arch(), rng);
  m.out_scale = {3.0, 0.5};
  m.out_shift = {1.0, -1.0};
  std::vector<Tensor> params = flat_params(m);
  Batch b = toy_batch({1, 3, 2, 3}, rng);

  SUBCASE("mle") {
    ad::ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
      return mle_batch_loss(bind_from(m, tape, p), b).total;
    };
    CHECK(ad::finite_diff_check(f, params, 1e-5) <= 1e-4);
  }
  SUBCASE("implicit with frozen plans") {
    ObjectiveConfig cfg;
    cfg.kind = Kind::implicit;
    cfg.alpha = 0.8;
    FrozenPlans fp;
    ad::ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
      return implicit_cmle_batch_loss(bind_from(m, tape, p), b, cfg, &fp).total;
    };
    CHECK(ad::finite_diff_check(f, params, 1e-5) <= 1e-4);
  }
  SUBCASE("explicit with frozen noise") {
    ObjectiveConfig cfg;
    cfg.kind = Kind::explicit_;
    cfg.alpha = 0.7;
    nn::Classifier c(7, {4}, 3, rng);
    const ExplicitNoise noise = sample_explicit_noise(b.t, rng);
    ad::ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
      return explicit_cmle_batch_loss(bind_from(m, tape, p), nn::bind(tape, c, false), b, cfg, noise).total;
    };
    CHECK(ad::finite_diff_check(f, params, 1e-5) <= 1e-4);
  }
}

TEST_CASE("sample_kt") {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) CHECK(sample_kt(1, 2, rng) == 2);
  std::size_t ones = 0;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    const int k = sample_kt(2, 3, rng);
    REQUIRE((k == 1 || k == 3));
    ones += k == 1;
  }
  CHECK(within_band(ones, n, 0.5));
  CHECK_THROWS_AS(sample_kt(1, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_kt(4, 3, rng), std::invalid_argument);

  Rng a(9), b(9);
  sample_kt(3, 3, a);
  b.uniform();
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("reparameterized sample") {
  Tape tape;
  Var mu = tape.parameter(Tensor::row({1.5, -2.0}));
  const Tensor y0 = reparam_sample(mu, Tensor(1, 2, 0.0)).value();
  CHECK(y0 == Tensor::row({1.5, -2.0}));

  Rng rng(5);
  const Tensor eps = Tensor::row({0.3, -0.7});
  Var y = reparam_sample(mu, eps);
  auto g = tape.backward(ad::sum(ad::square(y)));
  CHECK(g[mu](0, 0) == Approx(2.0 * y.value()(0, 0)));
  CHECK(g[mu](0, 1) == Approx(2.0 * y.value()(0, 1)));

  const std::size_t n = 100000;
  std::array<double, 2> s{};
  for (std::size_t i = 0; i < n; ++i) {
    auto d = reparam_sample({1.5, -2.0}, rng);
    s[0] += d[0];
    s[1] += d[1];
  }
  CHECK(std::abs(s[0] / n - 1.5) <= 3.0 / std::sqrt(double(n)));
  CHECK(std::abs(s[1] / n + 2.0) <= 3.0 / std::sqrt(double(n)));
}

TEST_CASE("explicit objective reductions") {
  Rng rng(6);
  nn::OutcomeModel m(small_arch(), rng);
  Batch b = toy_batch({1, 2, 3, 1, 2}, rng);
  ObjectiveConfig cfg;
  cfg.kind = Kind::explicit_;
  const ExplicitNoise noise = sample_explicit_noise(b.t, rng);

  SUBCASE("alpha 0 is MLE bitwise") {
    nn::Classifier c(7, {4}, 3, rng);
    Tape t1, t2;
    auto b1 = nn::bind(t1, m);
    auto b2 = nn::bind(t2, m);
    auto e = explicit_cmle_batch_loss(b1, nn::bind(t1, c, false), b, cfg, noise);
    auto l = mle_batch_loss(b2, b);
    CHECK(e.total.value() == l.total.value());
    auto g1 = t1.backward(e.total);
    auto g2 = t2.backward(l.total);
    for (std::size_t p = 0; p < b1.head.size(); ++p) CHECK(g1[b1.head[p]] == g2[b2.head[p]]);
  }
  SUBCASE("confident classifier adds nothing") {
    cfg.alpha = 0.5;
    Batch ones = toy_batch({1, 1, 1}, rng);
    ExplicitNoise fixed{{2, 2, 2}, Tensor(3, 2, 0.1)};
    nn::Classifier c(7, {4}, 3);
    c.net.params().back() = Tensor::row({-1000.0, 1000.0, -1000.0});
    Tape t1, t2;
    auto e = explicit_cmle_batch_loss(nn::bind(t1, m), nn::bind(t1, c, false), ones, cfg, fixed);
    CHECK(e.penalty == 0.0);
    CHECK(e.total.value().item() == Approx(mle_batch_loss(nn::bind(t2, m), ones).total.value().item()).epsilon(1e-14));
  }
  SUBCASE("uniform classifier leaves the MLE gradient") {
    cfg.alpha = 0.9;
    nn::Classifier c(7, {4}, 3);
    Tape t1, t2;
    auto b1 = nn::bind(t1, m);
    auto e = explicit_cmle_batch_loss(b1, nn::bind(t1, c, false), b, cfg, noise);
    CHECK(e.penalty == Approx(std::log(3.0)).epsilon(1e-12));
    auto b2 = nn::bind(t2, m);
    auto l = mle_batch_loss(b2, b);
    auto g1 = t1.backward(e.total);
    auto g2 = t2.backward(l.total);
    for (std::size_t p = 0; p < b1.encoder.size(); ++p) {
      const Tensor& x = g1[b1.encoder[p]];
      const Tensor& y = g2[b2.encoder[p]];
      for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == Approx(y[i]).epsilon(1e-12));
    }
  }
  SUBCASE("non-finite classifier output is an error") {
    cfg.alpha = 0.1;
    nn::Classifier c(7, {4}, 3, rng);
    c.net.params()[0](0, 0) = NAN;
    Tape t1;
    CHECK_THROWS_AS(explicit_cmle_batch_loss(nn::bind(t1, m), nn::bind(t1, c, false), b, cfg, noise),
                    std::runtime_error);
  }
  SUBCASE("noise must match") {
    cfg.alpha = 0.1;
    nn::Classifier c(7, {4}, 3, rng);
    Tape t1;
    ExplicitNoise short_noise{{2}, Tensor(1, 2)};
    CHECK_THROWS_AS(explicit_cmle_batch_loss(nn::bind(t1, m), nn::bind(t1, c, false), b, cfg, short_noise),
                    std::invalid_argument);
  }
}

TEST_CASE("explicit noise consumes a fixed number of draws") {
  Rng a(7), b(7);
  const std::vector<int> t{1, 2, 3, 3};
  sample_explicit_noise(t, a);
  for (int i = 0; i < 4; ++i) {
    b.uniform();
    b.normal();
    b.normal();
  }
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("gumbel softmax") {
  Rng rng(8);
  const std::vector<double> pi{0.7, 0.2, 0.1};
  for (int i = 0; i < 50; ++i) {
    auto z = gumbel_softmax(pi, 0.5, rng);
    CHECK(std::accumulate(z.begin(), z.end(), 0.0) == Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("uniform pi has mean 1/V") {
    const std::vector<double> u(4, 0.25);
    const std::size_t n = 100000;
    std::array<double, 4> s{}, s2{};
    for (std::size_t i = 0; i < n; ++i) {
      auto z = gumbel_softmax(u, 1.0, rng);
      for (std::size_t k = 0; k < 4; ++k) {
        s[k] += z[k];
        s2[k] += z[k] * z[k];
      }
    }
    for (std::size_t k = 0; k < 4; ++k) {
      const double mean = s[k] / n;
      const double se = std::sqrt((s2[k] / n - mean * mean) / n);
      CHECK(std::abs(mean - 0.25) <= 3.0 * se);
    }
  }
  SUBCASE("argmax follows pi at every temperature") {
    for (double tau : {0.1, 1.0, 5.0}) {
      std::array<std::size_t, 3> hits{};
      const std::size_t n = 100000;
      for (std::size_t i = 0; i < n; ++i) {
        auto z = gumbel_softmax(pi, tau, rng);
        ++hits[static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin())];
      }
      CAPTURE(tau);
      for (std::size_t k = 0; k < 3; ++k) CHECK(within_band(hits[k], n, pi[k]));
    }
  }
  SUBCASE("zero entries are floored and counted") {
    std::size_t floors = 0;
    auto z = gumbel_softmax(std::vector<double>{0.0, 1.0}, 1.0, rng, &floors);
    CHECK(floors == 1);
    CHECK(std::isfinite(z[0]));
    CHECK_THROWS_AS(gumbel_softmax(pi, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(gumbel_softmax(std::vector<double>{-0.1, 1.1}, 1.0, rng), std::invalid_argument);
  }
  SUBCASE("tape form matches the plain form") {
    Tape tape;
    Tensor g(1, 3);
    Rng r1(77), r2(77);
    for (double& v : g.values()) v = r1.gumbel();
    Var lp = tape.constant(Tensor::row({std::log(0.7), std::log(0.2), std::log(0.1)}));
    Var z = gumbel_softmax(lp, 0.3, g);
    auto plain = gumbel_softmax(pi, 0.3, r2);
    for (std::size_t k = 0; k < 3; ++k) CHECK(z.value()(0, k) == Approx(plain[k]).epsilon(1e-12));
  }
}

TEST_CASE("REINFORCE on the enumerable toy") {
  // logits (theta1, theta2, 0) over three categories
  const std::vector<Tensor> theta{Tensor::row({0.4, -0.3})};
  LogitsFunction logits = [](Tape& tape, std::span<const Var> p) {
    return ad::concat(p[0], tape.constant(Tensor(1, 1, 0.0)));
  };
  const double z = std::exp(0.4) + std::exp(-0.3) + 1.0;
  const std::array<double, 3> prob{std::exp(0.4) / z, std::exp(-0.3) / z, 1.0 / z};
  Rng rng(9);
  const std::size_t n = 100000;

  auto run = [&](const std::function<double(int)>& J, std::array<double, 2>& mean, std::array<double, 2>& se) {
    std::array<double, 2> s{}, s2{};
    for (std::size_t i = 0; i < n; ++i) {
      auto est = reinforce_grad(logits, theta, J, rng);
      for (std::size_t a = 0; a < 2; ++a) {
        s[a] += est.grad[0](0, a);
        s2[a] += est.grad[0](0, a) * est.grad[0](0, a);
      }
    }
    for (std::size_t a = 0; a < 2; ++a) {
      mean[a] = s[a] / n;
      se[a] = std::sqrt((s2[a] / n - mean[a] * mean[a]) / n);
    }
  };

  SUBCASE("matches the exhaustive gradient") {
    const std::array<double, 3> jv{1.0, 3.0, -2.0};
    std::array<double, 2> mean{}, se{};
    run([&](int y) { return jv[static_cast<std::size_t>(y)]; }, mean, se);
    for (std::size_t a = 0; a < 2; ++a) {
      double exact = 0.0;
      for (std::size_t y = 0; y < 3; ++y) exact += jv[y] * prob[y] * ((y == a ? 1.0 : 0.0) - prob[a]);
      CAPTURE(a);
      CHECK(std::abs(mean[a] - exact) <= 3.0 * se[a]);
    }
  }
  SUBCASE("constant J has zero mean") {
    std::array<double, 2> mean{}, se{};
    run([](int) { return 2.5; }, mean, se);
    for (std::size_t a = 0; a < 2; ++a) CHECK(std::abs(mean[a]) <= 3.0 * se[a]);
  }
  SUBCASE("zero J gives zero estimates") {
    for (int i = 0; i < 20; ++i) {
      auto est = reinforce_grad(logits, theta, [](int) { return 0.0; }, rng);
      for (double v : est.grad[0].values()) CHECK(v == 0.0);
    }
  }
  SUBCASE("toy model wrapper") {
    auto model = nn::ToyOutcomeModel::for_toy(rng);
    auto cls = nn::toy_classifier(rng);
    std::vector<double> x(10, 0.3);
    auto est = reinforce_grad(model, cls, x, 1, 2, rng);
    REQUIRE(est.grad.size() == model.net.params().size());
    for (std::size_t i = 0; i < est.grad.size(); ++i) CHECK(est.grad[i].same_shape(model.net.params()[i]));
    CHECK(est.weight > 0.0);
    CHECK_THROWS_AS(reinforce_grad(model, cls, x, 2, 2, rng), std::invalid_argument);
  }
}

TEST_CASE("discrete toy objective") {
  Rng rng(10);
  auto model = nn::ToyOutcomeModel::for_toy(rng);
  auto cls = nn::toy_classifier(rng);
  ToyBatch b;
  b.x = random_tensor(4, 10, rng);
  b.t = {1, 2, 2, 1};
  b.y = {0, 7, 3, 5};
  ToyNoise noise = sample_toy_noise(b.t, 8, rng);
  CHECK(noise.k == std::vector<int>{2, 1, 1, 2});
  ObjectiveConfig cfg;
  cfg.kind = Kind::explicit_;
  cfg.alpha = 0.6;

  SUBCASE("alpha 0 is the categorical NLL") {
    cfg.alpha = 0.0;
    Tape tape;
    auto vars = model.net.bind(tape, true);
    auto parts = toy_explicit_batch_loss(model, vars, nn::bind(tape, cls, false), b, cfg, noise);
    const Tensor logits = model.net.apply([&] {
      Tensor in(4, 12);
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t c = 0; c < 10; ++c) in(i, c) = b.x(i, c);
        in(i, 10 + static_cast<std::size_t>(b.t[i] - 1)) = 1.0;
      }
      return in;
    }());
    double nll = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double lse = 0.0;
      for (std::size_t c = 0; c < 8; ++c) lse += std::exp(logits(i, c));
      nll += std::log(lse) - logits(i, static_cast<std::size_t>(b.y[i]));
    }
    CHECK(parts.total.value().item() == Approx(nll / 4.0).epsilon(1e-12));
  }
  SUBCASE("gumbel path gradient matches finite differences") {
    cfg.estimator = Estimator::gumbel;
    cfg.gumbel_tau = 0.7;
    ad::ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
      return toy_explicit_batch_loss(model, p, nn::bind(tape, cls, false), b, cfg, noise).total;
    };
    CHECK(ad::finite_diff_check(f, model.net.params(), 1e-5) <= 1e-4);
  }
  SUBCASE("reinforce surrogate and reparam rejection") {
    cfg.estimator = Estimator::reinforce;
    Tape tape;
    auto vars = model.net.bind(tape, true);
    auto parts = toy_explicit_batch_loss(model, vars, nn::bind(tape, cls, false), b, cfg, noise);
    CHECK(std::isfinite(parts.total.value().item()));
    CHECK(parts.penalty > 0.0);
    cfg.estimator = Estimator::reparam;
    CHECK_THROWS_AS(toy_explicit_batch_loss(model, vars, nn::bind(tape, cls, false), b, cfg, noise),
                    std::invalid_argument);
  }
}

TEST_CASE("bound constants") {
  const std::vector<double> third(3, 1.0 / 3.0);
  auto c = bound_constants(third, 0.2, 0.4, 3);
  for (double e : c.eta) CHECK(e == Approx(3.0).epsilon(1e-14));
  CHECK(c.mu == Approx(-1.4 * std::log(3.0)).epsilon(1e-14));
  CHECK(c.mu == Approx(-1.53806).epsilon(1e-5));
  auto near = bound_constants(third, 0.5, 0.5 + 1e-12, 3);
  CHECK(near.mu == Approx(-2.19722).epsilon(1e-5));
  CHECK_THROWS_AS(bound_constants(third, 0.4, 0.2, 3), std::invalid_argument);
  CHECK_THROWS_AS(bound_constants(third, 0.0, 0.2, 3), std::invalid_argument);
  CHECK_THROWS_AS(bound_constants(third, 0.2, 0.4, 1), std::invalid_argument);
  CHECK_THROWS_AS(bound_constants(std::vector<double>{0.5, 0.5}, 0.2, 0.4, 3), std::invalid_argument);
  CHECK_THROWS_AS(bound_constants(std::vector<double>{1.0, 0.0, 0.0}, 0.2, 0.4, 3), std::invalid_argument);
}

TEST_CASE("epsilon estimates") {
  auto data = scm::sample_dataset({20000, 11, scm::Variant::counterfactual}).counterfactuals;
  Predictor oracle = [](std::span<const double> x, int t) { return scm::outcome_mean(x, t); };
  auto est = epsilon_estimates(oracle, data);
  for (std::size_t t = 0; t < 3; ++t) {
    REQUIRE(est.factual[t].has_value());
    REQUIRE(est.counterfactual[t].has_value());
    CHECK(std::abs(*est.factual[t] - 2.0) <= 3.0 * est.factual_se[t]);
    CHECK(std::abs(*est.counterfactual[t] - 2.0) <= 3.0 * est.counterfactual_se[t]);
  }

  Predictor zero = [](std::span<const double>, int) { return std::array<double, 2>{0.0, 0.0}; };
  auto z = epsilon_estimates(zero, data);
  for (int t = 1; t <= 3; ++t) {
    double f = 0.0, cf = 0.0;
    std::size_t nf = 0, ncf = 0;
    for (const auto& r : data) {
      const auto& y = r.outcome(t);
      const double sq = y[0] * y[0] + y[1] * y[1];
      if (r.factual_t == t) {
        f += sq;
        ++nf;
      } else {
        cf += sq;
        ++ncf;
      }
    }
    CHECK(*z.factual[static_cast<std::size_t>(t - 1)] == Approx(f / nf).epsilon(1e-12));
    CHECK(*z.counterfactual[static_cast<std::size_t>(t - 1)] == Approx(cf / ncf).epsilon(1e-12));
  }

  std::vector<scm::CounterfactualExample> single(data.begin(), data.begin() + 1);
  single[0].factual_t = 1;
  auto s = epsilon_estimates(oracle, single);
  CHECK(s.factual[0].has_value());
  CHECK_FALSE(s.counterfactual[0].has_value());
  CHECK_FALSE(s.factual[1].has_value());
  CHECK(s.counterfactual[1].has_value());
}

TEST_CASE("model-based estimates agree with the predictor form") {
  Rng rng(12);
  nn::OutcomeModel m(nn::Architecture{}, rng);
  auto data = scm::sample_dataset({300, 12, scm::Variant::counterfactual}).counterfactuals;
  auto a = epsilon_estimates(m, data);
  auto b = epsilon_estimates([&](std::span<const double> x, int t) { return nn::predict(m, x, t); }, data);
  for (std::size_t t = 0; t < 3; ++t) {
    if (a.factual[t]) CHECK(*a.factual[t] == Approx(*b.factual[t]).epsilon(1e-12));
    CHECK(*a.counterfactual[t] == Approx(*b.counterfactual[t]).epsilon(1e-12));
  }
}

TEST_CASE("decomposition identity") {
  auto data = scm::sample_dataset({20000, 13, scm::Variant::counterfactual}).counterfactuals;
  const auto p = scm::treatment_marginal();
  CHECK(p[0] + p[1] + p[2] == Approx(1.0));

  Predictor oracle = [](std::span<const double> x, int t) { return scm::outcome_mean(x, t); };
  auto d = decomposition_check(oracle, data, p);
  CHECK(d.se > 0.0);
  CHECK(std::abs(d.z) < 3.0);

  Rng rng(14);
  nn::OutcomeModel random(nn::Architecture{}, rng);
  auto r = decomposition_check(random, data);
  CHECK(std::abs(r.z) < 3.0);
  CHECK(r.lhs > 100.0);

  // Empirical shares make the two sides agree to rounding.
  std::array<double, 3> share{};
  for (const auto& rec : data) share[static_cast<std::size_t>(rec.factual_t - 1)] += 1.0 / data.size();
  auto e = decomposition_check(oracle, data, share);
  CHECK(e.lhs == Approx(e.rhs).epsilon(1e-12));
}
