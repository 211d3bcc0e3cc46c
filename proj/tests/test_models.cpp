#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "cmle/models.hpp"
#include "cmle/rng.hpp"

using namespace cmle;
using namespace cmle::nn;
using doctest::Approx;

namespace {

Architecture small_arch() {
  Architecture a;
  a.encoder = {5, 4, 3};
  a.head_hidden = {4};
  a.classifier_hidden = {4};
  return a;
}

Tensor random_x(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor x(rows, cols);
  for (double& v : x.values()) v = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("initialization is bounded and seeded") {
  Rng a(1), b(1);
  Mlp m1({100, 128, 64}, true, a), m2({100, 128, 64}, true, b);
  CHECK(m1.params() == m2.params());
  REQUIRE(m1.params().size() == 4);
  CHECK(m1.params()[0].rows() == 100);
  CHECK(m1.params()[0].cols() == 128);
  CHECK(m1.params()[3].cols() == 64);
  for (double v : m1.params()[0].values()) CHECK(std::abs(v) <= 0.1);
  for (double v : m1.params()[2].values()) CHECK(std::abs(v) <= 1.0 / std::sqrt(128.0));
  CHECK_THROWS_AS(Mlp({3}, false), std::invalid_argument);
  CHECK_THROWS_AS(Mlp({3, 0, 2}, false), std::invalid_argument);
}

TEST_CASE("default architecture shapes") {
  Rng rng(2);
  OutcomeModel m(Architecture{}, rng);
  CHECK(m.encoder.sizes() == std::vector<std::size_t>{100, 128, 64});
  CHECK(m.head.sizes() == std::vector<std::size_t>{67, 64, 2});
  auto c = Classifier::for_benchmark(Architecture{}, rng);
  CHECK(c.net.sizes() == std::vector<std::size_t>{102, 128, 64, 3});
  CHECK(m.parameters().size() == 8);
  CHECK(m.parameters()[2].name == "encoder.1.weight");
  CHECK(m.parameters()[5].name == "head.0.bias");
}

TEST_CASE("encode") {
  Tape tape;
  OutcomeModel zero(Architecture{});
  auto bz = bind(tape, zero);
  Rng rng(3);
  Var x = tape.constant(random_x(4, 100, rng));
  for (double v : encode(bz, x).value().values()) CHECK(v == 0.0);

  OutcomeModel m(Architecture{}, rng);
  auto bm = bind(tape, m);
  const Tensor first = encode(bm, x).value();
  CHECK(encode(bm, x).value() == first);

  Tensor big(3, 100);
  for (double& v : big.values()) v = 20.0 * rng.uniform() - 10.0;
  Var r = encode(bm, tape.constant(big));
  CHECK(r.value().all_finite());
  for (double v : r.value().values()) CHECK(std::abs(v) < 1.0);
}

TEST_CASE("outcome_forward") {
  Rng rng(4);
  Tape tape;
  OutcomeModel zero(Architecture{});
  auto bz = bind(tape, zero);
  Var x = tape.constant(random_x(3, 100, rng));
  const std::vector<int> t{1, 2, 3};
  for (double v : outcome_forward(bz, x, t).value().values()) CHECK(v == 0.0);

  const std::vector<int> bad{1, 4, 2};
  CHECK_THROWS_AS(outcome_forward(bz, x, bad), std::invalid_argument);
  const std::vector<int> short_t{1, 2};
  CHECK_THROWS_AS(outcome_forward(bz, x, short_t), std::invalid_argument);

  SUBCASE("t enters only through the one-hot slice") {
    OutcomeModel m(Architecture{}, rng);
    // With head weights on the one-hot rows zeroed, predictions ignore t.
    Tensor& w0 = m.head.params()[0];
    for (std::size_t r = 64; r < 67; ++r)
      for (std::size_t c = 0; c < w0.cols(); ++c) w0(r, c) = 0.0;
    auto b2 = bind(tape, m);
    const std::vector<int> t1{1, 1, 1}, t3{3, 3, 3};
    const Tensor under1 = outcome_forward(b2, x, t1).value();
    CHECK(outcome_forward(b2, x, t3).value() == under1);
  }
  SUBCASE("every treatment can be queried for the same x") {
    OutcomeModel m(Architecture{}, rng);
    for (int q = 1; q <= 3; ++q) {
      auto mu = predict(m, x.value().row_span(0), q);
      CHECK(std::isfinite(mu[0]));
      CHECK(std::isfinite(mu[1]));
    }
    CHECK(predict(m, x.value().row_span(0), 1) != predict(m, x.value().row_span(0), 2));
  }
}

TEST_CASE("tape-free prediction matches the tape bitwise") {
  Rng rng(5);
  OutcomeModel m(Architecture{}, rng);
  m.out_scale = {12.5, 3.0};
  m.out_shift = {-1.0, 0.25};
  Tensor x = random_x(6, 100, rng);
  const std::vector<int> t{1, 2, 3, 3, 2, 1};
  Tape tape;
  auto b = bind(tape, m);
  CHECK(outcome_forward(b, tape.constant(x), t).value() == predict_batch(m, x, t));
}

TEST_CASE("outcome_nll examples") {
  Rng rng(6);
  OutcomeModel m(Architecture{}, rng);
  std::vector<double> x(100);
  for (double& v : x) v = rng.normal();
  const auto mu = predict(m, x, 2);
  CHECK(outcome_nll(m, x, 2, std::vector<double>{mu[0], mu[1]}) == 0.0);
  CHECK(outcome_nll(m, x, 2, std::vector<double>{mu[0] + 1.0, mu[1]}) == Approx(1.0).epsilon(1e-12));
  CHECK(outcome_nll(m, x, 2, std::vector<double>{mu[0] + 1.0, mu[1] + 1.0}) == Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS(outcome_nll(m, x, 2, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("outcome loss gradient matches finite differences") {
  Rng rng(7);
  OutcomeModel m(small_arch(), rng);
  m.out_scale = {2.0, 0.5};
  const Tensor x = random_x(4, 5, rng);
  const Tensor y = random_x(4, 2, rng);
  const std::vector<int> t{1, 3, 2, 3};
  std::vector<Tensor> params;
  for (auto& ref : m.parameters()) params.push_back(*ref.tensor);
  ad::ScalarFunction f = [&](Tape& tape, std::span<const Var> p) {
    BoundOutcome b{&m, &tape, {p.begin(), p.begin() + 4}, {p.begin() + 4, p.end()}};
    return ad::sum(squared_error_rows(outcome_forward(b, tape.constant(x), t), tape.constant(y)));
  };
  CHECK(ad::finite_diff_check(f, params, 1e-5) <= 1e-4);
}

TEST_CASE("classifier probabilities") {
  Rng rng(8);
  Classifier zero(102, {128, 64}, 3);
  std::vector<double> x(100), y{3.0, -2.0};
  for (double& v : x) v = rng.normal();
  CHECK(-classifier_logprob(zero, x, y, 2) == Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(-classifier_logprob(zero, x, y, 2) == Approx(1.09861).epsilon(1e-5));

  Classifier saturated(102, {128, 64}, 3);
  saturated.net.params().back() = Tensor::row({20.0, -20.0, -20.0});
  CHECK(-classifier_logprob(saturated, x, y, 1) <= 1e-8);
  CHECK_THROWS_AS(classifier_logprob(saturated, x, y, 4), std::invalid_argument);

  Classifier c = Classifier::for_benchmark(Architecture{}, rng);
  Tape tape;
  auto bc = bind(tape, c, false);
  Var lp = classifier_log_probs(bc, tape.constant(random_x(5, 100, rng)), tape.constant(random_x(5, 2, rng)));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double p = std::exp(lp.value()(i, k));
      CHECK(p > 0.0);
      s += p;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  const std::vector<int> t{1, 2, 3, 2, 1};
  Var picked = pick_log_prob(lp, t);
  for (std::size_t i = 0; i < 5; ++i) CHECK(picked.value()(i, 0) == lp.value()(i, static_cast<std::size_t>(t[i] - 1)));
}

TEST_CASE("toy models") {
  Rng rng(9);
  auto m = ToyOutcomeModel::for_toy(rng);
  CHECK(m.classes() == 8);
  CHECK(m.net.sizes() == std::vector<std::size_t>{12, 16, 8});
  Tape tape;
  auto vars = m.net.bind(tape, true);
  const std::vector<int> t{1, 2};
  Var logits = toy_logits(m, vars, tape.constant(random_x(2, 10, rng)), t);
  CHECK(logits.value().rows() == 2);
  CHECK(logits.value().cols() == 8);
  auto c = toy_classifier(rng);
  CHECK(c.net.sizes() == std::vector<std::size_t>{18, 16, 2});
}

TEST_CASE("one_hot") {
  const std::vector<int> labels{2, 1};
  CHECK(one_hot(labels, 3) == Tensor::matrix({{0, 1, 0}, {1, 0, 0}}));
  CHECK(one_hot(labels, 3, 0) == Tensor::matrix({{0, 0, 1}, {0, 1, 0}}));
  CHECK_THROWS_AS(one_hot(labels, 1), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(10);
  OutcomeModel m(Architecture{}, rng);
  m.out_scale = {28.123456789012345, 1.0 / 3.0};
  m.out_shift = {-0.1, 1e-300};
  std::stringstream ss;
  save_checkpoint(ss, m);
  const std::string text = ss.str();
  CHECK(text.rfind("cmle-checkpoint 1\nkind outcome\n", 0) == 0);
  auto back = load_outcome_checkpoint(ss);
  CHECK(back.encoder.params() == m.encoder.params());
  CHECK(back.head.params() == m.head.params());
  CHECK(back.encoder.sizes() == m.encoder.sizes());
  CHECK(back.out_scale == m.out_scale);
  CHECK(back.out_shift == m.out_shift);
  std::stringstream again;
  save_checkpoint(again, back);
  CHECK(again.str() == text);

  Classifier c = Classifier::for_benchmark(Architecture{}, rng);
  std::stringstream cs;
  save_checkpoint(cs, c);
  auto cb = load_classifier_checkpoint(cs);
  CHECK(cb.net.params() == c.net.params());
  CHECK(cb.net.sizes() == c.net.sizes());
}

TEST_CASE("checkpoint errors") {
  Rng rng(11);
  OutcomeModel m(small_arch(), rng);
  std::stringstream ss;
  save_checkpoint(ss, m);
  const std::string text = ss.str();

  std::istringstream wrong_kind(text);
  CHECK_THROWS_AS(load_classifier_checkpoint(wrong_kind), CheckpointError);
  std::istringstream truncated(text.substr(0, text.size() / 2));
  CHECK_THROWS_AS(load_outcome_checkpoint(truncated), CheckpointError);
  std::istringstream no_header("hello 1\n");
  CHECK_THROWS_AS(load_outcome_checkpoint(no_header), CheckpointError);
  std::string v2 = text;
  v2.replace(v2.find(" 1\n"), 3, " 2\n");
  std::istringstream future(v2);
  CHECK_THROWS_AS(load_outcome_checkpoint(future), CheckpointError);
}
