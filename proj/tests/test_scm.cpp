#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "cmle/rng.hpp"
#include "cmle/scm.hpp"

using namespace cmle::scm;
using doctest::Approx;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cmle_test_scm";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<double> zeros(std::size_t n = kFeatures) { return std::vector<double>(n, 0.0); }

}  // namespace

TEST_CASE("g functions at hand-evaluated points") {
  CHECK(eval_g(1, 0.5) == 0.0);
  CHECK(eval_g(2, 0.5) == 2.0);
  CHECK(eval_g(11, 0.0, 1) == 0.0);
  CHECK(eval_g(5, 0.0) == Approx(-std::exp(-1.0)).epsilon(1e-15));
  CHECK(eval_g(5, 0.0) == Approx(-0.367879).epsilon(1e-6));
  CHECK(eval_g(9, 0.0) == 0.0);
  CHECK(eval_g(9, 1e-9) == 1.0);
  CHECK(eval_g(12, 0.0, 2) == Approx(std::exp(2.0)));
  CHECK(eval_g(13, 0.0, 1) == Approx(std::sin(1.0)));

  CHECK_THROWS_AS(eval_g(0, 0.0), std::out_of_range);
  CHECK_THROWS_AS(eval_g(14, 0.0), std::out_of_range);
  CHECK_THROWS_AS(eval_g(11, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(eval_g(3, 0.0, 1), std::invalid_argument);
}

TEST_CASE("treatment score and thresholds") {
  const double base = -0.5 + 2.25 - 1.0 / 3.0 + 0.0 - std::exp(-1.0);
  auto x = zeros();
  CHECK(treatment_score(x) == Approx(base).epsilon(1e-14));
  CHECK(treatment_score(x) == Approx(1.04879).epsilon(1e-5));
  CHECK(assign_treatment(x, Mechanism::observational) == 1);

  x[1] = 2.5;
  CHECK(treatment_score(x) == Approx(4.79879).epsilon(1e-5));
  CHECK(assign_treatment(x, Mechanism::observational) == 2);

  x[1] = 3.0;
  CHECK(treatment_score(x) == Approx(7.04879).epsilon(1e-5));
  CHECK(assign_treatment(x, Mechanism::observational) == 3);

  CHECK(threshold_treatment(4.0) == 1);
  CHECK(threshold_treatment(std::nextafter(4.0, 5.0)) == 2);
  CHECK(threshold_treatment(5.0) == 2);
  CHECK(threshold_treatment(std::nextafter(5.0, 6.0)) == 3);
  CHECK_THROWS_AS(treatment_score(std::vector<double>(4, 0.0)), std::invalid_argument);
}

TEST_CASE("alternative mechanisms read their own coordinates") {
  auto x = zeros();
  // ood2 uses x6..x10, so perturbing x1..x5 must not move it
  const double s2 = treatment_score(x, Mechanism::ood2);
  x[0] = 10.0;
  CHECK(treatment_score(x, Mechanism::ood2) == s2);
  // ood3 at x = 0: 1 + 0 + 0 + 0 + 1
  CHECK(treatment_score(zeros(), Mechanism::ood3) == Approx(2.0));
}

TEST_CASE("threshold rule partitions random inputs") {
  cmle::Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> x(kFeatures);
    for (double& v : x) v = 3.0 * rng.normal();
    for (auto m : {Mechanism::observational, Mechanism::ood2, Mechanism::ood3}) {
      const int t = assign_treatment(x, m);
      const double s = treatment_score(x, m);
      CHECK(((t == 1) + (t == 2) + (t == 3)) == 1);
      CHECK((t == 1) == (s <= 4.0));
      CHECK((t == 3) == (s > 5.0));
    }
  }
}

TEST_CASE("outcome means at x = 0") {
  auto x = zeros();
  const auto m1 = outcome_mean(x, 1);
  CHECK(m1[0] == Approx(1.0 + std::numbers::e).epsilon(1e-14));
  CHECK(m1[0] == Approx(3.71828).epsilon(1e-5));
  CHECK(m1[1] == Approx(1.0 + std::sin(1.0)).epsilon(1e-14));
  const auto m2 = outcome_mean(x, 2);
  CHECK(m2[0] == Approx(1.0 + std::log(2.0) + std::exp(2.0)).epsilon(1e-14));
  CHECK(m2[0] == Approx(9.08221).epsilon(1e-5));
  CHECK(m2[1] == Approx(2.60245).epsilon(1e-5));
  CHECK_THROWS_AS(outcome_mean(x, 0), std::invalid_argument);
  CHECK_THROWS_AS(outcome_mean(x, 4), std::invalid_argument);
}

TEST_CASE("oracle predictor has expected squared error 2") {
  const Dataset d = sample_dataset({20000, 99, Variant::observational});
  double s = 0.0, s2 = 0.0;
  for (const auto& e : d.examples) {
    const auto mu = outcome_mean(e.x, e.t);
    const double l = (e.y[0] - mu[0]) * (e.y[0] - mu[0]) + (e.y[1] - mu[1]) * (e.y[1] - mu[1]);
    s += l;
    s2 += l * l;
  }
  const double n = static_cast<double>(d.size());
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  CHECK(std::abs(mean - 2.0) < 3.0 * se);
}

TEST_CASE("sampling is seeded and deterministic") {
  for (auto v : {Variant::observational, Variant::counterfactual, Variant::interventional, Variant::ood1,
                 Variant::ood2, Variant::ood3, Variant::discrete_toy}) {
    CAPTURE(to_string(v));
    const Dataset a = sample_dataset({50, 17, v});
    const Dataset b = sample_dataset({50, 17, v});
    const Dataset c = sample_dataset({50, 18, v});
    CHECK(a.size() == 50);
    CHECK(a.same_records(b));
    CHECK(dataset_csv(a) == dataset_csv(b));
    CHECK_FALSE(a.same_records(c));
  }
  CHECK_THROWS_AS(sample_dataset({0, 1, Variant::observational}), std::invalid_argument);
}

TEST_CASE("interventional treatments are uniform") {
  const Dataset d = sample_dataset({30000, 5, Variant::interventional});
  std::array<double, 3> counts{};
  for (const auto& e : d.examples) counts[static_cast<std::size_t>(e.t - 1)] += 1.0;
  const double n = 30000.0, p = 1.0 / 3.0;
  const double sigma = std::sqrt(n * p * (1 - p));
  double chi2 = 0.0;
  for (double c : counts) {
    CHECK(std::abs(c - n * p) <= 3.0 * sigma);
    chi2 += (c - n * p) * (c - n * p) / (n * p);
  }
  // chi-square critical value, 2 degrees of freedom, alpha = 0.01
  CHECK(chi2 < 9.2103);
}

TEST_CASE("observational treatment shares satisfy overlap") {
  const Dataset d = sample_dataset({10000, 6, Variant::observational});
  std::array<double, 3> share{};
  for (const auto& e : d.examples) share[static_cast<std::size_t>(e.t - 1)] += 1.0 / 10000.0;
  for (double s : share) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("counterfactual records are consistent with observational draws") {
  const Dataset obs = sample_dataset({500, 23, Variant::observational});
  const Dataset cf = sample_dataset({500, 23, Variant::counterfactual});
  REQUIRE(cf.counterfactuals.size() == 500);
  for (std::size_t i = 0; i < 500; ++i) {
    const auto& o = obs.examples[i];
    const auto& c = cf.counterfactuals[i];
    CHECK(c.x == o.x);
    CHECK(c.factual_t == o.t);
    CHECK(c.outcome(c.factual_t) == o.y);
  }
}

TEST_CASE("ood variants use their mechanisms") {
  const Dataset d2 = sample_dataset({300, 8, Variant::ood2});
  for (const auto& e : d2.examples) CHECK(e.t == assign_treatment(e.x, Mechanism::ood2));
  const Dataset d3 = sample_dataset({300, 8, Variant::ood3});
  for (const auto& e : d3.examples) CHECK(e.t == assign_treatment(e.x, Mechanism::ood3));
}

TEST_CASE("discrete toy") {
  std::vector<double> x(kToyFeatures, 0.0);
  x[0] = 0.5;
  x[1] = 0.25;
  x[2] = 0.25;
  CHECK(toy_treatment(x) == 1);
  x[0] = -0.5;
  CHECK(toy_treatment(x) == 2);

  const Dataset d = sample_discrete_toy({200, 4, Variant::discrete_toy});
  for (const auto& e : d.toy) {
    CHECK(e.t == toy_treatment(e.x));
    CHECK(e.y >= 0);
    CHECK(e.y < kToyClasses);
  }
  CHECK(sample_discrete_toy({200, 4, Variant::discrete_toy}).same_records(d));
  CHECK_THROWS_AS(sample_discrete_toy({10, 4, Variant::observational}), std::invalid_argument);

  // empirical class frequencies for a fixed (x, t)
  std::vector<double> xf{0.3, -1.2, 0.7, 0.1, 2.0, -0.4, 0.0, 1.1, -0.9, 0.5};
  for (int t = 1; t <= 2; ++t) {
    const auto p = toy_probabilities(xf, t);
    cmle::Rng rng(77 + static_cast<std::uint64_t>(t));
    std::array<double, kToyClasses> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample_toy_class(xf, t, rng))] += 1.0;
    double total = 0.0;
    for (std::size_t c = 0; c < kToyClasses; ++c) {
      total += p[c];
      const double sigma = std::sqrt(n * p[c] * (1 - p[c]));
      CHECK(std::abs(counts[c] - n * p[c]) <= 3.0 * sigma);
    }
    CHECK(total == Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("csv round trip and schema") {
  for (auto v : {Variant::observational, Variant::counterfactual, Variant::ood2, Variant::discrete_toy}) {
    CAPTURE(to_string(v));
    const Dataset d = sample_dataset({25, 3, v});
    const auto path = temp_file(std::string(to_string(v)) + ".csv");
    write_dataset(d, path);
    const Dataset back = read_dataset(path, v == Variant::ood2 ? std::optional(v) : std::nullopt);
    CHECK(back.variant == v);
    CHECK(back.same_records(d));
  }
  const Dataset cf = sample_dataset({10, 7, Variant::counterfactual});
  const std::string text = dataset_csv(cf);
  const auto first_nl = text.find('\n');
  const std::string header = text.substr(0, first_nl);
  CHECK(std::count(header.begin(), header.end(), ',') + 1 == 107);
  CHECK(header.ends_with(",x99,factual_t,y1_0,y1_1,y2_0,y2_1,y3_0,y3_1"));
  CHECK(parse_dataset_csv(text).counterfactuals.size() == 10);
  for (const auto& r : parse_dataset_csv(text).counterfactuals) CHECK(r.outcomes.size() == 3);

  const std::string obs = dataset_csv(sample_dataset({3, 7, Variant::observational}));
  CHECK(obs.substr(0, 10) == "x0,x1,x2,x");
  CHECK(obs.substr(0, obs.find('\n')).ends_with(",x99,t,y0,y1"));
}

TEST_CASE("csv parse errors") {
  CHECK_THROWS_AS(parse_dataset_csv(""), ParseError);
  CHECK_THROWS_WITH_AS(parse_dataset_csv("a,b\n1,2\n"), doctest::Contains("line 1"), ParseError);

  std::string good = dataset_csv(sample_dataset({2, 1, Variant::observational}));
  // drop the last field on the final row
  std::string bad = good.substr(0, good.rfind(','));
  bad += "\n";
  CHECK_THROWS_WITH_AS(parse_dataset_csv(bad), doctest::Contains("line 3: expected 103 columns, found 102"),
                       ParseError);

  const auto path = temp_file("empty.csv");
  { std::ofstream f(path); }
  CHECK_THROWS_AS(read_dataset(path), ParseError);
  CHECK_THROWS_AS(read_dataset(temp_file("does_not_exist.csv")), std::runtime_error);
}

TEST_CASE("variant names") {
  CHECK(parse_variant("discrete_toy") == Variant::discrete_toy);
  CHECK(parse_variant("ood3") == Variant::ood3);
  CHECK_THROWS_AS(parse_variant("ood4"), std::invalid_argument);
}
