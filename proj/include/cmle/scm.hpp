#pragma once

// Structural-causal-model simulator for the synthetic benchmark.
//
//   x ~ N(0, I_100)
//   t = threshold(s(x)),  s = g1(x1) + g2(x2) + g3(x3) + g4(x4) + g5(x5)
//   mu1 = g6(x1) + g7(x2) + g8(x3) + g11(x6, t) + g12(x7, t)
//   mu2 = g9(x4) + g10(x5) + g11(x8, t) + g13(x9, t)
//   y ~ N((mu1, mu2), I_2)
//
// Indices above are 1-based; code uses 0-based x[0..99].

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cmle {
class Rng;
}

namespace cmle::scm {

inline constexpr std::size_t kFeatures = 100;
inline constexpr std::size_t kOutcomeDim = 2;
inline constexpr int kTreatments = 3;

inline constexpr std::size_t kToyFeatures = 10;
inline constexpr int kToyTreatments = 2;
inline constexpr int kToyClasses = 8;

using Outcome = std::array<double, kOutcomeDim>;

enum class Variant { observational, counterfactual, interventional, ood1, ood2, ood3, discrete_toy };

std::string_view to_string(Variant v);
// Accepts the names above with '-' or '_' separators; throws std::invalid_argument.
Variant parse_variant(std::string_view name);

// How t is assigned from x.
enum class Mechanism { observational, ood2, ood3 };

struct Example {
  std::vector<double> x;
  int t = 1;
  Outcome y{};
  friend bool operator==(const Example&, const Example&) = default;
};

struct CounterfactualExample {
  std::vector<double> x;
  std::array<Outcome, kTreatments> outcomes{};  // outcomes[t - 1]
  int factual_t = 1;
  const Outcome& outcome(int t) const { return outcomes.at(static_cast<std::size_t>(t - 1)); }
  friend bool operator==(const CounterfactualExample&, const CounterfactualExample&) = default;
};

struct ToyExample {
  std::vector<double> x;
  int t = 1;
  int y = 0;  // class index in [0, kToyClasses)
  friend bool operator==(const ToyExample&, const ToyExample&) = default;
};

struct ScmConfig {
  std::size_t n = 1;
  std::uint64_t seed = 0;
  Variant variant = Variant::observational;
};

// Exactly one of the record vectors is populated, chosen by variant.
struct Dataset {
  Variant variant = Variant::observational;
  std::uint64_t seed = 0;
  std::string generator;

  std::vector<Example> examples;
  std::vector<CounterfactualExample> counterfactuals;
  std::vector<ToyExample> toy;

  std::size_t size() const;
  bool same_records(const Dataset& other) const;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// g_k for k in 1..13. k in {11,12,13} requires t, the rest forbid it.
double eval_g(int k, double x, std::optional<int> t = std::nullopt);

double treatment_score(std::span<const double> x, Mechanism mechanism = Mechanism::observational);
int threshold_treatment(double s);
int assign_treatment(std::span<const double> x, Mechanism mechanism);
Outcome outcome_mean(std::span<const double> x, int t);
// Monte-Carlo P(T = t) under the observational mechanism (t depends on x1..x5 only).
std::array<double, kTreatments> treatment_marginal(std::size_t draws = 4'000'000, std::uint64_t seed = 0x5EED);

Dataset sample_dataset(const ScmConfig& config);

// Discrete toy: x in R^10, t = 1 iff x1 + x2 + x3 > 0 (else 2),
// y ~ Categorical(softmax(W_t x + b_t)) with a fixed built-in W_t, b_t.
int toy_treatment(std::span<const double> x);
std::array<double, kToyClasses> toy_probabilities(std::span<const double> x, int t);
// Inverse-CDF draw from toy_probabilities; consumes one uniform.
int sample_toy_class(std::span<const double> x, int t, Rng& rng);
Dataset sample_discrete_toy(const ScmConfig& config);

// CSV with a fixed header per record kind; reals written with 17 significant digits.
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
std::string dataset_csv(const Dataset& dataset);
// The header determines the record kind. Plain records are tagged with
// variant_hint (default observational) since their header is shared.
Dataset read_dataset(const std::filesystem::path& path,
                     std::optional<Variant> variant_hint = std::nullopt);
Dataset parse_dataset_csv(std::string_view text, std::optional<Variant> variant_hint = std::nullopt);

}  // namespace cmle::scm
