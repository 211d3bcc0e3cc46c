#pragma once

// Training objectives on mini-batches:
//
//   mle        (1/B) sum_i L(x_i, t_i, y_i)
//   implicit   (1/B) sum_i L_i / p(t_i)
//              + alpha * sum_j (1 - p_j) <T*_j, M_j(Phi)>
//   explicit   (1/B) sum_i [ L_i + alpha * J(k_i, x_i, y(x_i, k_i)) ]
//
// L is the squared error summed over both outcome coordinates. p_j = u_j / n
// uses batch or dataset counts (wass_marginals). T*_j is the Sinkhorn plan
// between group t = j and the rest of the batch, frozen in the graph. k_i is
// uniform over the treatments other than t_i, y(x, k) = mu(x, k) + eps is a
// reparameterized draw, and J = -log p_phi(k | x, y) from a frozen classifier.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmle/autodiff.hpp"
#include "cmle/models.hpp"
#include "cmle/scm.hpp"
#include "cmle/sinkhorn.hpp"

namespace cmle {
class Rng;
}

namespace cmle::obj {

using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class Kind { mle, implicit, explicit_ };
enum class Estimator { reparam, gumbel, reinforce };
enum class PhiSource { observational, interventional };
enum class WassMarginals { batch, global };

std::string_view to_string(Kind v);
std::string_view to_string(Estimator v);
std::string_view to_string(PhiSource v);
std::string_view to_string(WassMarginals v);
// All throw std::invalid_argument on unknown names.
Kind parse_kind(std::string_view s);
Estimator parse_estimator(std::string_view s);
PhiSource parse_phi_source(std::string_view s);
WassMarginals parse_wass_marginals(std::string_view s);

struct ObjectiveConfig {
  Kind kind = Kind::mle;
  double alpha = 0.0;
  double gumbel_tau = 1.0;
  Estimator estimator = Estimator::reparam;
  PhiSource phi_source = PhiSource::observational;
  WassMarginals wass_marginals = WassMarginals::batch;

  void validate() const;
  friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

struct Batch {
  Tensor x;             // B x 100
  Tensor y;             // B x 2
  std::vector<int> t;   // 1..3
  std::array<std::size_t, scm::kTreatments> counts{};          // u_j within the batch
  std::array<std::size_t, scm::kTreatments> dataset_counts{};  // u_j over the training set
  std::size_t dataset_size = 0;

  std::size_t size() const { return t.size(); }
  // p_j = u_j / n under the chosen marginals.
  std::array<double, scm::kTreatments> shares(WassMarginals marginals) const;
};

// Gathers rows of a training set. dataset_counts/size come from the full set.
Batch make_batch(const std::vector<scm::Example>& data, std::span<const std::size_t> rows);

struct LossParts {
  Var total;
  double factual = 0.0;  // value of the data term
  double penalty = 0.0;  // value of the regularizer before alpha
  std::size_t sinkhorn_floor_hits = 0;
};

// Per-class plans reused across evaluations (e.g. for finite differences).
// Empty slots are filled on first use.
struct FrozenPlans {
  std::array<std::optional<ot::TransportPlan>, scm::kTreatments> plans;
};

LossParts mle_batch_loss(const nn::BoundOutcome& model, const Batch& batch);
LossParts implicit_cmle_batch_loss(const nn::BoundOutcome& model, const Batch& batch, const ObjectiveConfig& config,
                                   FrozenPlans* frozen = nullptr);

// k uniform on {1..m} \ {t}; always consumes exactly one uniform.
int sample_kt(int t, int m, Rng& rng);

// Counterfactual draws for one explicit step: k per example and eps (B x 2).
struct ExplicitNoise {
  std::vector<int> k;
  Tensor eps;
};
// Fixed consumption: per example one uniform for k, then two normals.
ExplicitNoise sample_explicit_noise(std::span<const int> t, Rng& rng);

// y = mu + eps; the gradient reaches mu through the identity.
Var reparam_sample(Var mu, const Tensor& eps);
std::array<double, 2> reparam_sample(std::array<double, 2> mu, Rng& rng);

LossParts explicit_cmle_batch_loss(const nn::BoundOutcome& model, const nn::BoundClassifier& classifier,
                                   const Batch& batch, const ObjectiveConfig& config, const ExplicitNoise& noise);

// Relaxed one-hot z = softmax((log pi + g) / tau) for one probability vector.
// Zero entries of pi are floored at 1e-12 and counted in floor_hits.
std::vector<double> gumbel_softmax(std::span<const double> pi, double tau, Rng& rng,
                                   std::size_t* floor_hits = nullptr);
// Tape form on row-wise log-probabilities with given Gumbel noise.
Var gumbel_softmax(Var log_pi, double tau, const Tensor& gumbel_noise);

// Score-function estimate for one draw y ~ softmax(logits(params)):
// J(y) * grad log p(y). logits returns a 1 x V row.
using LogitsFunction = std::function<Var(Tape&, std::span<const Var>)>;
struct ReinforceEstimate {
  int y = 0;  // 0-based category
  double weight = 0.0;
  std::vector<Tensor> grad;
};
ReinforceEstimate reinforce_grad(const LogitsFunction& logits, std::span<const Tensor> params,
                                 const std::function<double(int)>& J, Rng& rng);
// Toy form: y ~ p_theta(. | x, k), J = -log p_phi(k | x, onehot(y)).
ReinforceEstimate reinforce_grad(const nn::ToyOutcomeModel& model, const nn::Classifier& classifier,
                                 std::span<const double> x, int t, int k, Rng& rng);

// Discrete-toy batch for the Gumbel-softmax and REINFORCE pipelines.
struct ToyBatch {
  Tensor x;  // B x 10
  std::vector<int> t;  // 1..2
  std::vector<int> y;  // 0..7
};
struct ToyNoise {
  std::vector<int> k;
  Tensor gumbel;              // B x classes
  std::vector<double> uniforms;  // inverse-CDF draws for REINFORCE
};
ToyNoise sample_toy_noise(std::span<const int> t, std::size_t classes, Rng& rng);
// Categorical NLL plus alpha * J through the configured estimator. For
// REINFORCE the returned value is a surrogate whose gradient is the estimate.
LossParts toy_explicit_batch_loss(const nn::ToyOutcomeModel& model, std::span<const Var> vars,
                                  const nn::BoundClassifier& classifier, const ToyBatch& batch,
                                  const ObjectiveConfig& config, const ToyNoise& noise);

struct BoundConstants {
  std::vector<double> eta;  // per treatment
  double mu = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  int m = 0;
};
BoundConstants bound_constants(std::span<const double> p_t, double delta1, double delta2, int m);

struct EpsilonEstimates {
  // Absent when the corresponding record set is empty.
  std::array<std::optional<double>, scm::kTreatments> factual;
  std::array<std::optional<double>, scm::kTreatments> counterfactual;
  std::array<double, scm::kTreatments> factual_se{};
  std::array<double, scm::kTreatments> counterfactual_se{};
};
EpsilonEstimates epsilon_estimates(const nn::OutcomeModel& model, const std::vector<scm::CounterfactualExample>& data);
// Same estimates for an arbitrary predictor mu(x, t).
using Predictor = std::function<std::array<double, 2>(std::span<const double>, int)>;
EpsilonEstimates epsilon_estimates(const Predictor& predict, const std::vector<scm::CounterfactualExample>& data);

struct DecompositionResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double se = 0.0;
  double z = 0.0;
};
// lhs = mean_x sum_t L(x, t, y_t); rhs = sum_t [p_t eps_F^t + (1 - p_t) eps_CF^t]
// with p_t the population treatment marginal; se by linearization.
DecompositionResult decomposition_check(const Predictor& predict, const std::vector<scm::CounterfactualExample>& data,
                                        std::span<const double> p_t);
DecompositionResult decomposition_check(const nn::OutcomeModel& model,
                                        const std::vector<scm::CounterfactualExample>& data);

}  // namespace cmle::obj
