#pragma once

// Seeded training runs: Adam, classifier pretraining, best-validation
// checkpoint selection and MSE evaluation on the five test sets.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cmle/models.hpp"
#include "cmle/objectives.hpp"
#include "cmle/scm.hpp"

namespace cmle::train {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// Non-finite loss or gradient during optimization.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  // Most recent loss values before the failure.
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

enum class TestSet { observational, counterfactual, ood1, ood2, ood3 };
inline constexpr std::array<TestSet, 5> kTestSets{TestSet::observational, TestSet::counterfactual, TestSet::ood1,
                                                   TestSet::ood2, TestSet::ood3};
std::string_view to_string(TestSet s);
scm::Variant variant_of(TestSet s);

// Optional CSV inputs; absent entries are generated from the run seed.
struct DatasetPaths {
  std::optional<std::string> train;
  std::optional<std::string> validation;
  std::array<std::optional<std::string>, kTestSets.size()> test;
  friend bool operator==(const DatasetPaths&, const DatasetPaths&) = default;
};

struct TrainConfig {
  obj::ObjectiveConfig objective;
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 60;
  std::uint64_t seed = 0;
  nn::Architecture architecture;
  std::size_t n_train = 10000;
  std::size_t n_val = 5000;
  std::size_t n_test = 5000;
  // Data is drawn from the run seed, so every seed sees fresh datasets.
  bool resample_data = true;
  std::uint64_t data_seed = 0;  // used when resample_data is false
  std::size_t classifier_epochs = 30;
  DatasetPaths datasets;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  explicit AdamState(std::span<const nn::ParamRef> params);
};

// Bias-corrected Adam update in place. Throws DivergenceError naming the
// parameter block when a gradient is non-finite, before touching any state.
void adam_step(AdamState& state, std::span<const nn::ParamRef> params, std::span<const Tensor> grads, double lr);

// Every dataset one run touches.
struct RunData {
  std::vector<scm::Example> train;
  std::vector<scm::Example> validation;
  std::array<scm::Dataset, kTestSets.size()> test;
};
// Loads configured paths (std::filesystem errors propagate as missing input)
// and samples the rest from the data seed.
RunData prepare_data(const TrainConfig& config);

struct ClassifierResult {
  nn::Classifier classifier;
  double heldout_accuracy = 0.0;
  std::size_t train_size = 0;
};
// Cross-entropy training of p(t | x, y). The observational source trains on
// the run's training set and scores on its validation set; the
// interventional source draws fresh interventional sets of the same sizes.
ClassifierResult pretrain_classifier(const TrainConfig& config, obj::PhiSource source, const RunData& data);

struct RunResult {
  nn::OutcomeModel model;  // best-validation parameters
  std::array<double, kTestSets.size()> mse{};
  std::vector<double> loss_trace;  // one value per optimizer step
  double best_validation_mse = 0.0;
  std::size_t best_epoch = 0;  // 0 means the initial parameters
  std::size_t sinkhorn_floor_hits = 0;
  std::uint64_t seed = 0;
  TrainConfig config;

  double mse_of(TestSet s) const { return mse[static_cast<std::size_t>(s)]; }
};

// classifier is required for the explicit objective and ignored otherwise.
RunResult train_run(const TrainConfig& config, const RunData& data, const nn::Classifier* classifier = nullptr);

// Mean of ||y - mu(x, t)||^2 over evaluation pairs. Counterfactual sets
// contribute every (record, non-factual t) pair.
double evaluate_mse(const nn::OutcomeModel& model, const scm::Dataset& dataset);
double evaluate_mse(const obj::Predictor& predict, const scm::Dataset& dataset);
double evaluate_mse(const nn::OutcomeModel& model, const std::vector<scm::Example>& examples);

}  // namespace cmle::train
