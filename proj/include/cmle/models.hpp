#pragma once

// MLP building blocks and the three networks of the benchmark:
//
//   encoder     x (100)          -> r (64)        tanh on every layer
//   head        [r ; onehot(t)]  -> mu (2)        tanh hidden, linear output
//   classifier  [x ; y]          -> logits (3)    tanh hidden, log-softmax
//
// The outcome model's prediction is mu = head_out * out_scale + out_shift
// with a fixed per-coordinate affine (set from training targets, not trained).
//
// Discrete toy counterparts work on 10 features, 2 treatments, 8 classes.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmle/autodiff.hpp"

namespace cmle {
class Rng;
}

namespace cmle::nn {

using ad::Tape;
using ad::Tensor;
using ad::Var;

class Mlp {
 public:
  Mlp() = default;
  // All-zero parameters.
  Mlp(std::vector<std::size_t> sizes, bool activate_output);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  Mlp(std::vector<std::size_t> sizes, bool activate_output, Rng& rng);

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  bool activate_output() const { return activate_output_; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }

  // W0, b0, W1, b1, ...; W_l is fan_in x fan_out, b_l is 1 x fan_out.
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  // Registers the parameters on the tape, as gradient leaves or constants.
  std::vector<Var> bind(Tape& tape, bool trainable) const;
  // vars as returned by bind().
  Var forward(Var x, std::span<const Var> vars) const;
  // Tape-free forward pass; same arithmetic as forward().
  Tensor apply(const Tensor& x) const;

 private:
  std::vector<std::size_t> sizes_;
  bool activate_output_ = false;
  std::vector<Tensor> params_;
};

struct Architecture {
  std::vector<std::size_t> encoder{100, 128, 64};
  std::vector<std::size_t> head_hidden{64};
  std::vector<std::size_t> classifier_hidden{128, 64};
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// A flat, named view of a model's trainable tensors, in a fixed order.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};

class OutcomeModel {
 public:
  OutcomeModel() = default;
  explicit OutcomeModel(const Architecture& arch);  // zero parameters
  OutcomeModel(const Architecture& arch, Rng& rng);

  std::size_t treatments() const { return treatments_; }
  std::size_t representation_dim() const { return encoder.output_dim(); }
  std::vector<ParamRef> parameters();

  Mlp encoder;
  Mlp head;
  std::array<double, 2> out_scale{1.0, 1.0};
  std::array<double, 2> out_shift{0.0, 0.0};

 private:
  std::size_t treatments_ = 3;
};

// Outcome-model parameters registered on one tape.
struct BoundOutcome {
  const OutcomeModel* model = nullptr;
  Tape* tape = nullptr;
  std::vector<Var> encoder;
  std::vector<Var> head;
};
BoundOutcome bind(Tape& tape, const OutcomeModel& model, bool trainable = true);

// x is B x 100; t holds treatments in 1..3, one per row.
Var encode(const BoundOutcome& m, Var x);
Var head_forward(const BoundOutcome& m, Var r, std::span<const int> t);
Var outcome_forward(const BoundOutcome& m, Var x, std::span<const int> t);
// Row-wise ||y - mu||^2 summed over coordinates: B x 1.
Var squared_error_rows(Var mu, Var y);
// Scalar L(x, t, y) for a single example.
double outcome_nll(const OutcomeModel& model, std::span<const double> x, int t, std::span<const double> y);
// Tape-free predictions: B x 2 for rows of x, or a single example.
Tensor predict_batch(const OutcomeModel& model, const Tensor& x, std::span<const int> t);
std::array<double, 2> predict(const OutcomeModel& model, std::span<const double> x, int t);

class Classifier {
 public:
  Classifier() = default;
  // input_dim = features + outcome dim (102 for the benchmark).
  Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes);
  Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes, Rng& rng);
  static Classifier for_benchmark(const Architecture& arch, Rng& rng);

  std::size_t classes() const { return net.output_dim(); }
  std::vector<ParamRef> parameters();

  Mlp net;
};

struct BoundClassifier {
  const Classifier* model = nullptr;
  Tape* tape = nullptr;
  std::vector<Var> net;
};
BoundClassifier bind(Tape& tape, const Classifier& model, bool trainable);

// B x classes row-wise log p(T | x, y).
Var classifier_log_probs(const BoundClassifier& c, Var x, Var y);
// Per-row log p(T = t_i | x_i, y_i) as B x 1; t is 1-based.
Var pick_log_prob(Var log_probs, std::span<const int> t);
double classifier_logprob(const Classifier& c, std::span<const double> x, std::span<const double> y, int t);

// Discrete toy outcome model: [x ; onehot(t)] -> logits over classes.
class ToyOutcomeModel {
 public:
  ToyOutcomeModel() = default;
  ToyOutcomeModel(std::size_t features, std::size_t treatments, std::size_t hidden, std::size_t classes, Rng& rng);
  static ToyOutcomeModel for_toy(Rng& rng);

  std::size_t treatments() const { return treatments_; }
  std::size_t classes() const { return net.output_dim(); }
  std::vector<ParamRef> parameters();

  Mlp net;

 private:
  std::size_t treatments_ = 2;
};

// B x classes logits.
Var toy_logits(const ToyOutcomeModel& m, std::span<const Var> vars, Var x, std::span<const int> t);

// Toy classifier consumes [x ; z] with z a one-hot or relaxed class vector.
Classifier toy_classifier(Rng& rng);

// Plain-text checkpoint:
//
//   cmle-checkpoint 1
//   kind <outcome|classifier>
//   meta <key> <values...>        (outcome: out_scale, out_shift)
//   tensor <name> <rows> <cols>
//   <rows lines of cols values, %.17g>
//   ...
//   end
//
// Tensor names follow "<block>.<layer>.weight|bias" with blocks encoder,
// head, net. Layer sizes are recovered from the tensor shapes.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(std::ostream& os, const OutcomeModel& model);
void save_checkpoint(std::ostream& os, const Classifier& model);
OutcomeModel load_outcome_checkpoint(std::istream& is);
Classifier load_classifier_checkpoint(std::istream& is);

Tensor one_hot(std::span<const int> labels, std::size_t classes, int base = 1);

}  // namespace cmle::nn
