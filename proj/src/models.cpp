#include "cmle/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "cmle/rng.hpp"

namespace cmle::nn {

namespace {

void check_sizes(const std::vector<std::size_t>& sizes) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  for (std::size_t s : sizes) {
    if (s == 0) throw std::invalid_argument("Mlp: layer sizes must be positive");
  }
}

}  // namespace

Mlp::Mlp(std::vector<std::size_t> sizes, bool activate_output)
    : sizes_(std::move(sizes)), activate_output_(activate_output) {
  check_sizes(sizes_);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    params_.emplace_back(sizes_[l], sizes_[l + 1]);
    params_.emplace_back(1, sizes_[l + 1]);
  }
}

Mlp::Mlp(std::vector<std::size_t> sizes, bool activate_output, Rng& rng)
    : Mlp(std::move(sizes), activate_output) {
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
    for (double& v : params_[2 * l].values()) v = (2.0 * rng.uniform() - 1.0) * bound;
    for (double& v : params_[2 * l + 1].values()) v = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

std::vector<Var> Mlp::bind(Tape& tape, bool trainable) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const Tensor& p : params_) vars.push_back(trainable ? tape.parameter(p) : tape.constant(p));
  return vars;
}

Var Mlp::forward(Var x, std::span<const Var> vars) const {
  if (vars.size() != params_.size()) throw std::invalid_argument("Mlp::forward: parameter count mismatch");
  if (x.value().cols() != input_dim()) {
    throw std::invalid_argument("Mlp::forward: input " + x.value().shape_string() + " but layer expects " +
                                std::to_string(input_dim()) + " columns");
  }
  Var h = x;
  const std::size_t layers = params_.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add_row(ad::matmul(h, vars[2 * l]), vars[2 * l + 1]);
    if (l + 1 < layers || activate_output_) h = ad::tanh(h);
  }
  return h;
}

Tensor Mlp::apply(const Tensor& x) const {
  if (x.cols() != input_dim()) throw std::invalid_argument("Mlp::apply: input width mismatch");
  Tensor h = x;
  const std::size_t layers = params_.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor& w = params_[2 * l];
    const Tensor& b = params_[2 * l + 1];
    Tensor out(h.rows(), w.cols());
    ad::gemm_acc(h, w, out);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row_span(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
    }
    if (l + 1 < layers || activate_output_) {
      for (double& v : out.values()) v = std::tanh(v);
    }
    h = std::move(out);
  }
  return h;
}

Tensor one_hot(std::span<const int> labels, std::size_t classes, int base) {
  Tensor out(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int k = labels[i] - base;
    if (k < 0 || static_cast<std::size_t>(k) >= classes) {
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) + " outside 1.." +
                                  std::to_string(classes));
    }
    out(i, static_cast<std::size_t>(k)) = 1.0;
  }
  return out;
}

namespace {

std::vector<std::size_t> head_sizes(const Architecture& arch, std::size_t treatments) {
  std::vector<std::size_t> s{arch.encoder.back() + treatments};
  s.insert(s.end(), arch.head_hidden.begin(), arch.head_hidden.end());
  s.push_back(2);
  return s;
}

std::string param_name(const std::string& block, std::size_t i) {
  return block + "." + std::to_string(i / 2) + (i % 2 == 0 ? ".weight" : ".bias");
}

void append_refs(std::vector<ParamRef>& out, const std::string& block, Mlp& mlp) {
  auto& p = mlp.params();
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({param_name(block, i), &p[i]});
}

}  // namespace

OutcomeModel::OutcomeModel(const Architecture& arch)
    : encoder(arch.encoder, true), head(head_sizes(arch, 3), false) {}

OutcomeModel::OutcomeModel(const Architecture& arch, Rng& rng)
    : encoder(arch.encoder, true, rng), head(head_sizes(arch, 3), false, rng) {}

std::vector<ParamRef> OutcomeModel::parameters() {
  std::vector<ParamRef> refs;
  append_refs(refs, "encoder", encoder);
  append_refs(refs, "head", head);
  return refs;
}

BoundOutcome bind(Tape& tape, const OutcomeModel& model, bool trainable) {
  return {&model, &tape, model.encoder.bind(tape, trainable), model.head.bind(tape, trainable)};
}

Var encode(const BoundOutcome& m, Var x) { return m.model->encoder.forward(x, m.encoder); }

Var head_forward(const BoundOutcome& m, Var r, std::span<const int> t) {
  if (t.size() != r.value().rows()) throw std::invalid_argument("head_forward: one treatment per row required");
  Var in = ad::concat(r, m.tape->constant(one_hot(t, m.model->treatments())));
  Var out = m.model->head.forward(in, m.head);
  const auto& s = m.model->out_scale;
  const auto& b = m.model->out_shift;
  Var scaled = ad::matmul(out, m.tape->constant(Tensor::matrix({{s[0], 0.0}, {0.0, s[1]}})));
  return ad::add_row(scaled, m.tape->constant(Tensor::row({b[0], b[1]})));
}

Var outcome_forward(const BoundOutcome& m, Var x, std::span<const int> t) { return head_forward(m, encode(m, x), t); }

Var squared_error_rows(Var mu, Var y) {
  Var d = ad::square(ad::sub(y, mu));
  return ad::matmul(d, mu.tape->constant(Tensor(d.value().cols(), 1, 1.0)));
}

Tensor predict_batch(const OutcomeModel& model, const Tensor& x, std::span<const int> t) {
  if (t.size() != x.rows()) throw std::invalid_argument("predict_batch: one treatment per row required");
  const Tensor r = model.encoder.apply(x);
  const Tensor oh = one_hot(t, model.treatments());
  Tensor in(r.rows(), r.cols() + oh.cols());
  for (std::size_t i = 0; i < r.rows(); ++i) {
    auto dst = in.row_span(i);
    auto a = r.row_span(i);
    auto b = oh.row_span(i);
    std::copy(a.begin(), a.end(), dst.begin());
    std::copy(b.begin(), b.end(), dst.begin() + static_cast<long>(a.size()));
  }
  Tensor out = model.head.apply(in);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t c = 0; c < 2; ++c) out(i, c) = out(i, c) * model.out_scale[c] + model.out_shift[c];
  }
  return out;
}

std::array<double, 2> predict(const OutcomeModel& model, std::span<const double> x, int t) {
  const int ts[1] = {t};
  Tensor mu = predict_batch(model, Tensor(1, x.size(), {x.begin(), x.end()}), ts);
  return {mu(0, 0), mu(0, 1)};
}

double outcome_nll(const OutcomeModel& model, std::span<const double> x, int t, std::span<const double> y) {
  if (y.size() != 2) throw std::invalid_argument("outcome_nll: y must have 2 coordinates");
  const auto mu = predict(model, x, t);
  const double d0 = y[0] - mu[0], d1 = y[1] - mu[1];
  return d0 * d0 + d1 * d1;
}

namespace {

std::vector<std::size_t> with_ends(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

}  // namespace

Classifier::Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes)
    : net(with_ends(input_dim, hidden, classes), false) {}

Classifier::Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes, Rng& rng)
    : net(with_ends(input_dim, hidden, classes), false, rng) {}

Classifier Classifier::for_benchmark(const Architecture& arch, Rng& rng) {
  return Classifier(arch.encoder.front() + 2, arch.classifier_hidden, 3, rng);
}

std::vector<ParamRef> Classifier::parameters() {
  std::vector<ParamRef> refs;
  append_refs(refs, "net", net);
  return refs;
}

BoundClassifier bind(Tape& tape, const Classifier& model, bool trainable) {
  return {&model, &tape, model.net.bind(tape, trainable)};
}

Var classifier_log_probs(const BoundClassifier& c, Var x, Var y) {
  return ad::log_softmax(c.model->net.forward(ad::concat(x, y), c.net));
}

Var pick_log_prob(Var log_probs, std::span<const int> t) {
  Var picked = ad::mul(log_probs, log_probs.tape->constant(one_hot(t, log_probs.value().cols())));
  return ad::matmul(picked, log_probs.tape->constant(Tensor(picked.value().cols(), 1, 1.0)));
}

double classifier_logprob(const Classifier& c, std::span<const double> x, std::span<const double> y, int t) {
  Tape tape;
  auto b = bind(tape, c, false);
  Var lp = classifier_log_probs(b, tape.constant(Tensor(1, x.size(), {x.begin(), x.end()})),
                                tape.constant(Tensor(1, y.size(), {y.begin(), y.end()})));
  if (t < 1 || static_cast<std::size_t>(t) > c.classes()) {
    throw std::invalid_argument("classifier_logprob: t outside 1.." + std::to_string(c.classes()));
  }
  return lp.value()(0, static_cast<std::size_t>(t - 1));
}

ToyOutcomeModel::ToyOutcomeModel(std::size_t features, std::size_t treatments, std::size_t hidden,
                                 std::size_t classes, Rng& rng)
    : net({features + treatments, hidden, classes}, false, rng), treatments_(treatments) {}

ToyOutcomeModel ToyOutcomeModel::for_toy(Rng& rng) { return ToyOutcomeModel(10, 2, 16, 8, rng); }

std::vector<ParamRef> ToyOutcomeModel::parameters() {
  std::vector<ParamRef> refs;
  append_refs(refs, "net", net);
  return refs;
}

Var toy_logits(const ToyOutcomeModel& m, std::span<const Var> vars, Var x, std::span<const int> t) {
  return m.net.forward(ad::concat(x, x.tape->constant(one_hot(t, m.treatments()))), vars);
}

Classifier toy_classifier(Rng& rng) { return Classifier(10 + 8, {16}, 2, rng); }

// ---- checkpoints ----

namespace {

constexpr const char* kMagic = "cmle-checkpoint";
constexpr int kVersion = 1;

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
  char buf[40];
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", t(r, c));
      if (c) os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

void write_block(std::ostream& os, const std::string& block, const Mlp& mlp) {
  for (std::size_t i = 0; i < mlp.params().size(); ++i) write_tensor(os, param_name(block, i), mlp.params()[i]);
}

void write_header(std::ostream& os, const char* kind) { os << kMagic << ' ' << kVersion << "\nkind " << kind << '\n'; }

struct Parsed {
  std::string kind;
  std::vector<std::pair<std::string, std::vector<double>>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

Parsed parse(std::istream& is) {
  Parsed p;
  std::string word;
  int version = 0;
  if (!(is >> word >> version) || word != kMagic) throw CheckpointError("checkpoint: missing header");
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  if (!(is >> word >> p.kind) || word != "kind") throw CheckpointError("checkpoint: missing kind line");
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ls >> word;
    if (word == "end") return p;
    if (word == "meta") {
      std::string key;
      ls >> key;
      std::vector<double> vals;
      double v;
      while (ls >> v) vals.push_back(v);
      p.meta.emplace_back(key, std::move(vals));
    } else if (word == "tensor") {
      std::string name;
      std::size_t rows = 0, cols = 0;
      if (!(ls >> name >> rows >> cols)) throw CheckpointError("checkpoint: bad tensor line '" + line + "'");
      Tensor t(rows, cols);
      for (double& v : t.values()) {
        if (!(is >> v)) throw CheckpointError("checkpoint: truncated tensor " + name);
      }
      p.tensors.emplace_back(name, std::move(t));
    } else {
      throw CheckpointError("checkpoint: unexpected line '" + line + "'");
    }
  }
  throw CheckpointError("checkpoint: missing end marker");
}

// Rebuilds an Mlp from the tensors named "<block>.<i>.weight|bias".
Mlp restore_mlp(const Parsed& p, const std::string& block, bool activate_output) {
  std::vector<Tensor> params;
  for (std::size_t i = 0;; ++i) {
    const std::string name = param_name(block, i);
    auto it = std::find_if(p.tensors.begin(), p.tensors.end(), [&](const auto& e) { return e.first == name; });
    if (it == p.tensors.end()) break;
    params.push_back(it->second);
  }
  if (params.empty() || params.size() % 2 != 0) throw CheckpointError("checkpoint: incomplete block " + block);
  std::vector<std::size_t> sizes{params[0].rows()};
  for (std::size_t l = 0; l < params.size(); l += 2) {
    if (params[l].rows() != sizes.back() || params[l + 1].rows() != 1 || params[l + 1].cols() != params[l].cols()) {
      throw CheckpointError("checkpoint: inconsistent shapes in block " + block);
    }
    sizes.push_back(params[l].cols());
  }
  Mlp mlp(sizes, activate_output);
  mlp.params() = std::move(params);
  return mlp;
}

}  // namespace

void save_checkpoint(std::ostream& os, const OutcomeModel& model) {
  write_header(os, "outcome");
  char buf[96];
  std::snprintf(buf, sizeof buf, "meta out_scale %.17g %.17g\n", model.out_scale[0], model.out_scale[1]);
  os << buf;
  std::snprintf(buf, sizeof buf, "meta out_shift %.17g %.17g\n", model.out_shift[0], model.out_shift[1]);
  os << buf;
  write_block(os, "encoder", model.encoder);
  write_block(os, "head", model.head);
  os << "end\n";
}

void save_checkpoint(std::ostream& os, const Classifier& model) {
  write_header(os, "classifier");
  write_block(os, "net", model.net);
  os << "end\n";
}

OutcomeModel load_outcome_checkpoint(std::istream& is) {
  Parsed p = parse(is);
  if (p.kind != "outcome") throw CheckpointError("checkpoint: expected kind outcome, found " + p.kind);
  OutcomeModel model;
  model.encoder = restore_mlp(p, "encoder", true);
  model.head = restore_mlp(p, "head", false);
  if (model.head.input_dim() != model.encoder.output_dim() + model.treatments() || model.head.output_dim() != 2) {
    throw CheckpointError("checkpoint: head shape does not fit the encoder");
  }
  for (const auto& [key, vals] : p.meta) {
    if (vals.size() != 2) throw CheckpointError("checkpoint: meta " + key + " needs 2 values");
    if (key == "out_scale") model.out_scale = {vals[0], vals[1]};
    else if (key == "out_shift") model.out_shift = {vals[0], vals[1]};
    else throw CheckpointError("checkpoint: unknown meta key " + key);
  }
  return model;
}

Classifier load_classifier_checkpoint(std::istream& is) {
  Parsed p = parse(is);
  if (p.kind != "classifier") throw CheckpointError("checkpoint: expected kind classifier, found " + p.kind);
  Classifier c;
  c.net = restore_mlp(p, "net", false);
  return c;
}

}  // namespace cmle::nn
