#include "cmle/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace cmle::ad {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) +
                                " values do not fill shape " + shape_string());
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

double Tensor::item() const {
  if (rows_ != 1 || cols_ != 1) {
    throw std::invalid_argument("Tensor::item: expected 1x1, got " + shape_string());
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[' << rows_ << 'x' << cols_ << ']';
  return os.str();
}

void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* bp = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  // a: n x k, b: n x m, c: k x m
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* bi = pb + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      double* cp = pc + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

void gemm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  // a: n x m, b: k x m, c: n x k
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = pa + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = pb + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += ai[j] * bp[j];
      pc[i * k + p] += acc;
    }
  }
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::add_row: return "add_row";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat: return "concat";
    case OpKind::select_rows: return "select_rows";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::pairwise_distance: return "pairwise_distance";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::parameter(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

bool Gradients::contains(Var v) const { return v.id < present_.size() && present_[v.id]; }

const Tensor& Gradients::operator[](Var v) const { return at(v.id); }

const Tensor& Gradients::at(NodeId id) const {
  if (id >= present_.size() || !present_[id]) {
    throw std::out_of_range("Gradients: node " + std::to_string(id) + " is not a parameter leaf");
  }
  return grads_[id];
}

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                              b.shape_string());
}

void check_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
}

Var unary(OpKind op, Var a, Tensor out, double scalar = 0.0,
          std::vector<std::size_t> indices = {}) {
  Tape::Node n;
  n.indices = std::move(indices);
  n.op = op;
  n.inputs = {a.id, 0};
  n.arity = 1;
  n.value = std::move(out);
  n.requires_grad = a.tape->requires_grad(a.id);
  n.scalar = scalar;
  return a.tape->push(std::move(n));
}

Var binary(OpKind op, Var a, Var b, Tensor out) {
  Tape::Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.arity = 2;
  n.value = std::move(out);
  n.requires_grad = a.tape->requires_grad(a.id) || a.tape->requires_grad(b.id);
  return a.tape->push(std::move(n));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error("add", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return binary(OpKind::add, a, b, std::move(out));
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error("sub", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return binary(OpKind::sub, a, b, std::move(out));
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error("mul", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return binary(OpKind::mul, a, b, std::move(out));
}

Var scale(Var a, double c) {
  return unary(OpKind::scale, a, map(a.value(), [c](double v) { return c * v; }), c);
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.rows()) shape_error("matmul", x, y);
  Tensor out(x.rows(), y.cols());
  gemm_acc(x, y, out);
  return binary(OpKind::matmul, a, b, std::move(out));
}

Var add_row(Var a, Var bias) {
  check_same_tape(a, bias, "add_row");
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (b.rows() != 1 || b.cols() != x.cols()) shape_error("add_row", x, b);
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return binary(OpKind::add_row, a, bias, std::move(out));
}

Var relu(Var a) {
  return unary(OpKind::relu, a, map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }));
}

Var tanh(Var a) {
  return unary(OpKind::tanh, a, map(a.value(), [](double v) { return std::tanh(v); }));
}

Var exp(Var a) {
  return unary(OpKind::exp, a, map(a.value(), [](double v) { return std::exp(v); }));
}

Var log(Var a) {
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(x[i]) + " at flat index " +
                              std::to_string(i));
    }
  }
  return unary(OpKind::log, a, map(x, [](double v) { return std::log(v); }));
}

Var square(Var a) {
  return unary(OpKind::square, a, map(a.value(), [](double v) { return v * v; }));
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return unary(OpKind::sum, a, Tensor::scalar(s));
}

Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  return unary(OpKind::mean, a, Tensor::scalar(s / static_cast<double>(x.size())));
}

Var concat(Var a, Var b) {
  check_same_tape(a, b, "concat");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rows() != y.rows()) shape_error("concat", x, y);
  Tensor out(x.rows(), x.cols() + y.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto dst = out.row_span(r);
    std::copy(x.row_span(r).begin(), x.row_span(r).end(), dst.begin());
    std::copy(y.row_span(r).begin(), y.row_span(r).end(), dst.begin() + static_cast<long>(x.cols()));
  }
  return binary(OpKind::concat, a, b, std::move(out));
}

Var select_rows(Var a, std::vector<std::size_t> rows) {
  const Tensor& x = a.value();
  Tensor out(rows.size(), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) {
      throw std::invalid_argument("select_rows: row " + std::to_string(rows[r]) + " out of range for " +
                                  x.shape_string());
    }
    std::copy(x.row_span(rows[r]).begin(), x.row_span(rows[r]).end(), out.row_span(r).begin());
  }
  return unary(OpKind::select_rows, a, std::move(out), 0.0, std::move(rows));
}

namespace {

Tensor row_log_softmax(const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (double v : in) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    auto dst = out.row_span(r);
    for (std::size_t c = 0; c < in.size(); ++c) dst[c] = in[c] - lse;
  }
  return out;
}

}  // namespace

Var softmax(Var a) {
  Tensor out = row_log_softmax(a.value());
  for (double& v : out.values()) v = std::exp(v);
  return unary(OpKind::softmax, a, std::move(out));
}

Var log_softmax(Var a) { return unary(OpKind::log_softmax, a, row_log_softmax(a.value())); }

Var pairwise_distance(Var a, Var b) {
  check_same_tape(a, b, "pairwise_distance");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.cols()) shape_error("pairwise_distance", x, y);
  Tensor out(x.rows(), y.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row_span(i);
    for (std::size_t j = 0; j < y.rows(); ++j) {
      auto yj = y.row_span(j);
      double s = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) {
        const double d = xi[c] - yj[c];
        s += d * d;
      }
      out(i, j) = std::sqrt(s);
    }
  }
  return binary(OpKind::pairwise_distance, a, b, std::move(out));
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
  const Tensor& lv = value(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + lv.shape_string());
  }

  const std::size_t count = loss.id + 1;
  std::vector<Tensor> g(count);
  std::vector<bool> has(count, false);
  auto accum = [&](NodeId id) -> Tensor& {
    if (!has[id]) {
      const Tensor& v = nodes_[id].value;
      g[id] = Tensor(v.rows(), v.cols());
      has[id] = true;
    }
    return g[id];
  };
  g[loss.id] = Tensor::scalar(1.0);
  has[loss.id] = true;

  for (std::size_t k = count; k-- > 0;) {
    const Node& n = nodes_[k];
    if (!has[k] || !n.requires_grad || n.op == OpKind::leaf) continue;
    const Tensor& gy = g[k];
    const NodeId ia = n.inputs[0];
    const NodeId ib = n.inputs[1];
    const bool ga = nodes_[ia].requires_grad;
    const bool gb = n.arity == 2 && nodes_[ib].requires_grad;

    switch (n.op) {
      case OpKind::leaf:
        break;
      case OpKind::add: {
        if (ga) { Tensor& d = accum(ia); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i]; }
        if (gb) { Tensor& d = accum(ib); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i]; }
        break;
      }
      case OpKind::sub: {
        if (ga) { Tensor& d = accum(ia); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i]; }
        if (gb) { Tensor& d = accum(ib); for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gy[i]; }
        break;
      }
      case OpKind::mul: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        if (ga) { Tensor& d = accum(ia); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * y[i]; }
        if (gb) { Tensor& d = accum(ib); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * x[i]; }
        break;
      }
      case OpKind::scale: {
        if (ga) { Tensor& d = accum(ia); for (std::size_t i = 0; i < d.size(); ++i) d[i] += n.scalar * gy[i]; }
        break;
      }
      case OpKind::matmul: {
        if (ga) gemm_nt_acc(gy, nodes_[ib].value, accum(ia));
        if (gb) gemm_tn_acc(nodes_[ia].value, gy, accum(ib));
        break;
      }
      case OpKind::add_row: {
        if (ga) { Tensor& d = accum(ia); for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i]; }
        if (gb) {
          Tensor& d = accum(ib);
          for (std::size_t r = 0; r < gy.rows(); ++r) {
            auto row = gy.row_span(r);
            for (std::size_t c = 0; c < row.size(); ++c) d[c] += row[c];
          }
        }
        break;
      }
      case OpKind::relu: {
        const Tensor& x = nodes_[ia].value;
        Tensor& d = accum(ia);
        for (std::size_t i = 0; i < d.size(); ++i) if (x[i] > 0.0) d[i] += gy[i];
        break;
      }
      case OpKind::tanh: {
        Tensor& d = accum(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case OpKind::exp: {
        Tensor& d = accum(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * n.value[i];
        break;
      }
      case OpKind::log: {
        const Tensor& x = nodes_[ia].value;
        Tensor& d = accum(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] / x[i];
        break;
      }
      case OpKind::square: {
        const Tensor& x = nodes_[ia].value;
        Tensor& d = accum(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * x[i] * gy[i];
        break;
      }
      case OpKind::sum: {
        Tensor& d = accum(ia);
        const double s = gy[0];
        for (double& v : d.values()) v += s;
        break;
      }
      case OpKind::mean: {
        Tensor& d = accum(ia);
        const double s = gy[0] / static_cast<double>(d.size());
        for (double& v : d.values()) v += s;
        break;
      }
      case OpKind::concat: {
        const std::size_t ca = nodes_[ia].value.cols();
        if (ga) {
          Tensor& d = accum(ia);
          for (std::size_t r = 0; r < gy.rows(); ++r)
            for (std::size_t c = 0; c < ca; ++c) d(r, c) += gy(r, c);
        }
        if (gb) {
          Tensor& d = accum(ib);
          for (std::size_t r = 0; r < gy.rows(); ++r)
            for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += gy(r, ca + c);
        }
        break;
      }
      case OpKind::select_rows: {
        Tensor& d = accum(ia);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          auto src = gy.row_span(r);
          auto dst = d.row_span(n.indices[r]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
        break;
      }
      case OpKind::softmax: {
        Tensor& d = accum(ia);
        for (std::size_t r = 0; r < gy.rows(); ++r) {
          auto s = n.value.row_span(r);
          auto gr = gy.row_span(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < s.size(); ++c) dot += gr[c] * s[c];
          auto dr = d.row_span(r);
          for (std::size_t c = 0; c < s.size(); ++c) dr[c] += s[c] * (gr[c] - dot);
        }
        break;
      }
      case OpKind::log_softmax: {
        Tensor& d = accum(ia);
        for (std::size_t r = 0; r < gy.rows(); ++r) {
          auto ls = n.value.row_span(r);
          auto gr = gy.row_span(r);
          double total = 0.0;
          for (double v : gr) total += v;
          auto dr = d.row_span(r);
          for (std::size_t c = 0; c < ls.size(); ++c) dr[c] += gr[c] - std::exp(ls[c]) * total;
        }
        break;
      }
      case OpKind::pairwise_distance: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        Tensor* dx = ga ? &accum(ia) : nullptr;
        Tensor* dy = gb ? &accum(ib) : nullptr;
        for (std::size_t i = 0; i < x.rows(); ++i) {
          for (std::size_t j = 0; j < y.rows(); ++j) {
            const double dist = n.value(i, j);
            if (dist == 0.0) continue;
            const double w = gy(i, j) / dist;
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < x.cols(); ++c) {
              const double diff = w * (x(i, c) - y(j, c));
              if (dx) (*dx)(i, c) += diff;
              if (dy) (*dy)(j, c) -= diff;
            }
          }
        }
        break;
      }
    }
  }

  Gradients out;
  out.grads_.resize(count);
  out.present_.assign(count, false);
  for (std::size_t k = 0; k < count; ++k) {
    const Node& n = nodes_[k];
    if (n.op == OpKind::leaf && n.requires_grad) {
      out.present_[k] = true;
      out.grads_[k] = has[k] ? std::move(g[k]) : Tensor(n.value.rows(), n.value.cols());
    }
  }
  return out;
}

double finite_diff_check(const ScalarFunction& f, std::span<const Tensor> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");

  std::vector<Tensor> grads;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.parameter(p));
    Var loss = f(tape, leaves);
    if (!std::isfinite(loss.value().item())) {
      throw std::domain_error("finite_diff_check: non-finite function value at the base point");
    }
    Gradients g = tape.backward(loss);
    for (Var v : leaves) grads.push_back(g[v]);
  }

  std::vector<Tensor> probe(params.begin(), params.end());
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : probe) leaves.push_back(tape.parameter(p));
    const double v = f(tape, leaves).value().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  for (std::size_t b = 0; b < probe.size(); ++b) {
    for (std::size_t i = 0; i < probe[b].size(); ++i) {
      const double orig = probe[b][i];
      probe[b][i] = orig + h;
      const double up = evaluate();
      probe[b][i] = orig - h;
      const double down = evaluate();
      probe[b][i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(grads[b][i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cmle::ad
