#pragma once

// Minimal dense reverse-mode automatic differentiation.
//
// A Tensor is a row-major matrix of doubles (scalars are 1x1, vectors are
// 1xn rows). A Tape records primitive operations in creation order, which is
// a topological order by construction, and backward() walks it once in
// reverse. Broadcasting is limited to add_row (row-wise bias addition).

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cmle::ad {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row_span(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }

  // Value of a 1x1 tensor.
  double item() const;
  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Dense kernels shared by the tape and by callers that need plain products.
// c += a * b, c += a^T * b, c += a * b^T respectively.
void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c);
void gemm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c);
void gemm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c);

enum class OpKind {
  leaf,
  add,
  add_row,
  sub,
  mul,
  scale,
  matmul,
  relu,
  tanh,
  exp,
  log,
  square,
  sum,
  mean,
  concat,
  select_rows,
  softmax,
  log_softmax,
  pairwise_distance,
};

const char* op_name(OpKind op);

using NodeId = std::size_t;

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
};

class Gradients;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient backward() reports.
  Var parameter(Tensor value);
  // Leaf treated as a constant; no gradient flows into it.
  Var constant(Tensor value);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of a scalar node with respect to every parameter leaf.
  Gradients backward(Var loss) const;

  // Internal: used by the op functions below.
  struct Node {
    OpKind op = OpKind::leaf;
    std::array<NodeId, 2> inputs{};
    std::size_t arity = 0;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
  };
  Var push(Node node);
  const Node& node(NodeId id) const { return nodes_.at(id); }

 private:
  std::vector<Node> nodes_;
};

class Gradients {
 public:
  bool contains(Var v) const;
  // Zero-shaped like the leaf if no path reached it.
  const Tensor& operator[](Var v) const;
  const Tensor& at(NodeId id) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var matmul(Var a, Var b);
// x (n x m) plus bias (1 x m) added to every row.
Var add_row(Var x, Var bias);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
// Throws std::domain_error on any non-positive entry.
Var log(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
// Column-wise concatenation [a | b]; row counts must agree.
Var concat(Var a, Var b);
// Gather rows by index; repeated indices accumulate in backward.
Var select_rows(Var a, std::vector<std::size_t> rows);
// Row-wise softmax / log-softmax.
Var softmax(Var a);
Var log_softmax(Var a);
// Euclidean distance between every row of a and every row of b.
// The gradient at a zero distance is taken as 0.
Var pairwise_distance(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// Builds a scalar loss on a fresh tape from parameter leaves.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
// Throws std::domain_error if the function is non-finite at any probe.
double finite_diff_check(const ScalarFunction& f, std::span<const Tensor> params, double h);

}  // namespace cmle::ad
