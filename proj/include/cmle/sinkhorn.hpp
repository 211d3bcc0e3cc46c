#pragma once

// Entropic optimal transport between two point clouds, as used by the
// Wasserstein balancing regularizer:
//
//   M        pairwise Euclidean distances
//   lambda   10 / mean(M)
//   K        exp(-lambda M),  K~ = diag(1/a) K
//   u <- a;  repeat: u = 1 / (K~ (b / (K^T u)))
//   v = b / (K^T u);  T* = diag(u) K diag(v);  cost = <T*, M>
//
// The marginals a, b are used exactly as given (they need not be balanced).

#include <cstddef>
#include <span>
#include <vector>

#include "cmle/autodiff.hpp"

namespace cmle::ot {

using ad::Tensor;

inline constexpr int kDefaultIterations = 10;
inline constexpr double kDivisionFloor = 1e-300;

struct TransportPlan {
  Tensor plan;
  double cost = 0.0;
  double lambda = 0.0;
  // mean(M) == 0: no scaling iterations ran and the cost is 0.
  bool degenerate = false;
  // Number of K^T u entries raised to kDivisionFloor.
  std::size_t floor_hits = 0;
};

// M[k][l] = |a_k - b_l|_2 for row-point sets a (n1 x d) and b (n2 x d).
Tensor pairwise_l2(const Tensor& a, const Tensor& b);

// Throws std::invalid_argument on bad shapes, negative or non-finite costs,
// or non-positive marginals; std::runtime_error naming the iteration when the
// scaling vectors stop being finite.
TransportPlan sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                            int iterations = kDefaultIterations);

// <T*, M(group, rest)> on the tape with T* held constant, so gradients reach
// the representations only through the distance matrix.
ad::Var wass_loss_term(const TransportPlan& plan, ad::Var group, ad::Var rest);

// Exact minimal transport cost by the simplex method on the transportation
// LP. Requires n1 * n2 <= 64 and sum(a) == sum(b) up to 1e-9 relative.
double exact_ot_oracle(const Tensor& cost, std::span<const double> a, std::span<const double> b);

}  // namespace cmle::ot
