#include "cmle/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cmle::ot {

Tensor pairwise_l2(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("pairwise_l2: point dimension mismatch " + a.shape_string() + " vs " +
                                b.shape_string());
  }
  Tensor m(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row_span(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row_span(j);
      double s = 0.0;
      for (std::size_t c = 0; c < ai.size(); ++c) {
        const double d = ai[c] - bj[c];
        s += d * d;
      }
      m(i, j) = std::sqrt(s);
    }
  }
  return m;
}

namespace {

void validate(const Tensor& cost, std::span<const double> a, std::span<const double> b) {
  if (cost.rows() == 0 || cost.cols() == 0) throw std::invalid_argument("sinkhorn: empty cost matrix");
  if (a.size() != cost.rows() || b.size() != cost.cols()) {
    throw std::invalid_argument("sinkhorn: marginals of length " + std::to_string(a.size()) + ", " +
                                std::to_string(b.size()) + " do not match cost " + cost.shape_string());
  }
  for (double v : cost.values()) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("sinkhorn: cost entries must be finite and >= 0");
  }
  for (double v : a) if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("sinkhorn: a must be > 0");
  for (double v : b) if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("sinkhorn: b must be > 0");
}

}  // namespace

TransportPlan sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                            int iterations) {
  validate(cost, a, b);
  if (iterations < 0) throw std::invalid_argument("sinkhorn: iterations must be >= 0");
  const std::size_t n1 = cost.rows(), n2 = cost.cols();

  double total = 0.0;
  for (double v : cost.values()) total += v;
  const double mean_cost = total / static_cast<double>(cost.size());

  TransportPlan out;
  Tensor kernel(n1, n2, 1.0);
  if (mean_cost == 0.0) {
    out.degenerate = true;
    out.lambda = 0.0;
    iterations = 0;
  } else {
    out.lambda = 10.0 / mean_cost;
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = std::exp(-out.lambda * cost[i]);
  }

  std::vector<double> u(a.begin(), a.end());
  std::vector<double> ktu(n2);
  auto compute_ktu = [&]() {
    std::fill(ktu.begin(), ktu.end(), 0.0);
    for (std::size_t k = 0; k < n1; ++k) {
      auto row = kernel.row_span(k);
      for (std::size_t l = 0; l < n2; ++l) ktu[l] += row[l] * u[k];
    }
    for (double& v : ktu) {
      if (v < kDivisionFloor) {
        v = kDivisionFloor;
        ++out.floor_hits;
      }
    }
  };

  std::vector<double> ratio(n2);
  for (int it = 0; it < iterations; ++it) {
    compute_ktu();
    for (std::size_t l = 0; l < n2; ++l) ratio[l] = b[l] / ktu[l];
    for (std::size_t k = 0; k < n1; ++k) {
      auto row = kernel.row_span(k);
      double s = 0.0;
      for (std::size_t l = 0; l < n2; ++l) s += row[l] * ratio[l];
      // 1 / (diag(1/a) K r)_k
      u[k] = a[k] / s;
      if (!std::isfinite(u[k])) {
        throw std::runtime_error("sinkhorn: non-finite scaling vector u at iteration " + std::to_string(it + 1));
      }
    }
  }

  compute_ktu();
  std::vector<double> v(n2);
  for (std::size_t l = 0; l < n2; ++l) {
    v[l] = b[l] / ktu[l];
    if (!std::isfinite(v[l])) {
      throw std::runtime_error("sinkhorn: non-finite scaling vector v after iteration " + std::to_string(iterations));
    }
  }

  out.plan = Tensor(n1, n2);
  double c = 0.0;
  for (std::size_t k = 0; k < n1; ++k) {
    for (std::size_t l = 0; l < n2; ++l) {
      const double t = u[k] * kernel(k, l) * v[l];
      out.plan(k, l) = t;
      c += t * cost(k, l);
    }
  }
  out.cost = out.degenerate ? 0.0 : c;
  return out;
}

ad::Var wass_loss_term(const TransportPlan& plan, ad::Var group, ad::Var rest) {
  ad::Var m = ad::pairwise_distance(group, rest);
  if (!plan.plan.same_shape(m.value())) {
    throw std::invalid_argument("wass_loss_term: plan " + plan.plan.shape_string() + " does not match batch " +
                                m.value().shape_string());
  }
  return ad::sum(ad::mul(group.tape->constant(plan.plan), m));
}

namespace {

// Dense tableau simplex for min c.x, A x = rhs, x >= 0 (rhs >= 0), Bland's rule.
class Simplex {
 public:
  Simplex(std::vector<std::vector<double>> a, std::vector<double> rhs, std::vector<double> c)
      : rows_(a.size()), vars_(c.size()), cost_(std::move(c)) {
    // columns: original vars, then one artificial per row, then rhs
    width_ = vars_ + rows_ + 1;
    tab_.assign(rows_, std::vector<double>(width_, 0.0));
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t j = 0; j < vars_; ++j) tab_[r][j] = a[r][j];
      tab_[r][vars_ + r] = 1.0;
      tab_[r][width_ - 1] = rhs[r];
    }
    basis_.resize(rows_);
    std::iota(basis_.begin(), basis_.end(), vars_);
  }

  double solve() {
    // Phase I: minimize the sum of artificials.
    std::vector<double> phase1(vars_ + rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) phase1[vars_ + r] = 1.0;
    run(phase1, vars_ + rows_);
    if (objective(phase1) > 1e-9) throw std::runtime_error("exact_ot_oracle: infeasible transport problem");
    drive_out_artificials();
    std::vector<double> phase2(vars_ + rows_, 0.0);
    std::copy(cost_.begin(), cost_.end(), phase2.begin());
    run(phase2, vars_);
    return objective(phase2);
  }

 private:
  static constexpr double kEps = 1e-12;

  double objective(const std::vector<double>& c) const {
    double v = 0.0;
    for (std::size_t r = 0; r < tab_.size(); ++r) v += c[basis_[r]] * tab_[r][width_ - 1];
    return v;
  }

  void pivot(std::size_t row, std::size_t col) {
    const double p = tab_[row][col];
    for (double& v : tab_[row]) v /= p;
    for (std::size_t r = 0; r < tab_.size(); ++r) {
      if (r == row) continue;
      const double f = tab_[r][col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < width_; ++j) tab_[r][j] -= f * tab_[row][j];
    }
    basis_[row] = col;
  }

  // Columns >= allowed never enter the basis.
  void run(const std::vector<double>& c, std::size_t allowed) {
    for (int guard = 0; guard < 100000; ++guard) {
      std::size_t enter = allowed;
      for (std::size_t j = 0; j < allowed; ++j) {
        double reduced = c[j];
        for (std::size_t r = 0; r < tab_.size(); ++r) reduced -= c[basis_[r]] * tab_[r][j];
        if (reduced < -kEps) {
          enter = j;  // Bland: smallest improving index
          break;
        }
      }
      if (enter == allowed) return;
      std::size_t leave = tab_.size();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < tab_.size(); ++r) {
        if (tab_[r][enter] > kEps) {
          const double ratio = tab_[r][width_ - 1] / tab_[r][enter];
          if (ratio < best - kEps || (std::abs(ratio - best) <= kEps && basis_[r] < basis_[leave])) {
            best = ratio;
            leave = r;
          }
        }
      }
      if (leave == tab_.size()) throw std::runtime_error("exact_ot_oracle: unbounded LP");
      pivot(leave, enter);
    }
    throw std::runtime_error("exact_ot_oracle: simplex iteration limit reached");
  }

  void drive_out_artificials() {
    for (std::size_t r = 0; r < tab_.size();) {
      if (basis_[r] < vars_) {
        ++r;
        continue;
      }
      std::size_t col = vars_;
      for (std::size_t j = 0; j < vars_; ++j) {
        if (std::abs(tab_[r][j]) > 1e-9) {
          col = j;
          break;
        }
      }
      if (col < vars_) {
        pivot(r, col);
        ++r;
      } else {
        // redundant constraint
        tab_.erase(tab_.begin() + static_cast<long>(r));
        basis_.erase(basis_.begin() + static_cast<long>(r));
      }
    }
  }

  std::size_t rows_;
  std::size_t vars_;
  std::size_t width_ = 0;
  std::vector<double> cost_;
  std::vector<std::vector<double>> tab_;
  std::vector<std::size_t> basis_;
};

}  // namespace

double exact_ot_oracle(const Tensor& cost, std::span<const double> a, std::span<const double> b) {
  validate(cost, a, b);
  const std::size_t n1 = cost.rows(), n2 = cost.cols();
  if (n1 * n2 > 64) {
    throw std::invalid_argument("exact_ot_oracle: instance " + cost.shape_string() + " exceeds 64 cells");
  }
  const double sa = std::accumulate(a.begin(), a.end(), 0.0);
  const double sb = std::accumulate(b.begin(), b.end(), 0.0);
  if (std::abs(sa - sb) > 1e-9 * std::max(sa, sb)) {
    throw std::invalid_argument("exact_ot_oracle: marginals carry different mass");
  }

  std::vector<std::vector<double>> rows;
  std::vector<double> rhs;
  for (std::size_t k = 0; k < n1; ++k) {
    std::vector<double> r(n1 * n2, 0.0);
    for (std::size_t l = 0; l < n2; ++l) r[k * n2 + l] = 1.0;
    rows.push_back(std::move(r));
    rhs.push_back(a[k]);
  }
  for (std::size_t l = 0; l < n2; ++l) {
    std::vector<double> r(n1 * n2, 0.0);
    for (std::size_t k = 0; k < n1; ++k) r[k * n2 + l] = 1.0;
    rows.push_back(std::move(r));
    rhs.push_back(b[l]);
  }
  std::vector<double> c(cost.values().begin(), cost.values().end());
  return Simplex(std::move(rows), std::move(rhs), std::move(c)).solve();
}

}  // namespace cmle::ot
