#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace resil {

/// Discrete optimal transport instance: marginals p (rows) and q (columns)
/// with a row-major |p| x |q| cost matrix.
struct TransportProblem {
  std::vector<double> p;
  std::vector<double> q;
  std::vector<double> cost;

  double cost_at(std::size_t i, std::size_t j) const { return cost[i * q.size() + j]; }

  void validate() const {
    if (p.empty() || q.empty()) throw std::invalid_argument("transport marginals must be non-empty");
    if (cost.size() != p.size() * q.size()) throw std::invalid_argument("cost matrix has wrong shape");
    double sp = 0.0, sq = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw std::invalid_argument("negative mass in p");
      sp += v;
    }
    for (double v : q) {
      if (!(v >= 0.0)) throw std::invalid_argument("negative mass in q");
      sq += v;
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
      throw std::invalid_argument("unbalanced marginals: p and q must each sum to 1");
    for (double c : cost)
      if (!(c >= 0.0)) throw std::invalid_argument("transport costs must be non-negative");
  }
};

/**
 * @brief Exact transportation simplex.
 *
 * North-west-corner start, MODI potentials, Bland's rule for both the
 * entering cell (first negative reduced cost in row-major order) and the
 * leaving cell (lowest index among the tied minima), which rules out cycling
 * on degenerate bases. Buffers are reused across calls.
 */
class TransportSolver {
 public:
  /// Optimal cost; marginals are assumed balanced (see TransportProblem::validate).
  double solve(std::span<const double> p, std::span<const double> q, std::span<const double> cost) {
    rows_.clear();
    cols_.clear();
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 0.0) rows_.push_back(i);
    for (std::size_t j = 0; j < q.size(); ++j)
      if (q[j] > 0.0) cols_.push_back(j);
    const std::size_t m = rows_.size();
    const std::size_t n = cols_.size();
    const std::size_t stride = q.size();
    if (m == 0 || n == 0) return 0.0;
    if (m == 1) {
      double total = 0.0;
      for (std::size_t j : cols_) total += q[j] * cost[rows_[0] * stride + j];
      return total;
    }
    if (n == 1) {
      double total = 0.0;
      for (std::size_t i : rows_) total += p[i] * cost[i * stride + cols_[0]];
      return total;
    }

    c_.resize(m * n);
    double scale = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        c_[i * n + j] = cost[rows_[i] * stride + cols_[j]];
        scale = std::max(scale, std::abs(c_[i * n + j]));
      }
    const double eps = 1e-12 * (1.0 + scale);

    // North-west corner: exactly m + n - 1 basic cells.
    flow_.assign(m * n, 0.0);
    basic_.assign(m * n, 0);
    supply_.resize(m);
    demand_.resize(n);
    for (std::size_t i = 0; i < m; ++i) supply_[i] = p[rows_[i]];
    for (std::size_t j = 0; j < n; ++j) demand_[j] = q[cols_[j]];
    {
      std::size_t i = 0, j = 0;
      while (true) {
        const double x = std::min(supply_[i], demand_[j]);
        flow_[i * n + j] = x;
        basic_[i * n + j] = 1;
        supply_[i] -= x;
        demand_[j] -= x;
        if (i == m - 1 && j == n - 1) break;
        if ((supply_[i] <= demand_[j] && i < m - 1) || j == n - 1)
          ++i;
        else
          ++j;
      }
    }

    u_.resize(m);
    v_.resize(n);
    const std::size_t max_pivots = 50 * (m + n) * (m + n) + 1000;
    for (std::size_t pivot = 0; pivot < max_pivots; ++pivot) {
      compute_potentials(m, n);
      std::size_t enter = m * n;
      for (std::size_t k = 0; k < m * n && enter == m * n; ++k)
        if (!basic_[k] && c_[k] - u_[k / n] - v_[k % n] < -eps) enter = k;
      if (enter == m * n) break;
      pivot_on(enter, m, n);
    }

    double total = 0.0;
    for (std::size_t k = 0; k < m * n; ++k)
      if (basic_[k]) total += flow_[k] * c_[k];
    return total;
  }

 private:
  // Tree nodes: rows are 0..m-1, columns are m..m+n-1.
  void compute_potentials(std::size_t m, std::size_t n) {
    known_.assign(m + n, 0);
    u_[0] = 0.0;
    known_[0] = 1;
    stack_.assign(1, 0);
    while (!stack_.empty()) {
      const std::size_t node = stack_.back();
      stack_.pop_back();
      if (node < m) {
        for (std::size_t j = 0; j < n; ++j)
          if (basic_[node * n + j] && !known_[m + j]) {
            v_[j] = c_[node * n + j] - u_[node];
            known_[m + j] = 1;
            stack_.push_back(m + j);
          }
      } else {
        const std::size_t j = node - m;
        for (std::size_t i = 0; i < m; ++i)
          if (basic_[i * n + j] && !known_[i]) {
            u_[i] = c_[i * n + j] - v_[j];
            known_[i] = 1;
            stack_.push_back(i);
          }
      }
    }
  }

  void pivot_on(std::size_t enter, std::size_t m, std::size_t n) {
    const std::size_t ei = enter / n;
    const std::size_t ej = enter % n;
    // Tree path from row node ei to column node m + ej.
    parent_.assign(m + n, std::numeric_limits<std::size_t>::max());
    parent_cell_.assign(m + n, 0);
    parent_[ei] = ei;
    stack_.assign(1, ei);
    while (!stack_.empty() && parent_[m + ej] == std::numeric_limits<std::size_t>::max()) {
      const std::size_t node = stack_.back();
      stack_.pop_back();
      if (node < m) {
        for (std::size_t j = 0; j < n; ++j)
          if (basic_[node * n + j] && parent_[m + j] == std::numeric_limits<std::size_t>::max()) {
            parent_[m + j] = node;
            parent_cell_[m + j] = node * n + j;
            stack_.push_back(m + j);
          }
      } else {
        const std::size_t j = node - m;
        for (std::size_t i = 0; i < m; ++i)
          if (basic_[i * n + j] && parent_[i] == std::numeric_limits<std::size_t>::max()) {
            parent_[i] = node;
            parent_cell_[i] = i * n + j;
            stack_.push_back(i);
          }
      }
    }
    // Walk back from the column: the first path cell loses flow, then alternate.
    path_.clear();
    for (std::size_t node = m + ej; node != ei; node = parent_[node]) path_.push_back(parent_cell_[node]);

    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = m * n;
    for (std::size_t t = 0; t < path_.size(); t += 2) {
      const std::size_t k = path_[t];
      if (flow_[k] < theta || (flow_[k] == theta && k < leave)) {
        theta = flow_[k];
        leave = k;
      }
    }
    for (std::size_t t = 0; t < path_.size(); ++t) {
      if (t % 2 == 0)
        flow_[path_[t]] -= theta;
      else
        flow_[path_[t]] += theta;
    }
    flow_[enter] = theta;
    basic_[enter] = 1;
    basic_[leave] = 0;
    flow_[leave] = 0.0;
  }

  std::vector<std::size_t> rows_, cols_;
  std::vector<double> c_, flow_, supply_, demand_, u_, v_;
  std::vector<unsigned char> basic_, known_;
  std::vector<std::size_t> stack_, parent_, parent_cell_, path_;
};

/// Exact Kantorovich (earth mover's) distance for a validated problem.
inline double kantorovich(const TransportProblem& prob) {
  prob.validate();
  TransportSolver solver;
  return solver.solve(prob.p, prob.q, prob.cost);
}

}  // namespace resil
