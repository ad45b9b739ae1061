#include "ctxtrack/hungarian.hpp"

#include <algorithm>
#include <cmath>

namespace ctxtrack {

std::vector<std::pair<std::size_t, std::size_t>> Assignment::pairs() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < target_of.size(); ++i)
    if (target_of[i] != npos) out.emplace_back(i, target_of[i]);
  return out;
}

std::vector<std::size_t> Assignment::source_of() const {
  std::vector<std::size_t> inv(num_targets, npos);
  for (std::size_t i = 0; i < target_of.size(); ++i)
    if (target_of[i] != npos) inv.at(target_of[i]) = i;
  return inv;
}

bool Assignment::is_injective() const {
  std::vector<bool> seen(num_targets, false);
  for (auto t : target_of) {
    if (t == npos) continue;
    if (t >= num_targets || seen[t]) return false;
    seen[t] = true;
  }
  return true;
}

double assignment_cost(const Tensor& cost, const Assignment& a) {
  double s = 0.0;
  const std::size_t m = cost.cols();
  for (std::size_t i = 0; i < a.target_of.size(); ++i)
    if (a.target_of[i] != Assignment::npos) s += cost[i * m + a.target_of[i]];
  return s;
}

namespace {

/// Potentials-based O(n^2 m) solver for n <= m (rows fully matched).
std::vector<std::size_t> solve_rows_le_cols(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  const std::size_t m = n ? a[0].size() : 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(n, Assignment::npos);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) col_of[p[j] - 1] = j - 1;
  return col_of;
}

struct SubResult {
  double cost = 0.0;
  std::vector<std::size_t> target_of;  // indexed like `rows`, values are global targets
};

/// Optimal assignment restricted to the given rows and columns.
SubResult solve_sub(const Tensor& cost, const std::vector<std::size_t>& rows,
                    const std::vector<std::size_t>& cols) {
  SubResult r;
  r.target_of.assign(rows.size(), Assignment::npos);
  if (rows.empty() || cols.empty()) return r;
  const std::size_t m = cost.cols();
  if (rows.size() <= cols.size()) {
    std::vector<std::vector<double>> a(rows.size(), std::vector<double>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols.size(); ++j) a[i][j] = cost[rows[i] * m + cols[j]];
    const auto col_of = solve_rows_le_cols(a);
    for (std::size_t i = 0; i < rows.size(); ++i) r.target_of[i] = cols[col_of[i]];
  } else {
    std::vector<std::vector<double>> a(cols.size(), std::vector<double>(rows.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
      for (std::size_t i = 0; i < rows.size(); ++i) a[j][i] = cost[rows[i] * m + cols[j]];
    const auto row_of = solve_rows_le_cols(a);
    for (std::size_t j = 0; j < cols.size(); ++j) r.target_of[row_of[j]] = cols[j];
  }
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (r.target_of[i] != Assignment::npos) r.cost += cost[rows[i] * m + r.target_of[i]];
  return r;
}

}  // namespace

Assignment hungarian(const Tensor& cost) {
  Assignment out;
  if (cost.size() == 0) {
    out.num_targets = cost.rank() == 2 ? cost.dim(1) : 0;
    out.target_of.assign(cost.rank() == 2 ? cost.dim(0) : 0, Assignment::npos);
    return out;
  }
  if (cost.rank() != 2) throw ConfigError("hungarian expects a 2-D cost matrix");
  if (!cost.all_finite()) throw ContractViolation("hungarian: cost matrix has non-finite entries");
  const std::size_t a = cost.dim(0), b = cost.dim(1);
  out.num_targets = b;
  out.target_of.assign(a, Assignment::npos);

  double max_abs = 0.0;
  for (double v : cost.storage()) max_abs = std::max(max_abs, std::abs(v));
  const double tol = 1e-9 * (1.0 + max_abs * static_cast<double>(std::min(a, b)));

  std::vector<std::size_t> rows(a), cols(b);
  for (std::size_t i = 0; i < a; ++i) rows[i] = i;
  for (std::size_t j = 0; j < b; ++j) cols[j] = j;
  SubResult best = solve_sub(cost, rows, cols);
  const double optimum = best.cost;
  double fixed = 0.0;

  // Fix sources one at a time to their lexicographically smallest feasible choice.
  for (std::size_t i = 0; i < a; ++i) {
    const std::vector<std::size_t> rest_rows(rows.begin() + 1, rows.end());
    const std::size_t chosen = best.target_of[0];
    bool fixed_here = false;
    for (std::size_t cj = 0; cj < cols.size() && cols[cj] < chosen; ++cj) {
      std::vector<std::size_t> rest_cols = cols;
      rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(cj));
      // The rest must still realise min(rows, cols) pairs overall.
      if (std::min(rest_rows.size(), rest_cols.size()) + 1 != std::min(rows.size(), cols.size()))
        continue;
      SubResult sub = solve_sub(cost, rest_rows, rest_cols);
      const double c = cost[i * b + cols[cj]];
      if (fixed + c + sub.cost <= optimum + tol) {
        out.target_of[i] = cols[cj];
        fixed += c;
        cols = std::move(rest_cols);
        best = std::move(sub);
        fixed_here = true;
        break;
      }
    }
    if (!fixed_here) {
      out.target_of[i] = chosen;
      if (chosen != Assignment::npos) {
        fixed += cost[i * b + chosen];
        cols.erase(std::find(cols.begin(), cols.end(), chosen));
      }
      best.target_of.erase(best.target_of.begin());
    }
    rows = rest_rows;
  }
  return out;
}

}  // namespace ctxtrack
