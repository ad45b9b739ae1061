#pragma once

#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

/// Injective partial map from sources onto targets.
struct Assignment {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::size_t num_targets = 0;
  std::vector<std::size_t> target_of;  // per source; npos when unmatched

  std::size_t num_sources() const { return target_of.size(); }
  std::vector<std::pair<std::size_t, std::size_t>> pairs() const;
  /// Inverse lookup; npos for targets with no source.
  std::vector<std::size_t> source_of() const;
  bool is_injective() const;

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

/// Minimum-cost assignment over min(A, B) pairs of an A x B cost matrix.
///
/// Among optimal assignments (costs equal within a small relative tolerance) the
/// one returned has the lexicographically smallest target_of vector, with
/// "unmatched" ordered after every target: low sources are matched first, each
/// to its lowest feasible target.
Assignment hungarian(const Tensor& cost);

/// Sum of matched costs, accumulated in source order.
double assignment_cost(const Tensor& cost, const Assignment& a);

}  // namespace ctxtrack
