#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "movelab/array.hpp"
#include "movelab/tape.hpp"

namespace movelab {

struct GradCheckOptions {
  double step = 1e-5;              // central-difference step
  double denom_floor = 1e-8;       // relative-error denominator floor
  int64_t samples_per_leaf = 8;    // 0 checks every element
  uint64_t seed = 0;               // element sampling
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool non_finite = false;
  struct Item {
    size_t leaf;
    int64_t element;
    double analytic;
    double numeric;
    double rel_err;
  };
  Item worst{};                     // element attaining max_rel_err
  std::vector<Item> non_finite_elements;
};

/// Verifies analytic gradients of a deterministic scalar function against
/// central finite differences. `f` rebuilds the computation on the given tape
/// from the leaf values it is handed and returns the scalar loss.
///
/// Sampling: half of each leaf's samples take the largest analytic
/// magnitudes, the rest are a distinct random draw. Elements where both the
/// analytic and numeric sides fall below the difference quotient's rounding
/// resolution (~eps * |L| / 2h) are unresolvable at this step size and count
/// as agreeing.
GradCheckReport grad_check(const std::function<Value(Tape&, std::span<const Value>)>& f,
                           std::span<const Array> leaves, const GradCheckOptions& opts = {});

}  // namespace movelab
