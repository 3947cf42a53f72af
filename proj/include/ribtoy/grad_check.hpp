#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "ribtoy/tensor.hpp"

namespace ribtoy {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool pass = false;
  // Coordinate with the worst disagreement, for diagnostics.
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference check of the tape gradient of `f` w.r.t. `inputs`.
// `f` must rebuild the same scalar loss from those inputs on the tape it is
// handed. Each input contributes up to `max_coords_per_input` coordinates,
// all of them when it has fewer; sampling is driven by `seed`. A pair whose
// analytic and numeric values are both below 1e-6 in magnitude counts as
// exact agreement (the difference there is pure roundoff noise). Non-finite
// evaluations raise NumericError naming the coordinate.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f,
                           std::span<Tensor> inputs, double step, double tol,
                           std::size_t max_coords_per_input = SIZE_MAX,
                           std::uint64_t seed = 0);

}  // namespace ribtoy
