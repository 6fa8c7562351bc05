#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "osev/nn/tensor.hpp"

namespace osev::nn {

// One evaluation of a scalar objective. `pattern` hashes any discrete state
// the objective passed through (ReLU masks, clamps, argmax flags); central
// differences whose endpoints disagree with the base pattern straddle a kink
// and are skipped.
struct Evaluation {
  double value = 0.0;
  std::uint64_t pattern = 0;
};

// Evaluates the objective at the current parameter values. When
// `accumulate_grads` is true it must also add the analytic gradient into each
// parameter's grad (which the checker zeroes beforehand).
using Objective = std::function<Evaluation(bool accumulate_grads)>;

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  // Coordinates checked per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct ParameterError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradcheckReport {
  std::vector<ParameterError> parameters;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;

  bool passed() const { return max_rel_error < tolerance; }
  std::vector<std::string> failing() const;
};

double relative_error(double analytic, double numeric, double abs_floor);

// Central-difference check of every listed parameter. Parameter values are
// restored exactly afterwards; grads hold the analytic gradient on return.
GradcheckReport gradcheck(const Objective& objective, std::span<Parameter* const> params,
                          const GradcheckOptions& options = {});

}  // namespace osev::nn
