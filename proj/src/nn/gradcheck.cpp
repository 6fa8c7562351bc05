#include "osev/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "osev/random.hpp"

namespace osev::nn {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::string> GradcheckReport::failing() const {
  std::vector<std::string> out;
  for (const auto& p : parameters) {
    if (!(p.max_rel_error < tolerance)) out.push_back(p.name);
  }
  return out;
}

GradcheckReport gradcheck(const Objective& objective, std::span<Parameter* const> params,
                          const GradcheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  const Evaluation base = objective(true);
  // Later evaluations may run backward passes too; keep the analytic values.
  std::vector<Tensor> analytic_grads;
  for (const Parameter* p : params) analytic_grads.push_back(p->grad);

  GradcheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    ParameterError err;
    err.name = p->name;
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords;
    if (options.max_coords_per_param == 0 || options.max_coords_per_param >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      auto perm = rng.permutation(n);
      coords.assign(perm.begin(), perm.begin() + options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double original = p->value[idx];
      p->value[idx] = original + options.eps;
      const Evaluation plus = objective(false);
      p->value[idx] = original - options.eps;
      const Evaluation minus = objective(false);
      p->value[idx] = original;
      if (plus.pattern != base.pattern || minus.pattern != base.pattern) {
        ++err.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
      const double analytic = analytic_grads[pi][idx];
      const double rel = relative_error(analytic, numeric, options.abs_floor);
      ++err.checked;
      if (err.checked == 1 || rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = idx;
        err.analytic = analytic;
        err.numeric = numeric;
      }
    }
    // Every coordinate straddled a kink: nothing was verified.
    if (err.checked == 0 && !coords.empty()) {
      err.max_rel_error = std::numeric_limits<double>::infinity();
    }
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    report.parameters.push_back(err);
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic_grads[pi];
  return report;
}

}  // namespace osev::nn
