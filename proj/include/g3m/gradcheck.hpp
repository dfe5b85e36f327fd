#pragma once

#include <functional>
#include <string>
#include <vector>

#include "g3m/tensor.hpp"

namespace g3m {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int worst_index = -1;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst() const;
  bool within(double tol) const { return worst() <= tol; }
  std::string to_string() const;
};

// loss_fn(accumulate_grads): evaluates the scalar loss at the current
// parameter values; when accumulate_grads it must also run backward so the
// analytic gradients land in the parameters. It must be deterministic per
// call (fixed dropout masks, no fresh randomness).
GradCheckReport grad_check(const std::function<double(bool accumulate_grads)>& loss_fn,
                           const std::vector<Parameter*>& params, double eps, double tol);

}  // namespace g3m
