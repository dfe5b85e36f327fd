#include "g3m/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace g3m {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_err);
  return w;
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  for (const auto& e : entries)
    os << e.param << ": max rel err " << e.max_rel_err << " (element " << e.worst_index << ")\n";
  return os.str();
}

GradCheckReport grad_check(const std::function<double(bool)>& loss_fn,
                           const std::vector<Parameter*>& params, double eps, double tol) {
  (void)tol;  // report carries raw errors; callers decide pass/fail
  if (eps <= 0.0) throw ValidationError("grad_check: eps must be positive");

  for (Parameter* p : params) p->zero_grad();
  const double base = loss_fn(true);
  if (!std::isfinite(base)) throw ValidationError("grad_check: non-finite loss at base point");

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    GradCheckEntry entry;
    entry.param = p.name;
    for (int j = 0; j < p.value.numel(); ++j) {
      const double orig = p.value.at(j);
      p.value.at(j) = orig + eps;
      const double up = loss_fn(false);
      p.value.at(j) = orig - eps;
      const double down = loss_fn(false);
      p.value.at(j) = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw ValidationError("grad_check: non-finite loss perturbing " + p.name + "[" +
                              std::to_string(j) + "]");
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[pi].at(j) - numeric) / std::max(std::abs(numeric), 1e-8);
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = j;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  for (Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace g3m
