#include "g3m/optim.hpp"

#include <cmath>
#include <unordered_set>

#include "g3m/error.hpp"

namespace g3m {

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  std::unordered_set<const Parameter*> seen;
  for (const Parameter* p : params_) {
    if (p == nullptr) throw ValidationError("adam: null parameter");
    if (!seen.insert(p).second)
      throw ValidationError("adam: parameter '" + p->name + "' registered twice");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int j = 0; j < p.value.numel(); ++j) {
      const double grad = p.grad.at(j);
      m.at(j) = cfg_.beta1 * m.at(j) + (1.0 - cfg_.beta1) * grad;
      v.at(j) = cfg_.beta2 * v.at(j) + (1.0 - cfg_.beta2) * grad * grad;
      const double mhat = m.at(j) / bc1;
      const double vhat = v.at(j) / bc2;
      p.value.at(j) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace g3m
