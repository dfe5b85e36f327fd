#pragma once

#include <cstdint>
#include <vector>

#include "g3m/tensor.hpp"

namespace g3m {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter group. step() applies the update
// and zeroes gradients afterwards.
class Adam {
public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg);

  void step();
  void zero_grad();
  int64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  int64_t t_ = 0;
  AdamConfig cfg_;
};

}  // namespace g3m
