#pragma once

#include <cstddef>
#include <vector>

#include "stc/tensor.hpp"

namespace stc {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay: the decay term is applied directly to
// the parameter and never enters the moment estimates. Parameters are shared
// handles, so step() updates model weights in place.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  void step();
  void zero_grad();
  std::size_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
};

}  // namespace stc
