#pragma once

#include <cstddef>
#include <vector>

#include "vitc/serialize.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay: p <- p (1 - lr wd), then the
// bias-corrected Adam step. Constant learning rate.
class AdamW {
 public:
  AdamW(const NamedTensors& params, const AdamWConfig& cfg);

  // grads[i] belongs to params[i] and must have its shape and dtype.
  void step(const std::vector<Tensor>& grads);

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  NamedTensors params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace vitc
