// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitro/tensor.hpp"

namespace vitro {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment buffers for one parameter.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
};

// Bias-corrected Adam over the trainable tensors it was given. Frozen tensors
// passed in are dropped at construction and never touched.
class Adam {
 public:
  Adam(const std::vector<Tensor>& params, AdamOptions options);

  // Applies one update and clears gradients. Throws ContractError if any
  // parameter has no gradient.
  void step();
  void zero_grad();

  std::size_t size() const { return params_.size(); }
  bool contains(const Tensor& t) const;
  std::uint64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  AdamOptions options_;
  std::uint64_t t_ = 0;
};

}  // namespace vitro
