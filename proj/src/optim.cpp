// SPDX-License-Identifier: Apache-2.0
#include "vitro/optim.hpp"

#include <cmath>
#include <string>

#include "vitro/error.hpp"

namespace vitro {

Adam::Adam(const std::vector<Tensor>& params, AdamOptions options) : options_(options) {
  for (const Tensor& p : params) {
    if (!p.trainable()) continue;
    if (contains(p)) throw ContractError("Adam: parameter registered twice");
    params_.push_back(p);
    states_.push_back({std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)});
  }
}

bool Adam::contains(const Tensor& t) const {
  for (const Tensor& p : params_)
    if (p.same_node(t)) return true;
  return false;
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw ContractError("Adam::step: parameter " + std::to_string(i) + " " + shape_str(params_[i].shape()) +
                          " has no gradient");
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    auto grad = params_[i].grad();
    AdamState& st = states_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      st.m[j] = b1 * st.m[j] + (1.0 - b1) * g;
      st.v[j] = b2 * st.v[j] + (1.0 - b2) * g * g;
      const double mhat = st.m[j] / c1;
      const double vhat = st.v[j] / c2;
      data[j] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace vitro
