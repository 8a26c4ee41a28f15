// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "vitro/tensor.hpp"

namespace vitro {

using Rng = std::mt19937_64;

// Independent stream seed for a named purpose under a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

std::vector<double> normal_values(Rng& rng, std::size_t count, double stddev);
Tensor normal_tensor(Rng& rng, Shape shape, double stddev, bool trainable);

}  // namespace vitro
