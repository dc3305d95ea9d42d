#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "vitc/serialize.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

// Truncated normal (resampled outside +-2 std), mean 0.
Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng, DType dtype);

// Independent generator for one model component, so that changing one
// component's architecture leaves the others' initial values untouched.
std::mt19937_64 component_rng(std::uint64_t seed, std::string_view component);

// Counts the elements of all entries whose name starts with prefix.
std::size_t count_elements(const NamedTensors& params, std::string_view prefix = "");

// Copies checkpoint values into live parameters in place. Every live name must
// be present with matching shape; dtype is converted if needed.
void assign_params(const NamedTensors& live, const NamedTensors& stored);

}  // namespace vitc
