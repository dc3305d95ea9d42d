#include "vitc/params.hpp"

#include <map>

namespace vitc {

Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng, DType dtype) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0 * std);
  }
  return Tensor::from_values(std::move(shape), v, dtype).set_requires_grad(true);
}

std::mt19937_64 component_rng(std::uint64_t seed, std::string_view component) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                   static_cast<std::uint32_t>(seed >> 32)};
  for (char ch : component) words.push_back(static_cast<unsigned char>(ch));
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

std::size_t count_elements(const NamedTensors& params, std::string_view prefix) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) {
    if (name.starts_with(prefix)) n += t.numel();
  }
  return n;
}

void assign_params(const NamedTensors& live, const NamedTensors& stored) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : stored) by_name[name] = &t;
  for (const auto& [name, t] : live) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + name);
    const Tensor& src = *it->second;
    if (src.shape() != t.shape()) {
      throw FormatError("checkpoint shape mismatch for " + name + ": " + shape_str(src.shape()) +
                        " vs " + shape_str(t.shape()));
    }
    Tensor converted = src.dtype() == t.dtype() ? src : src.to(t.dtype());
    Tensor dst = t;
    dispatch(t.dtype(), [&]<class T>() {
      auto from = converted.values<T>();
      auto to = dst.mutable_values<T>();
      std::copy(from.begin(), from.end(), to.begin());
    });
  }
}

}  // namespace vitc
