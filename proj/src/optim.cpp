#include "vitc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace vitc {

AdamW::AdamW(const NamedTensors& params, const AdamWConfig& cfg) : params_(params), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("AdamW::step: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double step = cfg_.lr / bc1;
  const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    const Tensor& g = grads[i];
    if (g.shape() != p.shape() || g.dtype() != p.dtype()) {
      throw ShapeError("AdamW::step: gradient for " + params_[i].first + " has shape " +
                       shape_str(g.shape()));
    }
    auto& m = m_[i];
    auto& v = v_[i];
    dispatch(p.dtype(), [&]<class T>() {
      auto pv = p.mutable_values<T>();
      auto gv = g.values<T>();
      for (std::size_t j = 0; j < pv.size(); ++j) {
        const double gj = gv[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double denom = std::sqrt(v[j] / bc2) + cfg_.eps;
        pv[j] = static_cast<T>(static_cast<double>(pv[j]) * decay - step * m[j] / denom);
      }
    });
  }
}

}  // namespace vitc
