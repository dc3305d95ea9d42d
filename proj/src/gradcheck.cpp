#include "vitc/gradcheck.hpp"

#include <chrono>
#include <random>

#include "vitc/ops.hpp"
#include "vitc/params.hpp"

namespace vitc {

ModelConfig gradcheck_model_config(const GradCheckConfig& cfg) {
  ModelConfig m;
  m.vit.image_h = 16;
  m.vit.image_w = 16;
  m.vit.patch = 4;
  m.vit.embed_dim = 16;
  m.vit.num_layers = 2;
  m.vit.num_heads = 2;
  m.vit.mlp_ratio = 4;
  m.vit.seed = cfg.seed;
  m.neck = cfg.neck;
  m.pyramid = cfg.pyramid;
  m.head = cfg.head;
  m.classes = 5;
  m.head_channels = 16;
  m.dtype = DType::f64;
  return m;
}

GradCheckResult run_gradcheck(const GradCheckConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig mc = gradcheck_model_config(cfg);
  SegModel model(mc);
  auto rng = component_rng(cfg.seed, "gradcheck");
  std::normal_distribution<double> offset(0.0, cfg.perturb);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  NamedTensors params = model.params();
  for (auto& [name, p] : params) {
    for (auto& v : p.mutable_values<double>()) v += offset(rng);
  }

  const std::size_t h = mc.vit.image_h, w = mc.vit.image_w;
  std::vector<double> pixels(h * w * 3);
  for (auto& v : pixels) v = unit(rng);
  const Tensor image = Tensor::from_values({h, w, 3}, pixels, DType::f64);
  Mask mask(h, w);
  for (auto& l : mask.labels) l = static_cast<std::uint8_t>(rng() % mc.classes);
  mask.at(0, 0) = kIgnoreIndex;

  const Tensor loss = cross_entropy(model.forward(image).logits, mask);
  const GradRecord record = backward(loss);

  auto loss_at = [&]() {
    NoGradGuard guard;
    return cross_entropy(model.forward(image).logits, mask).item();
  };

  GradCheckResult result;
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, p] : params) analytic.push_back(record.grad(p).to_vector());

  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const std::size_t t = s % params.size();
    auto& [name, p] = params[t];
    auto values = p.mutable_values<double>();
    const std::size_t idx = rng() % values.size();
    const double orig = values[idx];
    auto at = [&](double offset) {
      values[idx] = orig + offset;
      return loss_at();
    };
    const double numeric = (at(cfg.step) - at(-cfg.step)) / (2 * cfg.step);
    values[idx] = orig;
    GradCheckEntry e;
    e.param = name;
    e.index = idx;
    e.analytic = analytic[t][idx];
    e.numeric = numeric;
    e.rel_error = relative_error(e.analytic, e.numeric, cfg.floor);
    if (e.rel_error > result.max_rel_error || result.entries.empty()) {
      result.max_rel_error = e.rel_error;
      result.worst = result.entries.size();
    }
    result.entries.push_back(std::move(e));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace vitc
