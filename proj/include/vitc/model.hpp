#pragma once

#include <cstddef>
#include <optional>

#include "vitc/heads.hpp"
#include "vitc/neck.hpp"
#include "vitc/params.hpp"
#include "vitc/pyramid.hpp"
#include "vitc/vit.hpp"

namespace vitc {

struct ModelConfig {
  ViTConfig vit;
  NeckPolicy neck = NeckPolicy::controller_cls();
  PyramidMode pyramid = PyramidMode::parameter_free;
  HeadKind head = HeadKind::mla;
  std::size_t classes = 5;
  std::size_t head_channels = 256;
  DType dtype = DType::f32;
};

struct ParamCounts {
  std::size_t encoder = 0;
  std::size_t neck = 0;
  std::size_t pyramid = 0;
  std::size_t head = 0;
  std::size_t total = 0;
};

struct ForwardOutput {
  Tensor logits;                // [H x W x K] at the input image's extents
  std::optional<Tensor> m_hat;  // controller policies only
};

// Encoder -> neck -> pyramid -> decoder head. All components draw their
// initial values from vit.seed, each from its own stream.
class SegModel {
 public:
  explicit SegModel(const ModelConfig& cfg);
  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ForwardOutput forward(const Tensor& image) const;

  // Fixed-order list of every learnable tensor.
  const NamedTensors& params() const { return params_; }
  ParamCounts count_params() const;

  // Copies stored values into the live parameters (names and shapes must match).
  void load(const NamedTensors& stored) { assign_params(params_, stored); }

  VitEncoder& encoder() { return encoder_; }
  const VitEncoder& encoder() const { return encoder_; }
  DecoderHead& head() { return head_; }

 private:
  ModelConfig cfg_;
  VitEncoder encoder_;
  PyramidAdapter pyramid_;
  DecoderHead head_;
  NamedTensors params_;
};

}  // namespace vitc
