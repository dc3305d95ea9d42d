#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vitc/tensor.hpp"
#include "vitc/vit.hpp"

namespace vitc {

// How the neck turns a LayerStack into one fused map.
struct NeckPolicy {
  enum class Kind { controller_cls, controller_avgpool, last_layer, fixed_layers };

  Kind kind = Kind::controller_cls;
  std::vector<std::size_t> layers;  // fixed_layers only

  static NeckPolicy controller_cls() { return {Kind::controller_cls, {}}; }
  static NeckPolicy controller_avgpool() { return {Kind::controller_avgpool, {}}; }
  static NeckPolicy last_layer() { return {Kind::last_layer, {}}; }
  static NeckPolicy fixed_layers(std::vector<std::size_t> indices) {
    return {Kind::fixed_layers, std::move(indices)};
  }

  // Throws std::invalid_argument if the policy cannot run on an n-layer stack.
  void validate(std::size_t num_layers) const;

  // "controller_cls", "controller_avgpool", "last_layer", "fixed:0,2,3".
  std::string name() const;
  static NeckPolicy parse(const std::string& text);

  bool operator==(const NeckPolicy&) const = default;
};

enum class ControllerSource { class_token, average_pooling };

struct ControllerMatrix {
  Tensor m;      // [N x C] raw controller rows, row i = layer i
  Tensor m_hat;  // [N x C] softmax over the layer axis
  ControllerSource source = ControllerSource::class_token;
};

struct FusedFeature {
  Tensor y;  // [Hp x Wp x C]
  std::optional<ControllerMatrix> controller;
};

// Row i is layer i's class token.
Tensor build_controller_matrix(const LayerStack& stack);

// Row i is the spatial mean of layer i's patch tokens.
Tensor avgpool_controller_matrix(const LayerStack& stack);

// Softmax down each channel column, across the layers.
Tensor layer_softmax(const Tensor& m);

// Output i = patch_tokens(i) scaled channel-wise by row i of m_hat.
std::vector<Tensor> apply_layer_weights(const LayerStack& stack, const Tensor& m_hat);

// Elementwise sum over layers in layer order.
FusedFeature fuse_layers(const std::vector<Tensor>& weighted);

FusedFeature controller_forward(const LayerStack& stack, const NeckPolicy& policy);

// Learnable parameters the neck itself introduces.
std::size_t neck_param_count(const NeckPolicy& policy);

// Header "layer,c0,...,c{C-1}", then one row per layer with 9 significant digits.
void write_weight_csv(std::ostream& os, const Tensor& m_hat);

}  // namespace vitc
