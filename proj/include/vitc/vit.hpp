#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vitc/serialize.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

struct ViTConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t patch = 8;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument on a violated divisibility/positivity rule.
  void validate() const;
  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t tokens() const { return grid_h() * grid_w() + 1; }
};

// One transformer block's output, split into its two roles.
struct LayerOutput {
  Tensor patch_tokens;  // [Hp x Wp x C]
  Tensor class_token;   // [C]
};

// Entry i is the output of block i; entry 0 has passed one block.
struct LayerStack {
  std::vector<LayerOutput> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const LayerOutput& operator[](std::size_t i) const { return entries[i]; }
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;    // [C x 3C], [3C]
  Tensor proj_weight, proj_bias;  // [C x C], [C]
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;  // [C x rC], [rC]
  Tensor fc2_weight, fc2_bias;  // [rC x C], [C]

  static BlockParams init(std::size_t dim, std::size_t mlp_ratio, std::mt19937_64& rng,
                          DType dtype);
  NamedTensors named(const std::string& prefix) const;
};

// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)). tokens: [T x C].
Tensor transformer_block(const Tensor& tokens, const BlockParams& params, std::size_t heads);

// Splits a [T x C] block output into class token (row 0) and an Hp x Wp grid.
LayerOutput split_tokens(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w);

class VitEncoder {
 public:
  VitEncoder(const ViTConfig& cfg, DType dtype);

  const ViTConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }

  // image: [H x W x 3] -> [(Hp*Wp + 1) x C], class token first. Images whose
  // extents differ from the configured ones get bilinearly resampled
  // positional embeddings; extents must still be patch multiples.
  Tensor patch_embed(const Tensor& image) const;

  LayerStack encode(const Tensor& image) const;

  // Parameters under "encoder.*" names, in a fixed order.
  NamedTensors params() const;

  std::vector<BlockParams>& blocks() { return blocks_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }

 private:
  ViTConfig cfg_;
  DType dtype_;
  Tensor patch_weight_;  // [p*p*3 x C]
  Tensor patch_bias_;    // [C]
  Tensor cls_token_;     // [1 x C]
  Tensor pos_embed_;     // [T x C]
  std::vector<BlockParams> blocks_;
};

}  // namespace vitc
