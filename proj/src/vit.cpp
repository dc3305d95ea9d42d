#include "vitc/vit.hpp"

#include <stdexcept>

#include "vitc/ops.hpp"
#include "vitc/params.hpp"

namespace vitc {

namespace {

constexpr double kInitStd = 0.02;

Tensor zeros_param(Shape shape, DType dtype) {
  return Tensor::zeros(std::move(shape), dtype).set_requires_grad(true);
}

Tensor ones_param(Shape shape, DType dtype) {
  return Tensor::full(std::move(shape), 1.0, dtype).set_requires_grad(true);
}

}  // namespace

void ViTConfig::validate() const {
  if (patch == 0 || image_h == 0 || image_w == 0) {
    throw std::invalid_argument("ViTConfig: zero patch or image extent");
  }
  if (image_h % patch != 0 || image_w % patch != 0) {
    throw std::invalid_argument("ViTConfig: image extents not divisible by patch");
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("ViTConfig: embed_dim not divisible by num_heads");
  }
  if (num_layers < 1) throw std::invalid_argument("ViTConfig: num_layers must be >= 1");
  if (mlp_ratio < 1) throw std::invalid_argument("ViTConfig: mlp_ratio must be >= 1");
}

BlockParams BlockParams::init(std::size_t dim, std::size_t mlp_ratio, std::mt19937_64& rng,
                              DType dtype) {
  BlockParams p;
  const std::size_t hidden = dim * mlp_ratio;
  p.ln1_gain = ones_param({dim}, dtype);
  p.ln1_bias = zeros_param({dim}, dtype);
  p.qkv_weight = trunc_normal({dim, 3 * dim}, kInitStd, rng, dtype);
  p.qkv_bias = zeros_param({3 * dim}, dtype);
  p.proj_weight = trunc_normal({dim, dim}, kInitStd, rng, dtype);
  p.proj_bias = zeros_param({dim}, dtype);
  p.ln2_gain = ones_param({dim}, dtype);
  p.ln2_bias = zeros_param({dim}, dtype);
  p.fc1_weight = trunc_normal({dim, hidden}, kInitStd, rng, dtype);
  p.fc1_bias = zeros_param({hidden}, dtype);
  p.fc2_weight = trunc_normal({hidden, dim}, kInitStd, rng, dtype);
  p.fc2_bias = zeros_param({dim}, dtype);
  return p;
}

NamedTensors BlockParams::named(const std::string& prefix) const {
  return {
      {prefix + ".ln1.gain", ln1_gain},          {prefix + ".ln1.bias", ln1_bias},
      {prefix + ".attn.qkv.weight", qkv_weight}, {prefix + ".attn.qkv.bias", qkv_bias},
      {prefix + ".attn.proj.weight", proj_weight}, {prefix + ".attn.proj.bias", proj_bias},
      {prefix + ".ln2.gain", ln2_gain},          {prefix + ".ln2.bias", ln2_bias},
      {prefix + ".mlp.fc1.weight", fc1_weight},  {prefix + ".mlp.fc1.bias", fc1_bias},
      {prefix + ".mlp.fc2.weight", fc2_weight},  {prefix + ".mlp.fc2.bias", fc2_bias},
  };
}

Tensor transformer_block(const Tensor& tokens, const BlockParams& p, std::size_t heads) {
  if (tokens.rank() != 2 || tokens.dim(1) != p.ln1_gain.dim(0)) {
    throw ShapeError("transformer_block: tokens " + shape_str(tokens.shape()) +
                     " do not match block width " + std::to_string(p.ln1_gain.dim(0)));
  }
  Tensor h = layer_norm(tokens, p.ln1_gain, p.ln1_bias);
  h = linear(h, p.qkv_weight, p.qkv_bias);
  h = multi_head_attention(h, heads);
  h = linear(h, p.proj_weight, p.proj_bias);
  Tensor x = add(tokens, h);

  h = layer_norm(x, p.ln2_gain, p.ln2_bias);
  h = gelu(linear(h, p.fc1_weight, p.fc1_bias));
  h = linear(h, p.fc2_weight, p.fc2_bias);
  return add(x, h);
}

LayerOutput split_tokens(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t c = tokens.dim(1);
  if (tokens.dim(0) != grid_h * grid_w + 1) {
    throw ShapeError("split_tokens: token count does not match grid");
  }
  return {reshape(slice_rows(tokens, 1, grid_h * grid_w), {grid_h, grid_w, c}),
          reshape(slice_rows(tokens, 0, 1), {c})};
}

VitEncoder::VitEncoder(const ViTConfig& cfg, DType dtype) : cfg_(cfg), dtype_(dtype) {
  cfg_.validate();
  auto rng = component_rng(cfg_.seed, "encoder");
  const std::size_t c = cfg_.embed_dim;
  patch_weight_ = trunc_normal({cfg_.patch * cfg_.patch * 3, c}, kInitStd, rng, dtype);
  patch_bias_ = zeros_param({c}, dtype);
  cls_token_ = trunc_normal({1, c}, kInitStd, rng, dtype);
  pos_embed_ = trunc_normal({cfg_.tokens(), c}, kInitStd, rng, dtype);
  blocks_.reserve(cfg_.num_layers);
  for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
    blocks_.push_back(BlockParams::init(c, cfg_.mlp_ratio, rng, dtype));
  }
}

Tensor VitEncoder::patch_embed(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("patch_embed: expected H x W x 3 image, got " + shape_str(image.shape()));
  }
  if (image.dtype() != dtype_) throw DTypeError("patch_embed: image dtype differs from encoder");
  Tensor patches = patchify(image, cfg_.patch);  // throws on non-divisible extents
  const std::size_t gh = image.dim(0) / cfg_.patch;
  const std::size_t gw = image.dim(1) / cfg_.patch;
  Tensor tokens = concat_rows({cls_token_, linear(patches, patch_weight_, patch_bias_)});

  Tensor pos = pos_embed_;
  if (gh != cfg_.grid_h() || gw != cfg_.grid_w()) {
    const std::size_t c = cfg_.embed_dim;
    Tensor grid = reshape(slice_rows(pos_embed_, 1, cfg_.grid_h() * cfg_.grid_w()),
                          {cfg_.grid_h(), cfg_.grid_w(), c});
    grid = reshape(resample_bilinear(grid, gh, gw), {gh * gw, c});
    pos = concat_rows({slice_rows(pos_embed_, 0, 1), grid});
  }
  return add(tokens, pos);
}

LayerStack VitEncoder::encode(const Tensor& image) const {
  Tensor x = patch_embed(image);
  const std::size_t gh = image.dim(0) / cfg_.patch;
  const std::size_t gw = image.dim(1) / cfg_.patch;
  LayerStack stack;
  stack.entries.reserve(blocks_.size());
  for (const auto& block : blocks_) {
    x = transformer_block(x, block, cfg_.num_heads);
    ensure_finite(x, "encoder block output");
    stack.entries.push_back(split_tokens(x, gh, gw));
  }
  return stack;
}

NamedTensors VitEncoder::params() const {
  NamedTensors out{
      {"encoder.patch_embed.weight", patch_weight_},
      {"encoder.patch_embed.bias", patch_bias_},
      {"encoder.cls_token", cls_token_},
      {"encoder.pos_embed", pos_embed_},
  };
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto named = blocks_[i].named("encoder.block" + std::to_string(i));
    out.insert(out.end(), named.begin(), named.end());
  }
  return out;
}

}  // namespace vitc
