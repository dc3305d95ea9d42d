#include "vitc/pyramid.hpp"

#include <stdexcept>

#include "vitc/ops.hpp"
#include "vitc/params.hpp"

namespace vitc {

std::string pyramid_mode_name(PyramidMode mode) {
  return mode == PyramidMode::parameter_free ? "parameter_free" : "learned";
}

PyramidMode parse_pyramid_mode(const std::string& text) {
  if (text == "parameter_free") return PyramidMode::parameter_free;
  if (text == "learned") return PyramidMode::learned;
  throw std::invalid_argument("unknown pyramid mode '" + text + "'");
}

namespace {

void check_grid(const Tensor& y) {
  if (y.rank() != 3) throw ShapeError("to_pyramid: expected Hp x Wp x C map");
  if (y.dim(0) < 2 || y.dim(1) < 2) {
    throw ShapeError("to_pyramid: token grid " + shape_str(y.shape()) + " smaller than 2x2");
  }
}

// Per-pixel [C -> 4C] projection followed by depth-to-space doubles H and W.
Tensor deconv2x2(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  Tensor flat = linear(reshape(x, {h * wd, c}), w, b);
  return depth_to_space2(reshape(flat, {h, wd, w.dim(1)}));
}

Tensor conv2x2_stride2(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor packed = space_to_depth2(x);
  const std::size_t h = packed.dim(0), wd = packed.dim(1);
  Tensor flat = linear(reshape(packed, {h * wd, packed.dim(2)}), w, b);
  return reshape(flat, {h, wd, w.dim(1)});
}

}  // namespace

FeaturePyramid to_pyramid(const Tensor& y) {
  check_grid(y);
  const std::size_t h = y.dim(0), w = y.dim(1);
  return {resample_bilinear(y, 4 * h, 4 * w), resample_bilinear(y, 2 * h, 2 * w), y,
          max_pool2x2(y)};
}

PyramidAdapter::PyramidAdapter(PyramidMode mode, std::size_t channels, DType dtype,
                               std::uint64_t seed)
    : mode_(mode), channels_(channels) {
  if (mode_ == PyramidMode::parameter_free) return;
  auto rng = component_rng(seed, "pyramid");
  const std::size_t c = channels_;
  auto bias = [&](std::size_t n) { return Tensor::zeros({n}, dtype).set_requires_grad(true); };
  p4_up1_w_ = trunc_normal({c, 4 * c}, 0.02, rng, dtype);
  p4_up1_b_ = bias(4 * c);
  p4_up2_w_ = trunc_normal({c, 4 * c}, 0.02, rng, dtype);
  p4_up2_b_ = bias(4 * c);
  p8_up_w_ = trunc_normal({c, 4 * c}, 0.02, rng, dtype);
  p8_up_b_ = bias(4 * c);
  p32_down_w_ = trunc_normal({4 * c, c}, 0.02, rng, dtype);
  p32_down_b_ = bias(c);
}

FeaturePyramid PyramidAdapter::operator()(const Tensor& y) const {
  if (mode_ == PyramidMode::parameter_free) return to_pyramid(y);
  check_grid(y);
  if (y.dim(2) != channels_) throw ShapeError("pyramid: channel count differs from adapter");
  FeaturePyramid p;
  p.p4 = deconv2x2(gelu(deconv2x2(y, p4_up1_w_, p4_up1_b_)), p4_up2_w_, p4_up2_b_);
  p.p8 = deconv2x2(y, p8_up_w_, p8_up_b_);
  p.p16 = y;
  p.p32 = conv2x2_stride2(y, p32_down_w_, p32_down_b_);
  return p;
}

NamedTensors PyramidAdapter::params() const {
  if (mode_ == PyramidMode::parameter_free) return {};
  return {
      {"pyramid.p4.deconv1.weight", p4_up1_w_}, {"pyramid.p4.deconv1.bias", p4_up1_b_},
      {"pyramid.p4.deconv2.weight", p4_up2_w_}, {"pyramid.p4.deconv2.bias", p4_up2_b_},
      {"pyramid.p8.deconv.weight", p8_up_w_},   {"pyramid.p8.deconv.bias", p8_up_b_},
      {"pyramid.p32.conv.weight", p32_down_w_}, {"pyramid.p32.conv.bias", p32_down_b_},
  };
}

}  // namespace vitc
