#pragma once

#include <cstdint>
#include <string>

#include "vitc/serialize.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

enum class PyramidMode { parameter_free, learned };

std::string pyramid_mode_name(PyramidMode mode);
PyramidMode parse_pyramid_mode(const std::string& text);

// Four maps at 4x, 2x, 1x and 1/2x the token grid; equal channel counts.
struct FeaturePyramid {
  Tensor p4;   // [4Hp x 4Wp x C]
  Tensor p8;   // [2Hp x 2Wp x C]
  Tensor p16;  // [Hp x Wp x C]
  Tensor p32;  // [ceil(Hp/2) x ceil(Wp/2) x C]
};

// Parameter-free conversion: bilinear upsampling, identity, 2x2 max pooling.
FeaturePyramid to_pyramid(const Tensor& y);

// Either the parameter-free conversion or the learned variant: stacked 2x2
// stride-2 transposed convolutions (GELU between the two for p4) going up and a
// 2x2 stride-2 convolution going down.
class PyramidAdapter {
 public:
  PyramidAdapter(PyramidMode mode, std::size_t channels, DType dtype, std::uint64_t seed);

  PyramidMode mode() const { return mode_; }
  FeaturePyramid operator()(const Tensor& y) const;

  // "pyramid.{level}.{component}" names; empty in parameter-free mode.
  NamedTensors params() const;

 private:
  PyramidMode mode_;
  std::size_t channels_;
  // [C x 4C] transposed-conv kernels laid out (in, (dy, dx, out)).
  Tensor p4_up1_w_, p4_up1_b_, p4_up2_w_, p4_up2_b_;
  Tensor p8_up_w_, p8_up_b_;
  // [4C x C] strided-conv kernel laid out ((dy, dx, in), out).
  Tensor p32_down_w_, p32_down_b_;
};

}  // namespace vitc
