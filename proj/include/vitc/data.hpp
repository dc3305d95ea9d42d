#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "vitc/mask.hpp"
#include "vitc/tensor.hpp"

namespace vitc {

struct SegSample {
  Tensor image;  // [H x W x 3], f32, values in [0, 1]
  Mask mask;
};

// Shape classes 1..kMaxShapeClasses each own a palette color; class 0 is the
// background.
inline constexpr std::size_t kMaxShapeClasses = 7;

// Sample i of the stream is drawn from its own generator seeded by
// (seed, first_index + i), so disjoint index ranges of one seed give
// disjoint, reproducible splits.
std::vector<SegSample> gen_shapes_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                                          std::size_t image_h, std::size_t image_w,
                                          std::uint64_t first_index = 0);

struct AugmentParams {
  bool flip = false;
  double ratio = 1.0;
  // Top-left corner of the crop window inside the resized sample.
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
};

// Horizontal flip, bilinear image / nearest mask resize by `ratio`, then a
// crop_h x crop_w window; the part of the window outside the resized sample is
// zero in the image and kIgnoreIndex in the mask.
SegSample augment_with(const SegSample& sample, const AugmentParams& params, std::size_t crop_h,
                       std::size_t crop_w);

// Flip with probability 0.5, ratio uniform in [0.5, 2], random crop offset.
SegSample augment(const SegSample& sample, std::mt19937_64& rng, std::size_t crop_h,
                  std::size_t crop_w);

SegSample flip_horizontal(const SegSample& sample);

// Nearest-neighbour resize; source index floor((d + 0.5) * in / out).
Mask resize_nearest(const Mask& mask, std::size_t out_h, std::size_t out_w);

// Image resize without autograd history.
Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w);

// Binary PPM (P6) of an [H x W x 3] image in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
// Binary PGM (P5), class index as gray level.
void write_pgm(const std::filesystem::path& path, const Mask& mask);

}  // namespace vitc
