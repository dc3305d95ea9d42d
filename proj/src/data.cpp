#include "vitc/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "vitc/ops.hpp"

namespace vitc {

namespace {

using Rgb = std::array<float, 3>;

constexpr std::array<Rgb, kMaxShapeClasses> kPalette = {{
    {0.85f, 0.20f, 0.20f},
    {0.20f, 0.80f, 0.25f},
    {0.20f, 0.30f, 0.90f},
    {0.90f, 0.85f, 0.20f},
    {0.80f, 0.25f, 0.80f},
    {0.20f, 0.80f, 0.85f},
    {0.95f, 0.55f, 0.10f},
}};

// Library distributions are implementation-defined; these are not.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

enum class ShapeKind { rect, disk, triangle };

struct Shape2d {
  ShapeKind kind;
  double cy, cx;
  double a, b;  // half extents (rect) or radius (disk)
  std::array<double, 6> tri;
};

bool inside(const Shape2d& s, double y, double x) {
  switch (s.kind) {
    case ShapeKind::rect:
      return std::abs(y - s.cy) <= s.a && std::abs(x - s.cx) <= s.b;
    case ShapeKind::disk:
      return (y - s.cy) * (y - s.cy) + (x - s.cx) * (x - s.cx) <= s.a * s.a;
    case ShapeKind::triangle: {
      const auto& t = s.tri;  // (y0, x0, y1, x1, y2, x2)
      auto edge = [&](int i, int j) {
        return (t[2 * j + 1] - t[2 * i + 1]) * (y - t[2 * i]) - (t[2 * j] - t[2 * i]) * (x - t[2 * i + 1]);
      };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

Shape2d random_shape(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  const double scale = static_cast<double>(std::min(h, w)) / 64.0;
  Shape2d s{};
  s.kind = static_cast<ShapeKind>(uniform_index(rng, 3));
  s.cy = uniform(rng, 0.1, 0.9) * static_cast<double>(h);
  s.cx = uniform(rng, 0.1, 0.9) * static_cast<double>(w);
  s.a = uniform(rng, 5.0, 15.0) * scale;
  s.b = uniform(rng, 5.0, 15.0) * scale;
  if (s.kind == ShapeKind::triangle) {
    const double r = uniform(rng, 8.0, 18.0) * scale;
    const double phase = uniform(rng, 0.0, 2.0 * M_PI);
    for (int v = 0; v < 3; ++v) {
      const double ang = phase + 2.0 * M_PI * v / 3.0 + uniform(rng, -0.4, 0.4);
      s.tri[2 * v] = s.cy + r * std::sin(ang);
      s.tri[2 * v + 1] = s.cx + r * std::cos(ang);
    }
  }
  return s;
}

SegSample make_sample(std::mt19937_64& rng, std::size_t classes, std::size_t h, std::size_t w) {
  std::vector<float> img(h * w * 3);
  Mask mask(h, w, 0);

  // Background: gray base, low-frequency ripple, per-pixel noise.
  const double base = uniform(rng, 0.35, 0.55);
  const double fy = uniform(rng, 0.05, 0.25), fx = uniform(rng, 0.05, 0.25);
  const double phase = uniform(rng, 0.0, 2.0 * M_PI);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double ripple = 0.08 * std::sin(fy * static_cast<double>(y) + fx * static_cast<double>(x) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        img[(y * w + x) * 3 + c] = static_cast<float>(base + ripple);
      }
    }
  }

  const std::size_t shapes = 1 + uniform_index(rng, 4);
  for (std::size_t k = 0; k < shapes; ++k) {
    const auto cls = static_cast<std::uint8_t>(1 + uniform_index(rng, classes - 1));
    Rgb color = kPalette[cls - 1];
    for (auto& ch : color) ch = static_cast<float>(ch + uniform(rng, -0.08, 0.08));
    const Shape2d s = random_shape(rng, h, w);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (!inside(s, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) continue;
        mask.at(y, x) = cls;
        for (std::size_t c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = color[c];
      }
    }
  }

  for (auto& v : img) v = std::clamp(static_cast<float>(v + uniform(rng, -0.06, 0.06)), 0.0f, 1.0f);
  return {Tensor::from_vector({h, w, 3}, std::move(img)), std::move(mask)};
}

}  // namespace

std::vector<SegSample> gen_shapes_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                                          std::size_t image_h, std::size_t image_w,
                                          std::uint64_t first_index) {
  if (classes < 2) throw std::invalid_argument("gen_shapes_dataset: need at least 2 classes");
  if (classes > kMaxShapeClasses + 1) {
    throw std::invalid_argument("gen_shapes_dataset: at most " + std::to_string(kMaxShapeClasses + 1) +
                                " classes supported, got " + std::to_string(classes));
  }
  if (image_h == 0 || image_w == 0) throw std::invalid_argument("gen_shapes_dataset: empty image");
  std::vector<SegSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + i;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    out.push_back(make_sample(rng, classes, image_h, image_w));
  }
  return out;
}

Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  NoGradGuard guard;
  return resample_bilinear(image.detach(), out_h, out_w);
}

Mask resize_nearest(const Mask& mask, std::size_t out_h, std::size_t out_w) {
  Mask out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * out_w));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

SegSample flip_horizontal(const SegSample& sample) {
  const std::size_t h = sample.mask.height, w = sample.mask.width;
  const std::size_t c = sample.image.dim(2);
  auto src = sample.image.values<float>();
  std::vector<float> img(src.size());
  Mask mask(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t fx = w - 1 - x;
      mask.at(y, x) = sample.mask.at(y, fx);
      for (std::size_t ch = 0; ch < c; ++ch) img[(y * w + x) * c + ch] = src[(y * w + fx) * c + ch];
    }
  }
  return {Tensor::from_vector(sample.image.shape(), std::move(img)), std::move(mask)};
}

SegSample augment_with(const SegSample& sample, const AugmentParams& params, std::size_t crop_h,
                       std::size_t crop_w) {
  SegSample cur = params.flip ? flip_horizontal(sample) : sample;
  const std::size_t h = cur.mask.height, w = cur.mask.width;
  const auto rh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * params.ratio)));
  const auto rw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * params.ratio)));
  if (rh != h || rw != w) {
    cur.image = resize_image(cur.image, rh, rw);
    cur.mask = resize_nearest(cur.mask, rh, rw);
  }
  if (rh == crop_h && rw == crop_w && params.offset_y == 0 && params.offset_x == 0) return cur;

  const std::size_t c = cur.image.dim(2);
  auto src = cur.image.values<float>();
  std::vector<float> img(crop_h * crop_w * c, 0.0f);
  Mask mask(crop_h, crop_w, kIgnoreIndex);
  for (std::size_t y = 0; y < crop_h; ++y) {
    const std::size_t sy = params.offset_y + y;
    if (sy >= rh) break;
    for (std::size_t x = 0; x < crop_w; ++x) {
      const std::size_t sx = params.offset_x + x;
      if (sx >= rw) break;
      mask.at(y, x) = cur.mask.at(sy, sx);
      for (std::size_t ch = 0; ch < c; ++ch) img[(y * crop_w + x) * c + ch] = src[(sy * rw + sx) * c + ch];
    }
  }
  return {Tensor::from_vector({crop_h, crop_w, c}, std::move(img)), std::move(mask)};
}

SegSample augment(const SegSample& sample, std::mt19937_64& rng, std::size_t crop_h,
                  std::size_t crop_w) {
  AugmentParams p;
  p.flip = uniform01(rng) < 0.5;
  p.ratio = uniform(rng, 0.5, 2.0);
  const auto rh = static_cast<std::size_t>(std::lround(static_cast<double>(sample.mask.height) * p.ratio));
  const auto rw = static_cast<std::size_t>(std::lround(static_cast<double>(sample.mask.width) * p.ratio));
  p.offset_y = rh > crop_h ? uniform_index(rng, rh - crop_h + 1) : 0;
  p.offset_x = rw > crop_w ? uniform_index(rng, rw - crop_w + 1) : 0;
  return augment_with(sample, p, crop_h, crop_w);
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_ppm: expected H x W x 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (double v : image.to_vector()) {
    os.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(mask.labels.data()), static_cast<std::streamsize>(mask.size()));
}

}  // namespace vitc
