#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace vitc {

inline constexpr std::uint8_t kIgnoreIndex = 255;

// Per-pixel class indices, row-major.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  bool operator==(const Mask&) const = default;
};

}  // namespace vitc
