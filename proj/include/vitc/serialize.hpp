#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "vitc/tensor.hpp"

namespace vitc {

// Tensor record layout, all integers little-endian:
//   "VTCT" | u16 version | u8 dtype (0 = f32, 1 = f64) | u8 rank |
//   rank x u64 extents | row-major IEEE-754 payload
inline constexpr std::uint16_t kTensorFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Checkpoint archive: a sequence of (u32 name length, UTF-8 name, tensor
// record) entries until end of file.
void write_checkpoint(std::ostream& os, const NamedTensors& entries);
NamedTensors read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace vitc
