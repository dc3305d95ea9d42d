#include "vitc/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace vitc {

namespace {

constexpr std::array<char, 4> kMagic{'V', 'T', 'C', 'T'};

template <class U>
void put_le(std::ostream& os, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu);
  }
  os.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError("truncated tensor stream");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<U>(v);
}

template <class T, class Bits>
void put_payload(std::ostream& os, std::span<const T> values) {
  for (T v : values) put_le<Bits>(os, std::bit_cast<Bits>(v));
}

template <class T, class Bits>
std::vector<T> get_payload(std::istream& is, std::size_t n) {
  std::vector<T> out(n);
  for (auto& v : out) v = std::bit_cast<T>(get_le<Bits>(is));
  return out;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw FormatError("rank exceeds u8");
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(os, kTensorFormatVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(os, e);
  if (t.dtype() == DType::f32) {
    put_payload<float, std::uint32_t>(os, t.values<float>());
  } else {
    put_payload<double, std::uint64_t>(os, t.values<double>());
  }
  if (!os) throw FormatError("write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("bad tensor magic");
  }
  const auto version = get_le<std::uint16_t>(is);
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const auto code = get_le<std::uint8_t>(is);
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code));
  const auto rank = get_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    if (e == 0) throw FormatError("zero extent");
  }
  const std::size_t n = shape_numel(shape);
  if (static_cast<DType>(code) == DType::f32) {
    return Tensor::from_vector(std::move(shape), get_payload<float, std::uint32_t>(is, n));
  }
  return Tensor::from_vector(std::move(shape), get_payload<double, std::uint64_t>(is, n));
}

void write_checkpoint(std::ostream& os, const NamedTensors& entries) {
  for (const auto& [name, t] : entries) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

NamedTensors read_checkpoint(std::istream& is) {
  NamedTensors out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, entries);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace vitc
