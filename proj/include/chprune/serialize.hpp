#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "chprune/tensor.hpp"

// Binary tensor format:
//   "PFT1" | rank:u32 | extents:u32 x rank | data:f64 x volume
// All integers and floats are little-endian.

namespace chprune {

namespace detail {

constexpr std::array<char, 4> kTensorMagic{'P', 'F', 'T', '1'};

template <typename T>
T to_little_endian(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    std::reverse(bytes.begin(), bytes.end());
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
  }
}

template <typename T>
void write_le(std::ostream& os, T value) {
  value = to_little_endian(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error("tensor stream truncated");
  }
  return to_little_endian(value);
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(detail::kTensorMagic.data(), detail::kTensorMagic.size());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.raw()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) detail::write_le<double>(os, v);
  }
  if (!os) throw Error("failed to write tensor");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size())) throw Error("tensor stream truncated");
  if (magic != detail::kTensorMagic) throw Error("bad tensor magic (expected PFT1)");
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank == 0 || rank > 8) throw Error("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_le<std::uint32_t>(is);
  Tensor t(shape);
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(t.raw()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw Error("tensor stream truncated");
    }
  } else {
    for (auto& v : t.data()) v = detail::read_le<double>(is);
  }
  return t;
}

}  // namespace chprune
