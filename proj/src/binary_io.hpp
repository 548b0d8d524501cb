#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <type_traits>

namespace iceformer::detail {

static_assert(std::endian::native == std::endian::little, "wire formats are little-endian; big-endian hosts unsupported");

template <typename V>
void write_le(std::ostream& out, V value) {
  static_assert(std::is_trivially_copyable_v<V>);
  char buf[sizeof(V)];
  std::memcpy(buf, &value, sizeof(V));
  out.write(buf, sizeof(V));
}

template <typename V>
bool read_le(std::istream& in, V& value) {
  static_assert(std::is_trivially_copyable_v<V>);
  char buf[sizeof(V)];
  if (!in.read(buf, sizeof(V))) return false;
  std::memcpy(&value, buf, sizeof(V));
  return true;
}

}  // namespace iceformer::detail
