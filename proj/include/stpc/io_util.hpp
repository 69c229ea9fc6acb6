#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace stpc {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  template <class V>
    requires std::is_arithmetic_v<V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  template <class V>
  void put_array(const V* data, std::size_t n) {
    const auto* p = reinterpret_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n * sizeof(V));
  }

  const std::vector<char>& bytes() const { return bytes_; }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

/// Writes to `<path>.tmp` and renames over `path`, so readers never observe
/// a partially written file. Throws IoError.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);
inline void atomic_write(const std::filesystem::path& path, const std::vector<char>& bytes) {
  atomic_write(path, std::string_view(bytes.data(), bytes.size()));
}

/// Reads a whole file. Throws IoError.
std::vector<char> read_file(const std::filesystem::path& path);

}  // namespace stpc
