#pragma once
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace attempt {

// FNV-1a, 64-bit. Used for frozen-parameter integrity checks.
class Fnv1a64 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ull;
    }
  }

  template <class T>
  void update_values(const std::vector<T>& v) {
    if (!v.empty()) update(v.data(), v.size() * sizeof(T));
  }

  void update_string(const std::string& s) { update(s.data(), s.size()); }

  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

}  // namespace attempt
