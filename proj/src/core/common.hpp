#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace d2k {

// Error taxonomy. The C API maps each type to a status code.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64: counter-based mixing, stable across platforms.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

// Deterministic RNG used everywhere instead of <random> engines so that
// identical seeds give identical streams on any platform/compiler.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, no cached spare so draws stay position-independent.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// 32-byte fingerprint built from four independently-seeded FNV-1a streams.
// Not cryptographic; only gates file/handle compatibility.
struct Hash256 {
  uint8_t bytes[32] = {0};
  bool operator==(const Hash256& o) const { return std::memcmp(bytes, o.bytes, 32) == 0; }
  bool operator!=(const Hash256& o) const { return !(*this == o); }
  std::string hex() const;
};

Hash256 fingerprint256(const std::string& text);

// Little-endian scalar IO helpers for the binary file formats.
void put_u16(std::string& out, uint16_t v);
void put_u32(std::string& out, uint32_t v);
void put_u64(std::string& out, uint64_t v);
void put_f32(std::string& out, float v);
void put_f64(std::string& out, double v);

class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}
  explicit ByteReader(std::string_view s)
      : data_(reinterpret_cast<const uint8_t*>(s.data())), size_(s.size()) {}
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  float f32();
  double f64();
  void raw(void* dst, size_t n);
  size_t offset() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

 private:
  void need(size_t n);
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace d2k
