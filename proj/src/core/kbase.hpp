#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dataset.hpp"
#include "encoder.hpp"

namespace d2k {

// Key of one single-valued ternary cross feature. Field indices are flat
// schema indices; canonical order is lexicographic on
// (uf, vf, cf, uv, vv, cv), which fixes the serialization layout.
struct TernaryKey {
  uint16_t uf = 0, vf = 0, cf = 0;
  uint32_t uv = 0, vv = 0, cv = 0;
  bool operator==(const TernaryKey&) const = default;
};

struct TernaryKeyLess {
  bool operator()(const TernaryKey& a, const TernaryKey& b) const {
    if (a.uf != b.uf) return a.uf < b.uf;
    if (a.vf != b.vf) return a.vf < b.vf;
    if (a.cf != b.cf) return a.cf < b.cf;
    if (a.uv != b.uv) return a.uv < b.uv;
    if (a.vv != b.vv) return a.vv < b.vv;
    return a.cv < b.cv;
  }
};

struct TernaryKeyHash {
  size_t operator()(const TernaryKey& k) const {
    uint64_t a = (uint64_t(k.uf) << 32) | (uint64_t(k.vf) << 16) | k.cf;
    uint64_t b = (uint64_t(k.uv) << 32) | k.vv;
    return static_cast<size_t>(mix64(mix64(a, b), k.cv));
  }
};

enum class UpdatePolicy { RP, AP };

// Exact-match store from ternary keys to fixed-width float vectors. Vectors
// live in one arena; the map holds entry indices.
class KnowledgeBase {
 public:
  KnowledgeBase(size_t dk, Hash256 schema_hash) : dk_(dk), schema_hash_(schema_hash) {}

  size_t dk() const { return dk_; }
  size_t size() const { return index_.size(); }
  const Hash256& schema_hash() const { return schema_hash_; }

  bool contains(const TernaryKey& k) const { return index_.count(k) != 0; }
  const float* find(const TernaryKey& k) const;  // nullptr on miss
  // Stored vector on hit; zeros and hit=false on miss.
  std::pair<std::vector<float>, bool> lookup(const TernaryKey& k) const;

  void insert(const TernaryKey& k, const float* v);  // replaces existing
  void merge(const TernaryKey& k, const float* v, UpdatePolicy policy);

  std::vector<TernaryKey> sorted_keys() const;

  // Provenance, informational only; not part of the file format.
  uint64_t encoder_checksum = 0;
  int64_t source_begin = 0;
  int64_t source_end = 0;

 private:
  size_t dk_;
  Hash256 schema_hash_;
  std::unordered_map<TernaryKey, uint32_t, TernaryKeyHash> index_;
  std::vector<float> arena_;
};

struct KbStats {
  uint64_t entries = 0;
  uint64_t bytes = 0;  // serialized size
  std::map<std::array<uint16_t, 3>, uint64_t> by_field_triple;
};

// Every single-value expansion of every kb-subset ternary cross feature in
// old_data gets an entry; each distinct key is encoded once, in isolation, so
// generation is idempotent and order independent.
KnowledgeBase generate_kb(const std::vector<Sample>& old_data, EncoderModel& encoder,
                          const FeatureSchema& schema);

// New keys are inserted; existing keys are replaced (RP) or averaged with the
// incoming vector (AP). Returns a new base, leaving the input untouched.
KnowledgeBase update_kb(const KnowledgeBase& kb, const std::vector<Sample>& new_data,
                        EncoderModel& new_encoder, const FeatureSchema& schema,
                        UpdatePolicy policy);

KbStats kb_stats(const KnowledgeBase& kb);

void save_kb(const KnowledgeBase& kb, const std::string& path);
KnowledgeBase load_kb(const std::string& path);

uint64_t model_checksum(EncoderModel& model);

}  // namespace d2k
