#include "kbase.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace d2k {

namespace {

constexpr char kMagic[4] = {'D', '2', 'K', '1'};
constexpr uint32_t kVersion = 1;

size_t entry_bytes(size_t dk) { return 3 * 2 + 3 * 4 + dk * 4; }
constexpr size_t kHeaderBytes = 4 + 4 + 4 + 8 + 32;

// Single-value ternary keys of one sample, in deterministic order.
template <typename Fn>
void expand_sample(const Sample& s, const std::vector<uint16_t>& ufs,
                   const std::vector<uint16_t>& vfs, const std::vector<uint16_t>& cfs, Fn&& fn) {
  for (uint16_t uf : ufs)
    for (uint16_t vf : vfs)
      for (uint16_t cf : cfs) {
        if (uf >= s.values.size() || vf >= s.values.size() || cf >= s.values.size())
          throw DataError("sample is missing fields required by the schema");
        for (uint32_t uv : s.values[uf])
          for (uint32_t vv : s.values[vf])
            for (uint32_t cv : s.values[cf]) fn(TernaryKey{uf, vf, cf, uv, vv, cv});
      }
}

void check_encoder_schema(const EncoderModel& encoder, const FeatureSchema& schema,
                          const char* what) {
  if (schema_fingerprint(encoder.schema()) != schema_fingerprint(schema))
    throw ConfigError(std::string(what) + ": encoder was trained on a different schema");
}

std::vector<float> isolated_f32(EncoderModel& encoder, const TernaryKey& k) {
  std::vector<double> z = encoder.encode_isolated(k.uf, k.vf, k.cf, k.uv, k.vv, k.cv);
  std::vector<float> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = static_cast<float>(z[i]);
  return out;
}

void source_range(const std::vector<Sample>& data, KnowledgeBase& kb) {
  int64_t lo = std::numeric_limits<int64_t>::max(), hi = std::numeric_limits<int64_t>::min();
  for (const Sample& s : data) {
    lo = std::min(lo, s.timestamp);
    hi = std::max(hi, s.timestamp);
  }
  if (!data.empty()) {
    kb.source_begin = lo;
    kb.source_end = hi;
  }
}

}  // namespace

const float* KnowledgeBase::find(const TernaryKey& k) const {
  auto it = index_.find(k);
  if (it == index_.end()) return nullptr;
  return &arena_[size_t(it->second) * dk_];
}

std::pair<std::vector<float>, bool> KnowledgeBase::lookup(const TernaryKey& k) const {
  const float* p = find(k);
  if (!p) return {std::vector<float>(dk_, 0.0f), false};
  return {std::vector<float>(p, p + dk_), true};
}

void KnowledgeBase::insert(const TernaryKey& k, const float* v) {
  auto it = index_.find(k);
  if (it == index_.end()) {
    uint32_t slot = static_cast<uint32_t>(index_.size());
    index_.emplace(k, slot);
    arena_.insert(arena_.end(), v, v + dk_);
  } else {
    std::copy(v, v + dk_, &arena_[size_t(it->second) * dk_]);
  }
}

void KnowledgeBase::merge(const TernaryKey& k, const float* v, UpdatePolicy policy) {
  auto it = index_.find(k);
  if (it == index_.end()) {
    insert(k, v);
    return;
  }
  float* stored = &arena_[size_t(it->second) * dk_];
  if (policy == UpdatePolicy::RP) {
    std::copy(v, v + dk_, stored);
  } else {
    for (size_t i = 0; i < dk_; ++i)
      stored[i] = static_cast<float>(0.5 * (double(stored[i]) + double(v[i])));
  }
}

std::vector<TernaryKey> KnowledgeBase::sorted_keys() const {
  std::vector<TernaryKey> keys;
  keys.reserve(index_.size());
  for (const auto& [k, slot] : index_) keys.push_back(k);
  std::sort(keys.begin(), keys.end(), TernaryKeyLess{});
  return keys;
}

KnowledgeBase generate_kb(const std::vector<Sample>& old_data, EncoderModel& encoder,
                          const FeatureSchema& schema) {
  check_encoder_schema(encoder, schema, "generate_kb");
  KnowledgeBase kb(encoder.config().dk, schema_fingerprint(schema));
  auto ufs = schema.kb_user_fields();
  auto vfs = schema.kb_item_fields();
  auto cfs = schema.kb_context_fields();
  for (const Sample& s : old_data)
    expand_sample(s, ufs, vfs, cfs, [&](const TernaryKey& k) {
      if (kb.contains(k)) return;  // same encoder, same vector
      std::vector<float> z = isolated_f32(encoder, k);
      kb.insert(k, z.data());
    });
  kb.encoder_checksum = model_checksum(encoder);
  source_range(old_data, kb);
  return kb;
}

KnowledgeBase update_kb(const KnowledgeBase& kb, const std::vector<Sample>& new_data,
                        EncoderModel& new_encoder, const FeatureSchema& schema,
                        UpdatePolicy policy) {
  check_encoder_schema(new_encoder, schema, "update_kb");
  if (new_encoder.config().dk != kb.dk())
    throw ConfigError("update_kb: encoder d_k " + std::to_string(new_encoder.config().dk) +
                      " does not match base d_k " + std::to_string(kb.dk()));
  if (schema_fingerprint(schema) != kb.schema_hash())
    throw ConfigError("update_kb: base was built for a different schema");
  KnowledgeBase out = kb;
  auto ufs = schema.kb_user_fields();
  auto vfs = schema.kb_item_fields();
  auto cfs = schema.kb_context_fields();
  // Each distinct key is applied once per update, no matter how often it
  // occurs in the new block: AP with a key's own vector is not a no-op, so
  // occurrence counts must not leak into the result.
  std::unordered_set<TernaryKey, TernaryKeyHash> seen;
  for (const Sample& s : new_data)
    expand_sample(s, ufs, vfs, cfs, [&](const TernaryKey& k) {
      if (!seen.insert(k).second) return;
      std::vector<float> z = isolated_f32(new_encoder, k);
      out.merge(k, z.data(), policy);
    });
  out.encoder_checksum = model_checksum(new_encoder);
  source_range(new_data, out);
  return out;
}

KbStats kb_stats(const KnowledgeBase& kb) {
  KbStats st;
  st.entries = kb.size();
  st.bytes = kHeaderBytes + kb.size() * entry_bytes(kb.dk());
  for (const TernaryKey& k : kb.sorted_keys()) ++st.by_field_triple[{k.uf, k.vf, k.cf}];
  return st;
}

void save_kb(const KnowledgeBase& kb, const std::string& path) {
  std::string buf;
  buf.reserve(kHeaderBytes + kb.size() * entry_bytes(kb.dk()));
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(kb.dk()));
  put_u64(buf, kb.size());
  buf.append(reinterpret_cast<const char*>(kb.schema_hash().bytes), 32);
  for (const TernaryKey& k : kb.sorted_keys()) {
    put_u16(buf, k.uf);
    put_u16(buf, k.vf);
    put_u16(buf, k.cf);
    put_u32(buf, k.uv);
    put_u32(buf, k.vv);
    put_u32(buf, k.cv);
    const float* v = kb.find(k);
    for (size_t i = 0; i < kb.dk(); ++i) put_f32(buf, v[i]);
  }
  write_file(path, buf);
}

KnowledgeBase load_kb(const std::string& path) {
  std::string data = read_file(path);
  ByteReader r(data);
  auto fail = [&](const std::string& msg) {
    throw FormatError(path + ": " + msg + " at offset " + std::to_string(r.offset()));
  };
  if (data.size() < kHeaderBytes) fail("truncated header");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail("not a knowledge base file (bad magic)");
  uint32_t version = r.u32();
  if (version != kVersion) fail("unsupported version " + std::to_string(version));
  uint32_t dk = r.u32();
  if (dk == 0) fail("zero-width vectors");
  uint64_t count = r.u64();
  Hash256 h;
  r.raw(h.bytes, 32);
  if (r.remaining() != count * entry_bytes(dk))
    fail("expected " + std::to_string(count * entry_bytes(dk)) + " bytes of entries, have " +
         std::to_string(r.remaining()));
  KnowledgeBase kb(dk, h);
  std::vector<float> v(dk);
  for (uint64_t i = 0; i < count; ++i) {
    TernaryKey k;
    k.uf = r.u16();
    k.vf = r.u16();
    k.cf = r.u16();
    k.uv = r.u32();
    k.vv = r.u32();
    k.cv = r.u32();
    for (size_t j = 0; j < dk; ++j) v[j] = r.f32();
    if (kb.contains(k)) fail("duplicate key");
    kb.insert(k, v.data());
  }
  return kb;
}

uint64_t model_checksum(EncoderModel& model) {
  std::string buf;
  for (const Param* p : model.params())
    buf.append(reinterpret_cast<const char*>(p->value.data.data()),
               p->value.data.size() * sizeof(double));
  Hash256 h = fingerprint256(buf);
  uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out = (out << 8) | h.bytes[i];
  return out;
}

}  // namespace d2k
