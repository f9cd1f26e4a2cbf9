#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace d2k {

namespace {

// Distinct stream tags keep the counter-based draws independent.
constexpr uint64_t kTagTheta = 0x7468657461u;
constexpr uint64_t kTagDriftKeep = 0x6b656570u;
constexpr uint64_t kTagDriftDraw = 0x64726177u;
constexpr uint64_t kTagSample = 0x73616d70u;
constexpr uint64_t kTagAttr = 0x61747472u;
constexpr uint64_t kTagPool = 0x706f6f6cu;

uint64_t triple_hash(uint64_t seed, uint16_t uf, uint16_t vf, uint16_t cf, uint32_t uv,
                     uint32_t vv, uint32_t cv) {
  uint64_t h = mix64(seed, kTagTheta);
  h = mix64(h, (uint64_t(uf) << 32) | (uint64_t(vf) << 16) | cf);
  h = mix64(h, uv);
  h = mix64(h, vv);
  h = mix64(h, cv);
  return h;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

uint32_t derived_attr(uint64_t seed, uint32_t id, uint64_t salt, uint32_t mod) {
  return static_cast<uint32_t>(mix64(mix64(seed, kTagAttr ^ salt), id) % mod);
}

}  // namespace

double synthetic_theta(const GenConfig& cfg, uint64_t seed, uint32_t window, uint16_t uf,
                       uint16_t vf, uint16_t cf, uint32_t uv, uint32_t vv, uint32_t cv) {
  if (cfg.sigma == 0.0) return 0.0;
  uint64_t key = triple_hash(seed, uf, vf, cf, uv, vv, cv);
  double th = cfg.sigma * Rng(key).normal();
  if (cfg.drift_rate <= 0.0) return th;
  for (uint32_t w = 1; w <= window; ++w) {
    if (Rng(mix64(key, mix64(kTagDriftKeep, w))).uniform() < cfg.drift_rate)
      th = cfg.sigma * Rng(mix64(key, mix64(kTagDriftDraw, w))).normal();
  }
  return th;
}

double synthetic_prob(const GenConfig& cfg, uint64_t seed, const FeatureSchema& schema,
                      const Sample& sample, uint32_t window) {
  double z = cfg.bias;
  size_t fu = schema.user_count(), fv = schema.item_count(), fc = schema.context_count();
  for (size_t a = 0; a < fu; ++a)
    for (size_t b = 0; b < fv; ++b)
      for (size_t c = 0; c < fc; ++c) {
        uint16_t uf = static_cast<uint16_t>(a);
        uint16_t vf = static_cast<uint16_t>(schema.item_offset() + b);
        uint16_t cf = static_cast<uint16_t>(schema.context_offset() + c);
        for (uint32_t uv : sample.values[uf])
          for (uint32_t vv : sample.values[vf])
            for (uint32_t cv : sample.values[cf])
              z += synthetic_theta(cfg, seed, window, uf, vf, cf, uv, vv, cv);
      }
  return sigmoid(z);
}

SyntheticData gen_synthetic(const GenConfig& cfg, uint64_t seed) {
  if (cfg.n_users == 0 || cfg.n_items == 0 || cfg.n_ctx == 0)
    throw ConfigError("gen_synthetic: vocab sizes must be positive");
  if (cfg.windows == 0 || cfg.n_samples < cfg.windows)
    throw ConfigError("gen_synthetic: need at least one sample per window");
  if (cfg.hist_min < 1 || cfg.hist_max < cfg.hist_min || cfg.hist_pool == 0)
    throw ConfigError("gen_synthetic: bad history configuration");
  if (cfg.drift_rate < 0.0 || cfg.drift_rate > 1.0)
    throw ConfigError("gen_synthetic: drift_rate must be in [0, 1]");

  SyntheticData out;
  out.schema.user_fields = {{"uid", FieldKind::Single},
                            {"ugroup", FieldKind::Single},
                            {"uhist", FieldKind::Multi}};
  out.schema.item_fields = {{"iid", FieldKind::Single},
                            {"icat", FieldKind::Single},
                            {"ibrand", FieldKind::Single}};
  out.schema.context_fields = {{"hour", FieldKind::Single}};
  out.schema.validate();

  out.vocab = Vocabulary(out.schema.field_count());
  auto fill_vocab = [&](size_t field, const std::string& prefix, uint32_t n) {
    for (uint32_t k = 0; k < n; ++k)
      out.vocab.encode_or_add(field, prefix + std::to_string(k));
  };
  fill_vocab(0, "u", cfg.n_users);
  fill_vocab(1, "g", cfg.n_groups);
  fill_vocab(2, "i", cfg.n_items);  // history holds item tokens
  fill_vocab(3, "i", cfg.n_items);
  fill_vocab(4, "c", cfg.n_cats);
  fill_vocab(5, "b", cfg.n_brands);
  fill_vocab(6, "h", cfg.n_ctx);

  out.samples.resize(cfg.n_samples);
  for (uint64_t i = 0; i < cfg.n_samples; ++i) {
    Rng r(mix64(mix64(seed, kTagSample), i));
    uint32_t window = static_cast<uint32_t>(i * cfg.windows / cfg.n_samples);
    uint32_t uid = static_cast<uint32_t>(r.below(cfg.n_users));
    uint32_t iid = static_cast<uint32_t>(r.below(cfg.n_items));
    uint32_t hour = static_cast<uint32_t>(r.below(cfg.n_ctx));
    uint32_t hist_len = cfg.hist_min + static_cast<uint32_t>(
                                           r.below(cfg.hist_max - cfg.hist_min + 1));

    Sample& s = out.samples[i];
    s.values.resize(7);
    s.values[0] = {uid + 1};
    s.values[1] = {derived_attr(seed, uid, 1, cfg.n_groups) + 1};
    s.values[2].reserve(hist_len);
    for (uint32_t j = 0; j < hist_len; ++j) {
      uint64_t slot = r.below(cfg.hist_pool);
      uint32_t item = static_cast<uint32_t>(mix64(mix64(seed, kTagPool), mix64(uid, slot)) %
                                            cfg.n_items);
      s.values[2].push_back(item + 1);
    }
    s.values[3] = {iid + 1};
    s.values[4] = {derived_attr(seed, iid, 2, cfg.n_cats) + 1};
    s.values[5] = {derived_attr(seed, iid, 3, cfg.n_brands) + 1};
    s.values[6] = {hour + 1};

    int64_t offset = i == 0 ? 0 : static_cast<int64_t>(r.below(
                                      static_cast<uint64_t>(cfg.window_seconds)));
    s.timestamp = int64_t(window) * cfg.window_seconds + offset;

    double p = synthetic_prob(cfg, seed, out.schema, s, window);
    s.label = r.uniform() < p ? 1 : 0;
  }
  return out;
}

std::string theta_table_tsv(const GenConfig& cfg, uint64_t seed, const FeatureSchema& schema,
                            const std::vector<Sample>& samples) {
  size_t fu = schema.user_count(), fv = schema.item_count(), fc = schema.context_count();
  std::set<std::tuple<uint16_t, uint16_t, uint16_t, uint32_t, uint32_t, uint32_t, uint32_t>>
      seen;
  int64_t t0 = samples.empty() ? 0 : samples[0].timestamp;
  for (const Sample& s : samples) t0 = std::min(t0, s.timestamp);
  for (const Sample& s : samples) {
    uint32_t window = static_cast<uint32_t>((s.timestamp - t0) / cfg.window_seconds);
    for (size_t a = 0; a < fu; ++a)
      for (size_t b = 0; b < fv; ++b)
        for (size_t c = 0; c < fc; ++c) {
          uint16_t uf = static_cast<uint16_t>(a);
          uint16_t vf = static_cast<uint16_t>(schema.item_offset() + b);
          uint16_t cf = static_cast<uint16_t>(schema.context_offset() + c);
          for (uint32_t uv : s.values[uf])
            for (uint32_t vv : s.values[vf])
              for (uint32_t cv : s.values[cf]) seen.insert({uf, vf, cf, uv, vv, cv, window});
        }
  }
  std::string out = "uf\tvf\tcf\tuv\tvv\tcv\twindow\ttheta\n";
  char buf[64];
  for (const auto& [uf, vf, cf, uv, vv, cv, w] : seen) {
    double th = synthetic_theta(cfg, seed, w, uf, vf, cf, uv, vv, cv);
    snprintf(buf, sizeof(buf), "%.17g", th);
    out += std::to_string(uf) + "\t" + std::to_string(vf) + "\t" + std::to_string(cf) + "\t" +
           std::to_string(uv) + "\t" + std::to_string(vv) + "\t" + std::to_string(cv) + "\t" +
           std::to_string(w) + "\t" + buf + "\n";
  }
  return out;
}

}  // namespace d2k
