#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <tuple>

#include "core/kbase.hpp"
#include "core/synthetic.hpp"

using namespace d2k;

namespace {

FeatureSchema mini_schema() {
  return parse_schema(
      "user_fields = u1, uh:multi\n"
      "item_fields = v1\n"
      "context_fields = c1\n");
}

Vocabulary vocab_with(const FeatureSchema& s, uint32_t tokens_per_field) {
  Vocabulary v(s.field_count());
  for (size_t f = 0; f < s.field_count(); ++f)
    for (uint32_t k = 0; k + 1 < tokens_per_field; ++k)
      v.encode_or_add(f, "t" + std::to_string(k));
  return v;
}

EncoderModel mini_encoder(const FeatureSchema& s, uint64_t seed = 3) {
  EncoderConfig cfg;
  cfg.d = 4;
  cfg.dk = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 3;
  cfg.knowledge_hidden = 3;
  cfg.seed = seed;
  return EncoderModel(s, vocab_with(s, 8), cfg);
}

using KeyTuple = std::tuple<uint16_t, uint16_t, uint16_t, uint32_t, uint32_t, uint32_t>;

// Independent enumeration of the keys generate_kb must cover.
std::set<KeyTuple> brute_force_keys(const std::vector<Sample>& data, const FeatureSchema& s) {
  std::set<KeyTuple> keys;
  for (const Sample& x : data)
    for (uint16_t uf : s.kb_user_fields())
      for (uint16_t vf : s.kb_item_fields())
        for (uint16_t cf : s.kb_context_fields())
          for (uint32_t uv : x.values[uf])
            for (uint32_t vv : x.values[vf])
              for (uint32_t cv : x.values[cf]) keys.insert({uf, vf, cf, uv, vv, cv});
  return keys;
}

}  // namespace

TEST_CASE("single-valued sample yields one entry per field triple") {
  FeatureSchema s = parse_schema(
      "user_fields = u1\n"
      "item_fields = v1\n"
      "context_fields = c1\n");
  EncoderModel enc = mini_encoder(s);
  Sample x;
  x.values = {{3}, {5}, {2}};
  KnowledgeBase kb = generate_kb({x}, enc, s);
  CHECK(kb.size() == 1);
  auto [v, hit] = kb.lookup({0, 1, 2, 3, 5, 2});
  CHECK(hit);
  std::vector<double> z = enc.encode_isolated(0, 1, 2, 3, 5, 2);
  for (size_t i = 0; i < v.size(); ++i) CHECK(v[i] == static_cast<float>(z[i]));
}

TEST_CASE("multi-value field expands into one entry per element") {
  FeatureSchema s = mini_schema();
  EncoderModel enc = mini_encoder(s);
  Sample x;
  x.values = {{1}, {2, 4, 6}, {3}, {1}};
  KnowledgeBase kb = generate_kb({x}, enc, s);
  // triples: (u1,v1,c1) gives 1 key, (uh,v1,c1) gives 3
  CHECK(kb.size() == 4);
  for (uint32_t hv : {2u, 4u, 6u}) CHECK(kb.lookup({1, 2, 3, hv, 3, 1}).second);
  CHECK(kb.lookup({0, 2, 3, 1, 3, 1}).second);

  SUBCASE("regeneration from the same data is idempotent") {
    KnowledgeBase kb2 = generate_kb({x, x, x}, enc, s);
    CHECK(kb2.size() == kb.size());
    for (const TernaryKey& k : kb.sorted_keys())
      CHECK(kb2.lookup(k).first == kb.lookup(k).first);
  }
}

TEST_CASE("entry count matches a brute-force key enumeration on synthetic data") {
  GenConfig g;
  g.n_users = 40;
  g.n_items = 40;
  g.n_ctx = 4;
  g.n_samples = 10000;
  g.windows = 2;
  SyntheticData data = gen_synthetic(g, 11);
  EncoderConfig cfg;
  cfg.d = 4;
  cfg.dk = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 3;
  cfg.knowledge_hidden = 3;
  EncoderModel enc(data.schema, data.vocab, cfg);

  KnowledgeBase kb = generate_kb(data.samples, enc, data.schema);
  std::set<KeyTuple> want = brute_force_keys(data.samples, data.schema);
  CHECK(kb.size() == want.size());
  for (const TernaryKey& k : kb.sorted_keys())
    CHECK(want.count({k.uf, k.vf, k.cf, k.uv, k.vv, k.cv}) == 1);

  SUBCASE("metadata reflects the source") {
    CHECK(kb.encoder_checksum == model_checksum(enc));
    CHECK(kb.source_begin == 0);
    CHECK(kb.source_end > kb.source_begin);
  }
}

TEST_CASE("generate rejects an encoder from another schema") {
  FeatureSchema s = mini_schema();
  FeatureSchema other = parse_schema(
      "user_fields = u1\n"
      "item_fields = v1\n"
      "context_fields = c1\n");
  EncoderModel enc = mini_encoder(other);
  Sample x;
  x.values = {{1}, {2}, {3}, {1}};
  CHECK_THROWS_AS(generate_kb({x}, enc, s), ConfigError);
}

TEST_CASE("lookup semantics") {
  KnowledgeBase kb(2, Hash256{});
  float v[2] = {0.25f, -1.5f};
  kb.insert({0, 1, 2, 7, 8, 9}, v);

  SUBCASE("hit returns the stored vector bit-identically") {
    auto [got, hit] = kb.lookup({0, 1, 2, 7, 8, 9});
    CHECK(hit);
    CHECK(got[0] == 0.25f);
    CHECK(got[1] == -1.5f);
  }
  SUBCASE("miss returns zeros and a cleared flag") {
    auto [got, hit] = kb.lookup({0, 1, 2, 7, 8, 10});
    CHECK(!hit);
    CHECK(got == std::vector<float>{0.0f, 0.0f});
    CHECK(kb.find({9, 9, 9, 1, 1, 1}) == nullptr);
  }
  SUBCASE("value id zero is an ordinary key") {
    CHECK(!kb.lookup({0, 1, 2, 0, 0, 0}).second);
    float w[2] = {1.0f, 2.0f};
    kb.insert({0, 1, 2, 0, 0, 0}, w);
    auto [got, hit] = kb.lookup({0, 1, 2, 0, 0, 0});
    CHECK(hit);
    CHECK(got[0] == 1.0f);
  }
}

TEST_CASE("a batch of lookups leaves the base untouched") {
  FeatureSchema s = mini_schema();
  EncoderModel enc = mini_encoder(s);
  Sample x;
  x.values = {{1}, {2, 3}, {4}, {5}};
  KnowledgeBase kb = generate_kb({x}, enc, s);
  save_kb(kb, "kb_before.bin");
  std::string before = read_file("kb_before.bin");
  Rng r(1);
  for (int i = 0; i < 2000; ++i)
    kb.lookup({static_cast<uint16_t>(r.below(3)), 2, 3, static_cast<uint32_t>(r.below(9)),
               static_cast<uint32_t>(r.below(9)), static_cast<uint32_t>(r.below(9))});
  save_kb(kb, "kb_after.bin");
  CHECK(read_file("kb_after.bin") == before);
  std::remove("kb_before.bin");
  std::remove("kb_after.bin");
}

TEST_CASE("update policies") {
  KnowledgeBase kb(2, Hash256{});
  float ones[2] = {1.0f, 1.0f};
  float zeros[2] = {0.0f, 0.0f};
  TernaryKey k{0, 1, 2, 1, 1, 1};

  SUBCASE("averaging merge") {
    kb.insert(k, ones);
    kb.merge(k, zeros, UpdatePolicy::AP);
    CHECK(kb.lookup(k).first == std::vector<float>{0.5f, 0.5f});
  }
  SUBCASE("replacing merge") {
    kb.insert(k, ones);
    kb.merge(k, zeros, UpdatePolicy::RP);
    CHECK(kb.lookup(k).first == std::vector<float>{0.0f, 0.0f});
  }
  SUBCASE("absent key is inserted under either policy") {
    kb.merge(k, ones, UpdatePolicy::AP);
    CHECK(kb.lookup(k).first == std::vector<float>{1.0f, 1.0f});
    TernaryKey k2{0, 1, 2, 2, 2, 2};
    kb.merge(k2, zeros, UpdatePolicy::RP);
    CHECK(kb.lookup(k2).second);
  }
}

TEST_CASE("repeated averaging converges toward the incoming vector") {
  KnowledgeBase kb(2, Hash256{});
  float start[2] = {2.0f, -3.0f};
  float target[2] = {0.25f, 0.5f};
  TernaryKey k{0, 1, 2, 4, 4, 4};
  kb.insert(k, start);
  float prev[2] = {std::abs(2.0f - 0.25f), std::abs(-3.0f - 0.5f)};
  for (int step = 0; step < 60; ++step) {
    kb.merge(k, target, UpdatePolicy::AP);
    auto v = kb.lookup(k).first;
    for (int i = 0; i < 2; ++i) {
      float gap = std::abs(v[i] - target[i]);
      CHECK(gap <= prev[i]);
      prev[i] = gap;
    }
  }
  CHECK(kb.lookup(k).first[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(kb.lookup(k).first[1] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("block update inserts new keys and merges existing ones") {
  FeatureSchema s = parse_schema(
      "user_fields = u1\n"
      "item_fields = v1\n"
      "context_fields = c1\n");
  EncoderModel old_enc = mini_encoder(s, 3);
  EncoderModel new_enc = mini_encoder(s, 4);  // different parameters

  Sample a, b;
  a.values = {{1}, {2}, {3}};
  b.values = {{5}, {6}, {7}};
  KnowledgeBase kb = generate_kb({a}, old_enc, s);
  REQUIRE(kb.size() == 1);

  auto isolated = [&](EncoderModel& e, const Sample& x) {
    std::vector<double> z = e.encode_isolated(0, 1, 2, x.values[0][0], x.values[1][0], x.values[2][0]);
    return std::vector<float>{static_cast<float>(z[0]), static_cast<float>(z[1])};
  };

  SUBCASE("replacement takes the new encoder's vector") {
    KnowledgeBase out = update_kb(kb, {a, b}, new_enc, s, UpdatePolicy::RP);
    CHECK(out.size() == 2);
    CHECK(out.lookup({0, 1, 2, 1, 2, 3}).first == isolated(new_enc, a));
    CHECK(out.lookup({0, 1, 2, 5, 6, 7}).first == isolated(new_enc, b));
    CHECK(kb.size() == 1);  // input base untouched
  }
  SUBCASE("averaging mixes old and new vectors once per distinct key") {
    KnowledgeBase out = update_kb(kb, {a, a, a}, new_enc, s, UpdatePolicy::AP);
    std::vector<float> oldv = isolated(old_enc, a), newv = isolated(new_enc, a);
    auto got = out.lookup({0, 1, 2, 1, 2, 3}).first;
    for (int i = 0; i < 2; ++i)
      CHECK(got[i] == static_cast<float>(0.5 * (double(oldv[i]) + double(newv[i]))));
  }
  SUBCASE("width mismatch is rejected") {
    EncoderConfig cfg;
    cfg.d = 4;
    cfg.dk = 3;
    cfg.heads = 2;
    EncoderModel wide(s, vocab_with(s, 8), cfg);
    CHECK_THROWS_AS(update_kb(kb, {a}, wide, s, UpdatePolicy::RP), ConfigError);
  }
}

TEST_CASE("statistics") {
  SUBCASE("empty base") {
    KnowledgeBase kb(4, Hash256{});
    KbStats st = kb_stats(kb);
    CHECK(st.entries == 0);
    CHECK(st.by_field_triple.empty());
    save_kb(kb, "kb_empty.bin");
    CHECK(read_file("kb_empty.bin").size() == st.bytes);
    std::remove("kb_empty.bin");
  }
  SUBCASE("histogram partitions the entries and bytes match the file") {
    FeatureSchema s = mini_schema();
    EncoderModel enc = mini_encoder(s);
    Sample x;
    x.values = {{1}, {2, 3, 4}, {5}, {6}};
    Sample y;
    y.values = {{2}, {3}, {5}, {6}};
    KnowledgeBase kb = generate_kb({x, y}, enc, s);
    KbStats st = kb_stats(kb);
    uint64_t total = 0;
    for (const auto& [triple, n] : st.by_field_triple) total += n;
    CHECK(total == st.entries);
    CHECK(st.by_field_triple.at({0, 2, 3}) == 2);  // (u1,v1,c1): values (1,5,6) and (2,5,6)
    CHECK(st.by_field_triple.at({1, 2, 3}) == 3);  // (uh,v1,c1): 2,3,4 with y's 3 repeated
    save_kb(kb, "kb_stats.bin");
    CHECK(read_file("kb_stats.bin").size() == st.bytes);
    std::remove("kb_stats.bin");
  }
  SUBCASE("restricting the kb field subset strictly shrinks the base") {
    GenConfig g;
    g.n_users = 30;
    g.n_items = 30;
    g.n_ctx = 4;
    g.n_samples = 3000;
    g.windows = 1;
    SyntheticData data = gen_synthetic(g, 9);
    std::string reduced_text = serialize_schema(data.schema) +
                               "kb_subset = ugroup, uhist, icat, ibrand, hour\n";
    FeatureSchema reduced = parse_schema(reduced_text);
    EncoderConfig cfg;
    cfg.d = 4;
    cfg.dk = 2;
    cfg.heads = 2;
    cfg.ffn_hidden = 3;
    cfg.knowledge_hidden = 3;
    EncoderModel full_enc(data.schema, data.vocab, cfg);
    EncoderModel red_enc(reduced, data.vocab, cfg);
    KnowledgeBase full = generate_kb(data.samples, full_enc, data.schema);
    KnowledgeBase small = generate_kb(data.samples, red_enc, reduced);
    CHECK(small.size() < full.size());
    CHECK(small.size() == brute_force_keys(data.samples, reduced).size());
  }
}

TEST_CASE("file round trips") {
  GenConfig g;
  g.n_users = 25;
  g.n_items = 25;
  g.n_ctx = 3;
  g.n_samples = 2500;
  g.windows = 1;
  SyntheticData data = gen_synthetic(g, 2);
  EncoderConfig cfg;
  cfg.d = 4;
  cfg.dk = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 3;
  cfg.knowledge_hidden = 3;
  EncoderModel senc(data.schema, data.vocab, cfg);
  KnowledgeBase kb = generate_kb(data.samples, senc, data.schema);
  REQUIRE(kb.size() > 1000);

  save_kb(kb, "kb_rt.bin");
  KnowledgeBase back = load_kb("kb_rt.bin");
  CHECK(back.size() == kb.size());
  CHECK(back.dk() == kb.dk());
  CHECK(back.schema_hash() == kb.schema_hash());
  for (const TernaryKey& k : kb.sorted_keys()) {
    auto [v, hit] = back.lookup(k);
    CHECK(hit);
    CHECK(v == kb.lookup(k).first);
  }
  save_kb(back, "kb_rt2.bin");
  CHECK(read_file("kb_rt2.bin") == read_file("kb_rt.bin"));

  SUBCASE("insertion order does not affect the bytes") {
    KnowledgeBase fwd(kb.dk(), kb.schema_hash());
    KnowledgeBase rev(kb.dk(), kb.schema_hash());
    auto keys = kb.sorted_keys();
    for (const TernaryKey& k : keys) fwd.insert(k, kb.find(k));
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) rev.insert(*it, kb.find(*it));
    save_kb(fwd, "kb_fwd.bin");
    save_kb(rev, "kb_rev.bin");
    CHECK(read_file("kb_fwd.bin") == read_file("kb_rev.bin"));
    std::remove("kb_fwd.bin");
    std::remove("kb_rev.bin");
  }
  SUBCASE("truncation mid-entry is a format error") {
    std::string raw = read_file("kb_rt.bin");
    raw.resize(raw.size() - 7);
    write_file("kb_trunc.bin", raw);
    CHECK_THROWS_WITH_AS(load_kb("kb_trunc.bin"),
                         doctest::Contains("offset"), FormatError);
    std::remove("kb_trunc.bin");
  }
  SUBCASE("bad magic is a format error") {
    std::string raw = read_file("kb_rt.bin");
    raw[1] = 'x';
    write_file("kb_mag.bin", raw);
    CHECK_THROWS_AS(load_kb("kb_mag.bin"), FormatError);
    std::remove("kb_mag.bin");
  }
  SUBCASE("empty base round trip") {
    KnowledgeBase empty(8, Hash256{});
    save_kb(empty, "kb_e.bin");
    KnowledgeBase back2 = load_kb("kb_e.bin");
    CHECK(back2.size() == 0);
    CHECK(back2.dk() == 8);
    std::remove("kb_e.bin");
  }
  std::remove("kb_rt.bin");
  std::remove("kb_rt2.bin");
}
