#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <tuple>

#include "core/metrics.hpp"
#include "core/synthetic.hpp"
#include "core/utilize.hpp"

using namespace d2k;

namespace {

FeatureSchema tri_schema() {
  return parse_schema(
      "user_fields = u1\n"
      "item_fields = v1\n"
      "context_fields = c1\n");
}

FeatureSchema multi_schema() {
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

KnowledgeBase raw_kb(size_t dk, const FeatureSchema& s) {
  return KnowledgeBase(dk, schema_fingerprint(s));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("query set enumerates field triples in nested order") {
  FeatureSchema s = parse_schema(
      "user_fields = u1, u2\n"
      "item_fields = v1, v2\n"
      "context_fields = c1\n");
  Sample x;
  x.values = {{10}, {11}, {20}, {21}, {30}};
  std::vector<QueryTerm> qs = gen_queries(x, s);
  REQUIRE(qs.size() == 4);
  std::vector<std::tuple<uint16_t, uint16_t, uint16_t>> want = {
      {0, 2, 4}, {0, 3, 4}, {1, 2, 4}, {1, 3, 4}};
  for (size_t i = 0; i < 4; ++i) {
    CHECK(std::make_tuple(qs[i].uf, qs[i].vf, qs[i].cf) == want[i]);
    CHECK(qs[i].uv == x.values[qs[i].uf]);
    CHECK(qs[i].vv == x.values[qs[i].vf]);
    CHECK(qs[i].cv == x.values[qs[i].cf]);
  }

  SUBCASE("single field per side gives one query") {
    Sample y;
    y.values = {{1}, {2}, {3}};
    CHECK(gen_queries(y, tri_schema()).size() == 1);
  }
  SUBCASE("kb_subset halves the query count when it drops a user field") {
    FeatureSchema r = s;
    r.kb_subset = {"u1", "v1", "v2", "c1"};
    CHECK(gen_queries(x, r).size() == 2);
  }
  SUBCASE("short sample is rejected") {
    Sample y;
    y.values = {{1}, {2}};
    CHECK_THROWS_AS(gen_queries(y, s), DataError);
  }
}

TEST_CASE("retrieval averages split lookups and zero-fills misses") {
  FeatureSchema s = multi_schema();
  Sample x;
  x.values = {{4}, {1, 3}, {5}, {6}};  // u1, uh, v1, c1

  SUBCASE("all splits hit") {
    KnowledgeBase kb = raw_kb(2, s);
    float a[2] = {2.0f, 2.0f}, b[2] = {0.0f, 0.0f}, c[2] = {7.0f, -1.0f};
    kb.insert({1, 2, 3, 1, 5, 6}, a);  // uh=1 split
    kb.insert({1, 2, 3, 3, 5, 6}, b);  // uh=3 split
    kb.insert({0, 2, 3, 4, 5, 6}, c);  // u1 query
    RetrievedKnowledge r = retrieve(x, kb, s);
    REQUIRE(r.z.rows == 2);
    REQUIRE(r.z.cols == 2);
    CHECK(r.z.at(0, 0) == 7.0);  // (u1,v1,c1) comes first in field order
    CHECK(r.z.at(0, 1) == -1.0);
    CHECK(r.z.at(1, 0) == 1.0);  // mean of (2,2) and (0,0)
    CHECK(r.z.at(1, 1) == 1.0);
    CHECK(r.hit == std::vector<uint8_t>{1, 1});
    CHECK(r.hit_rate == 1.0);
  }

  SUBCASE("a missing split contributes zeros and clears the hit flag") {
    KnowledgeBase kb = raw_kb(2, s);
    float a[2] = {2.0f, 2.0f}, c[2] = {7.0f, -1.0f};
    kb.insert({1, 2, 3, 1, 5, 6}, a);
    kb.insert({0, 2, 3, 4, 5, 6}, c);
    RetrievedKnowledge r = retrieve(x, kb, s);
    CHECK(r.z.at(1, 0) == 1.0);  // (2 + 0) / 2
    CHECK(r.z.at(1, 1) == 1.0);
    CHECK(r.hit == std::vector<uint8_t>{1, 0});
    CHECK(r.hit_rate == doctest::Approx(2.0 / 3.0));
  }

  SUBCASE("empty base yields zero vectors and zero hit rate") {
    KnowledgeBase kb = raw_kb(2, s);
    RetrievedKnowledge r = retrieve(x, kb, s);
    for (double v : r.z.data) CHECK(v == 0.0);
    CHECK(r.hit == std::vector<uint8_t>{0, 0});
    CHECK(r.hit_rate == 0.0);
  }
}

TEST_CASE("batch retrieval equals a naive scalar recomputation bit for bit") {
  FeatureSchema s = parse_schema(
      "user_fields = u1, uh:multi\n"
      "item_fields = v1, v2\n"
      "context_fields = c1\n");
  const size_t dk = 3;
  KnowledgeBase kb = raw_kb(dk, s);
  Rng rng(99);

  std::vector<Sample> batch;
  for (int i = 0; i < 50; ++i) {
    Sample x;
    x.values.resize(5);
    auto draw = [&](uint64_t n) { return static_cast<uint32_t>(rng.below(n)); };
    x.values[0] = {draw(8)};
    size_t hist = 1 + rng.below(3);
    for (size_t h = 0; h < hist; ++h) x.values[1].push_back(draw(8));
    x.values[2] = {draw(8)};
    x.values[3] = {draw(8)};
    x.values[4] = {draw(4)};
    batch.push_back(std::move(x));
  }
  // cover roughly half the occurring keys with random vectors
  for (const Sample& x : batch)
    for (uint16_t uf : s.kb_user_fields())
      for (uint16_t vf : s.kb_item_fields())
        for (uint16_t cf : s.kb_context_fields())
          for (uint32_t uv : x.values[uf])
            for (uint32_t vv : x.values[vf])
              for (uint32_t cv : x.values[cf]) {
                if (rng.uniform() < 0.5) continue;
                float v[dk];
                for (size_t i = 0; i < dk; ++i) v[i] = static_cast<float>(rng.uniform(-2, 2));
                kb.insert({uf, vf, cf, uv, vv, cv}, v);
              }

  RetrievedBatch rb = retrieve_batch(batch, kb, s);
  REQUIRE(rb.flat.rows == 50);
  REQUIRE(rb.flat.cols == 4 * dk);

  size_t hits = 0, total = 0;
  for (size_t n = 0; n < batch.size(); ++n) {
    const Sample& x = batch[n];
    RetrievedKnowledge single = retrieve(x, kb, s);
    size_t q = 0;
    for (uint16_t uf : s.kb_user_fields())
      for (uint16_t vf : s.kb_item_fields())
        for (uint16_t cf : s.kb_context_fields()) {
          for (size_t i = 0; i < dk; ++i) {
            double sum = 0.0;
            size_t count = 0;
            for (uint32_t uv : x.values[uf])
              for (uint32_t vv : x.values[vf])
                for (uint32_t cv : x.values[cf]) {
                  auto [vec, hit] = kb.lookup({uf, vf, cf, uv, vv, cv});
                  if (hit) sum += static_cast<double>(vec[i]);
                  ++count;
                  if (i == 0) {
                    ++total;
                    if (hit) ++hits;
                  }
                }
            double want = sum / static_cast<double>(count);
            CHECK(rb.flat.at(n, q * dk + i) == want);
            CHECK(single.z.at(q, i) == want);
          }
          ++q;
        }
  }
  CHECK(rb.hit_rate == static_cast<double>(hits) / static_cast<double>(total));
}

TEST_CASE("zero sample embedding adapts everything to exactly zero") {
  AdaptationUnit unit(2, 3, 10, /*seed=*/5);
  std::vector<double> x(10, 0.0);
  std::vector<double> z = {0.7, -2.0, 31.5};
  std::vector<double> out = unit.adapt(x, z);
  REQUIRE(out.size() == 3);
  for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("projection shape follows the layer and width bookkeeping") {
  AdaptationUnit unit(2, 8, 80, 1);
  CHECK(unit.w_pro().value.rows == 144);  // 2 * 8 * (8 + 1)
  CHECK(unit.w_pro().value.cols == 80);
  AdaptationUnit one(1, 4, 12, 1);
  CHECK(one.w_pro().value.rows == 20);
  CHECK_THROWS_AS(AdaptationUnit(0, 4, 12, 1), ConfigError);
  CHECK_THROWS_AS(unit.adapt(std::vector<double>(79, 0.0), std::vector<double>(8, 0.0)),
                  ConfigError);
  CHECK_THROWS_AS(unit.adapt(std::vector<double>(80, 0.0), std::vector<double>(7, 0.0)),
                  ConfigError);
}

TEST_CASE("single-layer adaptation matches the hand computation") {
  const size_t dk = 3, w = 5;
  AdaptationUnit unit(1, dk, w, 1);
  Tensor2& wp = unit.w_pro().value;
  for (size_t r = 0; r < wp.rows; ++r)
    for (size_t c = 0; c < wp.cols; ++c)
      wp.at(r, c) = 0.1 * double(r + 1) - 0.07 * double(c) + 0.03 * double((r * (c + 1)) % 5);
  std::vector<double> x = {0.2, 0.1, 0.0, -0.1, 0.05};
  std::vector<double> z = {0.5, -0.3, 0.2};

  std::vector<double> wx(dk * (dk + 1), 0.0);
  for (size_t r = 0; r < wx.size(); ++r)
    for (size_t c = 0; c < w; ++c) wx[r] += x[c] * wp.at(r, c);
  std::vector<double> want(dk);
  for (size_t i = 0; i < dk; ++i) {
    double acc = 0.0;
    for (size_t j = 0; j < dk; ++j) acc += wx[i * dk + j] * z[j];
    want[i] = std::tanh(acc + wx[dk * dk + i]);
  }

  std::vector<double> got = unit.adapt(x, z);
  REQUIRE(got.size() == dk);
  for (size_t i = 0; i < dk; ++i) CHECK(got[i] == want[i]);

  SUBCASE("batched graph applies the same unit to every query slot") {
    std::vector<double> z2 = {-0.8, 0.25, 1.4};
    std::vector<double> want2(dk);
    for (size_t i = 0; i < dk; ++i) {
      double acc = 0.0;
      for (size_t j = 0; j < dk; ++j) acc += wx[i * dk + j] * z2[j];
      want2[i] = std::tanh(acc + wx[dk * dk + i]);
    }
    Tape t(false);
    Tensor2 xe(1, w);
    std::copy(x.begin(), x.end(), xe.data.begin());
    Tensor2 zf(1, 2 * dk);
    std::copy(z.begin(), z.end(), zf.data.begin());
    std::copy(z2.begin(), z2.end(), zf.data.begin() + dk);
    const Tensor2& out = t.val(unit.apply(t, t.input(std::move(xe)), t.input(std::move(zf)), 2));
    REQUIRE(out.cols == 2 * dk);
    for (size_t i = 0; i < dk; ++i) {
      CHECK(out.at(0, i) == want[i]);
      CHECK(out.at(0, dk + i) == want2[i]);
    }
  }
}

TEST_CASE("concat injection appends knowledge after the embedding") {
  std::vector<double> x(20);
  for (size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * double(i);
  RetrievedKnowledge k;
  k.z = Tensor2(4, 8);
  for (size_t i = 0; i < k.z.data.size(); ++i) k.z.data[i] = -0.01 * double(i);
  std::vector<double> out = inject_concat(x, k);
  REQUIRE(out.size() == 52);
  for (size_t i = 0; i < 20; ++i) CHECK(out[i] == x[i]);
  for (size_t i = 0; i < 32; ++i) CHECK(out[20 + i] == k.z.data[i]);

  SUBCASE("zero knowledge leaves a zero tail") {
    k.z.fill(0.0);
    std::vector<double> o = inject_concat(x, k);
    for (size_t i = 20; i < o.size(); ++i) CHECK(o[i] == 0.0);
  }
  SUBCASE("single query adds d_k entries") {
    RetrievedKnowledge one;
    one.z = Tensor2(1, 8);
    CHECK(inject_concat(x, one).size() == 28);
  }
}

TEST_CASE("tower injection adds a knowledge-only correction to the logit") {
  RetrievedKnowledge k;
  k.z = Tensor2(2, 3);
  LinearTower tower;
  tower.w.assign(6, 0.0);

  CHECK(inject_tower(0.0, k, tower) == 0.5);
  CHECK(inject_tower(0.7, k, tower) == sigmoid(0.7));

  k.z.data = {0.5, -1.0, 2.0, 0.25, 0.0, -0.5};
  CHECK(inject_tower(0.7, k, tower) == sigmoid(0.7));  // zero weights ignore knowledge

  tower.w = {0.1, 0.2, -0.3, 0.4, 0.5, -0.6};
  tower.b = 0.05;
  double dot = 0.1 * 0.5 + 0.2 * -1.0 + -0.3 * 2.0 + 0.4 * 0.25 + 0.5 * 0.0 + -0.6 * -0.5;
  CHECK(inject_tower(-0.2, k, tower) == doctest::Approx(sigmoid(-0.2 + dot + 0.05)).epsilon(1e-15));

  tower.w.resize(5);
  CHECK_THROWS_AS(inject_tower(0.0, k, tower), ConfigError);
}

TEST_CASE("zeroed head makes the direct predictor indifferent") {
  FeatureSchema s = tri_schema();
  KnowledgeBase kb = raw_kb(4, s);
  DirectConfig cfg;
  DirectModel m(s, vocab_with(s, 6), 1, 4, cfg);
  for (Param* p : m.params()) p->value.fill(0.0);
  std::vector<Sample> xs(5);
  for (size_t i = 0; i < xs.size(); ++i) xs[i].values = {{uint32_t(i)}, {1}, {2}};
  for (double p : m.predict(xs, kb)) CHECK(p == 0.5);
}

TEST_CASE("gradients flow through adaptation and injection") {
  FeatureSchema s = multi_schema();
  Vocabulary voc = vocab_with(s, 6);
  DirectConfig cfg;
  cfg.adapted = true;
  cfg.adapt_layers = 2;
  cfg.d = 3;
  cfg.seed = 11;
  DirectModel m(s, voc, /*nq=*/2, /*dk=*/3, cfg);

  std::vector<Sample> xs(4);
  xs[0].values = {{1}, {2, 4}, {3}, {1}};
  xs[1].values = {{2}, {1}, {4}, {2}};
  xs[2].values = {{3}, {5, 1, 2}, {2}, {3}};
  xs[3].values = {{4}, {3}, {1}, {4}};
  std::vector<double> labels = {1, 0, 0, 1};
  Tensor2 kflat(4, 6);
  Rng rng(17);
  for (double& v : kflat.data) v = rng.uniform(-1, 1);
  std::vector<uint32_t> idx = {0, 1, 2, 3};

  std::vector<Param*> params = m.params();
  auto loss_fn = [&]() {
    for (Param* p : params) p->zero_grad();
    Tape t;
    Tape::Id loss = t.bce_mean(m.forward_node(t, xs, idx, kflat), labels);
    t.backward(loss);
    return t.val(loss).at(0, 0);
  };
  CHECK(grad_check(loss_fn, params, 1e-4, 320, 7) < 1e-4);
}

TEST_CASE("direct head learns from informative knowledge") {
  GenConfig g;
  g.n_users = 60;
  g.n_items = 60;
  g.n_ctx = 4;
  g.n_samples = 8000;
  g.windows = 2;
  g.sigma = 0.8;
  g.hist_min = 2;
  g.hist_max = 2;
  const uint64_t seed = 21;
  SyntheticData data = gen_synthetic(g, seed);

  // knowledge = the generator's own latent effect for each triple
  KnowledgeBase kb(1, schema_fingerprint(data.schema));
  for (const Sample& x : data.samples)
    for (uint16_t uf : data.schema.kb_user_fields())
      for (uint16_t vf : data.schema.kb_item_fields())
        for (uint16_t cf : data.schema.kb_context_fields())
          for (uint32_t uv : x.values[uf])
            for (uint32_t vv : x.values[vf])
              for (uint32_t cv : x.values[cf]) {
                if (kb.contains({uf, vf, cf, uv, vv, cv})) continue;
                float th = static_cast<float>(
                    synthetic_theta(g, seed, 0, uf, vf, cf, uv, vv, cv));
                kb.insert({uf, vf, cf, uv, vv, cv}, &th);
              }

  std::vector<Sample> train(data.samples.begin(), data.samples.begin() + 5000);
  std::vector<Sample> test(data.samples.begin() + 5000, data.samples.end());
  DirectConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 6;
  cfg.batch = 512;
  cfg.seed = 3;
  DirectModel m = train_direct(train, kb, data.schema, data.vocab, cfg);
  CHECK(m.loss_history().size() >= 2);
  CHECK(m.loss_history().back() < m.loss_history().front());

  std::vector<double> scores = m.predict(test, kb);
  std::vector<uint8_t> labels;
  for (const Sample& x : test) labels.push_back(x.label);
  CHECK(auc(scores, labels) > 0.53);
}

TEST_CASE("adaptation recovers user-conditioned structure") {
  // Knowledge stores an unsigned per-item effect; the label flips its sign by
  // user parity, so a global linear head is blind while an adapted one can
  // condition on the user's row.
  FeatureSchema s = tri_schema();
  const uint32_t n_users = 40, n_items = 40;

  // conditioning: a distinct indicator row per user id, other fields dropped
  std::vector<Tensor2> tabs(s.field_count());
  tabs[0] = Tensor2(n_users + 1, n_users + 1);
  for (uint32_t u = 0; u <= n_users; ++u) tabs[0].at(u, u) = 1.0;

  Rng rng(4242);
  std::vector<double> t_item(n_items + 1, 0.0);
  for (uint32_t v = 1; v <= n_items; ++v) t_item[v] = rng.normal() * 1.5;

  KnowledgeBase kb = raw_kb(1, s);
  for (uint32_t u = 1; u <= n_users; ++u)
    for (uint32_t v = 1; v <= n_items; ++v) {
      float z = static_cast<float>(t_item[v]);
      kb.insert({0, 1, 2, u, v, 1}, &z);
    }

  auto make_samples = [&](size_t n, uint64_t stream) {
    std::vector<Sample> out;
    Rng r(stream);
    for (size_t i = 0; i < n; ++i) {
      uint32_t u = 1 + uint32_t(r.below(n_users));
      uint32_t v = 1 + uint32_t(r.below(n_items));
      double sign = (u % 2 == 0) ? 1.0 : -1.0;
      Sample x;
      x.values = {{u}, {v}, {1}};
      x.label = r.uniform() < sigmoid(2.0 * sign * t_item[v]) ? 1 : 0;
      out.push_back(std::move(x));
    }
    return out;
  };
  std::vector<Sample> train = make_samples(6000, 1);
  std::vector<Sample> test = make_samples(3000, 2);
  std::vector<uint8_t> labels;
  for (const Sample& x : test) labels.push_back(x.label);

  double sum_global = 0.0, sum_adapted = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    DirectConfig cg;
    cg.epochs = 8;
    cg.lr = 0.02;
    cg.seed = seed;
    DirectModel global = train_direct(train, kb, s, cg);
    sum_global += auc(global.predict(test, kb), labels);

    DirectConfig ca = cg;
    ca.adapted = true;
    ca.epochs = 15;
    DirectModel adapted = train_direct(train, kb, s, ca, tabs);
    sum_adapted += auc(adapted.predict(test, kb), labels);
  }
  double mean_global = sum_global / 5.0, mean_adapted = sum_adapted / 5.0;
  CAPTURE(mean_global);
  CAPTURE(mean_adapted);
  CHECK(mean_adapted > mean_global);
  CHECK(mean_adapted > 0.55);
  CHECK(mean_global < mean_adapted - 0.02);

  SUBCASE("training is deterministic for a fixed seed") {
    DirectConfig cd;
    cd.adapted = true;
    cd.epochs = 3;
    cd.seed = 7;
    DirectModel a = train_direct(train, kb, s, cd, tabs);
    DirectModel b = train_direct(train, kb, s, cd, tabs);
    CHECK(a.loss_history() == b.loss_history());
    std::vector<double> pa = a.predict(test, kb), pb = b.predict(test, kb);
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
  }
}

TEST_CASE("training configuration is validated") {
  FeatureSchema s = tri_schema();
  KnowledgeBase kb = raw_kb(2, s);
  std::vector<Sample> xs(4);
  for (size_t i = 0; i < xs.size(); ++i) {
    xs[i].values = {{uint32_t(i + 1)}, {1}, {1}};
    xs[i].label = i % 2;
  }
  DirectConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_direct(xs, kb, s, cfg), ConfigError);
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_direct({}, kb, s, cfg), DataError);
  cfg.adapted = true;
  CHECK_THROWS_AS(train_direct(xs, kb, s, cfg), ConfigError);  // no tables
  std::vector<Tensor2> empty_tabs(s.field_count());
  CHECK_THROWS_AS(train_direct(xs, kb, s, cfg, empty_tabs), ConfigError);
}
