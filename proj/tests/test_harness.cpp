#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/experiment.hpp"
#include "core/metrics.hpp"

using namespace d2k;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.gen.n_users = 40;
  cfg.gen.n_items = 40;
  cfg.gen.n_ctx = 4;
  cfg.gen.n_samples = 2400;
  cfg.gen.windows = 4;
  cfg.gen.sigma = 0.6;
  cfg.gen.hist_min = 1;
  cfg.gen.hist_max = 2;
  cfg.data_seed = 7;
  cfg.p1 = 2;
  cfg.p2 = 3;
  cfg.seeds = {1, 2};

  cfg.encoder.d = 4;
  cfg.encoder.dk = 2;
  cfg.encoder.heads = 2;
  cfg.encoder.ffn_hidden = 4;
  cfg.encoder.knowledge_hidden = 4;
  cfg.encoder.epochs = 2;
  cfg.encoder.batch = 256;

  cfg.backbone.d = 4;
  cfg.backbone.hidden = {8};
  cfg.backbone.epochs = 2;
  cfg.backbone.batch = 256;
  cfg.backbone.lr = 0.01;

  cfg.direct.epochs = 2;
  cfg.direct.lr = 0.01;
  return cfg;
}

FeatureSchema tri_schema() {
  return parse_schema(
      "user_fields = u1\n"
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

std::vector<Sample> random_tri_samples(size_t n, uint64_t seed, uint32_t vmax) {
  Rng r(seed);
  std::vector<Sample> out(n);
  for (Sample& x : out) {
    x.values = {{uint32_t(1 + r.below(vmax))},
                {uint32_t(1 + r.below(vmax))},
                {uint32_t(1 + r.below(2))}};
    x.label = r.uniform() < 0.5 ? 1 : 0;
  }
  return out;
}

}  // namespace

TEST_CASE("mean and deviation use the sample formula") {
  auto [m0, s0] = mean_std({});
  CHECK(m0 == 0.0);
  CHECK(s0 == 0.0);
  auto [m1, s1] = mean_std({2.5});
  CHECK(m1 == 2.5);
  CHECK(s1 == 0.0);
  auto [m2, s2] = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m2 == 2.5);
  CHECK(s2 == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("method names round-trip") {
  for (Method m : {Method::FixedR, Method::FixedA, Method::Incremental, Method::RandomCoreset,
                   Method::D2kBase, Method::D2kAdpShare, Method::D2kAdpSep, Method::D2kAdpSmall,
                   Method::DirectOnly, Method::DirectOnlyAdp})
    CHECK(method_from_name(method_name(m)) == m);
  CHECK(method_from_name("d2k_adp_share") == Method::D2kAdpShare);
  CHECK_THROWS_AS(method_from_name("nonsense"), ConfigError);
}

TEST_CASE("a full experiment runs every selected cell") {
  ExperimentConfig cfg = small_config();
  cfg.methods = {Method::FixedR, Method::FixedA, Method::Incremental, Method::RandomCoreset,
                 Method::D2kBase, Method::DirectOnly};
  ExperimentReport rep = run_experiment(cfg);

  CHECK(rep.cells.size() == cfg.methods.size() * cfg.seeds.size());
  CHECK(rep.all_ok());
  CHECK(rep.n_old > 0);
  CHECK(rep.n_train > 0);
  CHECK(rep.n_test > 0);
  for (const CellResult& c : rep.cells) {
    CHECK(c.auc > 0.0);
    CHECK(c.auc < 1.0);
    CHECK(c.logloss > 0.0);
    CHECK(std::isfinite(c.logloss));
  }
  const MethodSummary* d2k = rep.summary("d2k_base");
  REQUIRE(d2k != nullptr);
  CHECK(d2k->cells == 2);
  for (const CellResult& c : rep.cells)
    if (c.method == "d2k_base" || c.method == "direct_only") {
      CHECK(c.kb_entries > 0);
      CHECK(c.kb_bytes > 0);
      CHECK(c.hit_rate > 0.0);
      CHECK(c.encoder_seconds > 0.0);
    }

  std::string table = rep.table();
  CHECK(table.find("d2k_base") != std::string::npos);
  CHECK(table.find("fixed_r") != std::string::npos);
  std::string jl = rep.jsonl();
  CHECK(jl.find("\"record\":\"cell\"") != std::string::npos);
  CHECK(jl.find("\"record\":\"summary\"") != std::string::npos);
  CHECK(std::count(jl.begin(), jl.end(), '\n') ==
        long(rep.cells.size() + rep.summaries.size()));

  SUBCASE("the same configuration reproduces every metric bit for bit") {
    ExperimentReport again = run_experiment(cfg);
    REQUIRE(again.cells.size() == rep.cells.size());
    for (size_t i = 0; i < rep.cells.size(); ++i) {
      CHECK(again.cells[i].auc == rep.cells[i].auc);
      CHECK(again.cells[i].logloss == rep.cells[i].logloss);
      CHECK(again.cells[i].hit_rate == rep.cells[i].hit_rate);
    }
  }
}

TEST_CASE("an empty old block makes the all-data and recent baselines coincide") {
  ExperimentConfig cfg = small_config();
  cfg.p1 = 0;
  cfg.p2 = 2;
  cfg.methods = {Method::FixedR, Method::FixedA};
  ExperimentReport rep = run_experiment(cfg);
  REQUIRE(rep.all_ok());
  for (uint64_t seed : cfg.seeds) {
    const CellResult *r = nullptr, *a = nullptr;
    for (const CellResult& c : rep.cells) {
      if (c.seed != seed) continue;
      if (c.method == "fixed_r") r = &c;
      if (c.method == "fixed_a") a = &c;
    }
    REQUIRE(r != nullptr);
    REQUIRE(a != nullptr);
    CHECK(r->auc == a->auc);
    CHECK(r->logloss == a->logloss);
  }
}

TEST_CASE("failed cells are recorded while the rest of the run continues") {
  ExperimentConfig cfg = small_config();
  cfg.methods = {Method::FixedR, Method::D2kBase};
  cfg.encoder.heads = 3;  // does not divide d=4, so every knowledge cell fails
  ExperimentReport rep = run_experiment(cfg);
  CHECK_FALSE(rep.all_ok());
  size_t ok = 0, failed = 0;
  for (const CellResult& c : rep.cells) {
    if (c.ok) {
      ++ok;
      CHECK(c.method == "fixed_r");
    } else {
      ++failed;
      CHECK(c.method == "d2k_base");
      CHECK_FALSE(c.error.empty());
    }
  }
  CHECK(ok == 2);
  CHECK(failed == 2);
  CHECK(rep.summary("d2k_base")->cells == 0);
  CHECK(rep.table().find("FAILED") != std::string::npos);
  CHECK(rep.jsonl().find("\"ok\":false") != std::string::npos);
}

TEST_CASE("incremental training respects the per-block stop rule") {
  FeatureSchema s = tri_schema();
  Vocabulary voc = vocab_with(s, 8);
  std::vector<std::vector<Sample>> blocks = {random_tri_samples(300, 1, 5),
                                             random_tri_samples(300, 2, 5)};
  BackboneConfig cfg;
  cfg.d = 3;
  cfg.hidden = {4};
  cfg.batch = 128;
  cfg.lr = 1e-4;
  cfg.seed = 9;

  // a huge tolerance stops every block right after the first comparison
  BackboneModel quick = train_incremental(blocks, s, voc, cfg, 10, 1e9);
  CHECK(quick.loss_history().size() == 4);  // two epochs per block

  BackboneModel capped = train_incremental(blocks, s, voc, cfg, 1, 1e9);
  CHECK(capped.loss_history().size() == 2);

  // an unreachable tolerance lets every block run to the epoch cap
  BackboneModel full = train_incremental(blocks, s, voc, cfg, 3, -1.0);
  CHECK(full.loss_history().size() == 6);

  SUBCASE("empty blocks are skipped") {
    std::vector<std::vector<Sample>> holey = {blocks[0], {}, blocks[1]};
    BackboneModel m = train_incremental(holey, s, voc, cfg, 1, 1e9);
    CHECK(m.loss_history().size() == 2);
  }
}

TEST_CASE("retrieval benchmark reports stable per-sample cost") {
  FeatureSchema s = tri_schema();
  KnowledgeBase kb(4, schema_fingerprint(s));
  Rng rng(3);
  for (uint32_t u = 1; u <= 200; ++u)
    for (uint32_t v = 1; v <= 200; ++v) {
      float z[4];
      for (float& f : z) f = static_cast<float>(rng.uniform(-1, 1));
      kb.insert({0, 1, 2, u, v, 1 + (u + v) % 2}, z);
    }
  std::vector<Sample> xs = random_tri_samples(4096, 5, 200);

  BenchResult a = bench_retrieval(kb, xs, s, 1024);
  CHECK(a.batches >= 20);
  CHECK(a.batch_size == 1024);
  CHECK(a.ms_per_batch > 0.0);
  CHECK(a.kb_entries == kb_stats(kb).entries);
  CHECK(a.kb_bytes == kb_stats(kb).bytes);

  BenchResult b = bench_retrieval(kb, xs, s, 2048);
  CHECK(b.ms_per_sample < 3.0 * a.ms_per_sample + 1e-6);
  CHECK(a.ms_per_sample < 3.0 * b.ms_per_sample + 1e-6);

  SUBCASE("an empty base is still timed") {
    KnowledgeBase empty(4, schema_fingerprint(s));
    BenchResult e = bench_retrieval(empty, xs, s, 512);
    CHECK(e.batches >= 20);
    CHECK(e.kb_entries == 0);
  }

  CHECK_THROWS_AS(bench_retrieval(kb, {}, s, 64), DataError);
  CHECK_THROWS_AS(bench_retrieval(kb, xs, s, 0), ConfigError);
}
