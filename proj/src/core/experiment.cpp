#include "experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "metrics.hpp"

namespace d2k {

namespace {

constexpr uint64_t kCoresetTag = 0x636f7265736574ULL;
constexpr uint64_t kIncrShufTag = 0x696e63722d7368ULL;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const std::vector<std::pair<Method, std::string>> kMethodNames = {
    {Method::FixedR, "fixed_r"},
    {Method::FixedA, "fixed_a"},
    {Method::Incremental, "incremental"},
    {Method::RandomCoreset, "random_coreset"},
    {Method::D2kBase, "d2k_base"},
    {Method::D2kAdpShare, "d2k_adp_share"},
    {Method::D2kAdpSep, "d2k_adp_sep"},
    {Method::D2kAdpSmall, "d2k_adp_small"},
    {Method::DirectOnly, "direct_only"},
    {Method::DirectOnlyAdp, "direct_only_adp"},
};

bool needs_kb(Method m) {
  switch (m) {
    case Method::D2kBase:
    case Method::D2kAdpShare:
    case Method::D2kAdpSep:
    case Method::D2kAdpSmall:
    case Method::DirectOnly:
    case Method::DirectOnlyAdp:
      return true;
    default:
      return false;
  }
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// one optimizer pass over the data; returns the mean training loss
double train_one_epoch(BackboneModel& m, AdamState& adam, std::vector<Param*>& params,
                       const std::vector<Sample>& data, const Tensor2& kflat, size_t batch,
                       Rng& shuf, std::vector<uint32_t>& order, Tape& t) {
  shuf.shuffle(order);
  double total = 0.0;
  for (size_t lo = 0; lo < order.size(); lo += batch) {
    size_t hi = std::min(order.size(), lo + batch);
    std::vector<uint32_t> idx(order.begin() + lo, order.begin() + hi);
    std::vector<double> labels(hi - lo);
    for (size_t b = 0; b < idx.size(); ++b) labels[b] = data[idx[b]].label;
    t.reset();
    Tape::Id loss = t.bce_mean(m.forward_node(t, data, idx, kflat), labels);
    double lv = t.val(loss).at(0, 0);
    if (!std::isfinite(lv)) throw TrainError("incremental training loss diverged");
    for (Param* p : params) p->zero_grad();
    t.backward(loss);
    adam.step();
    total += lv * static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(order.size());
}

struct SeedArtifacts {
  KnowledgeBase kb;
  double encoder_seconds = 0.0;
  double kb_build_seconds = 0.0;
};

}  // namespace

BackboneModel train_incremental(const std::vector<std::vector<Sample>>& blocks,
                                const FeatureSchema& schema, const Vocabulary& vocab,
                                BackboneConfig cfg, size_t max_epochs, double tol) {
  cfg.mode = InjectMode::Plain;
  cfg.adaptation = AdaptMode::None;
  BackboneModel model(schema, vocab, 0, 0, cfg);
  std::vector<Param*> params = model.params();
  AdamOptions opt;
  opt.lr = cfg.lr;
  AdamState adam(params, opt);
  Tensor2 empty;
  Tape t;
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::vector<Sample>& block = blocks[b];
    if (block.empty()) continue;
    Rng shuf(mix64(mix64(cfg.seed, kIncrShufTag), b));
    std::vector<uint32_t> order(block.size());
    std::iota(order.begin(), order.end(), 0);
    double prev = std::numeric_limits<double>::infinity();
    for (size_t e = 0; e < max_epochs; ++e) {
      double mean = train_one_epoch(model, adam, params, block, empty, cfg.batch, shuf, order, t);
      model.loss_history().push_back(mean);
      if (prev - mean < tol) break;
      prev = mean;
    }
  }
  return model;
}

std::string method_name(Method m) {
  for (const auto& [k, v] : kMethodNames)
    if (k == m) return v;
  throw ConfigError("unknown method id");
}

Method method_from_name(const std::string& name) {
  for (const auto& [k, v] : kMethodNames)
    if (v == name) return k;
  throw ConfigError("unknown method '" + name + "'");
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / double(xs.size() - 1))};
}

bool ExperimentReport::all_ok() const {
  for (const CellResult& c : cells)
    if (!c.ok) return false;
  return !cells.empty();
}

const MethodSummary* ExperimentReport::summary(const std::string& method) const {
  for (const MethodSummary& s : summaries)
    if (s.method == method) return &s;
  return nullptr;
}

std::string ExperimentReport::table() const {
  std::ostringstream os;
  os << "split: old=" << n_old << " train=" << n_train << " test=" << n_test << "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %5s  %-17s %-17s %8s %10s\n", "method", "cells",
                "auc (mean+-std)", "logloss", "hit", "kb entries");
  os << line;
  for (const MethodSummary& s : summaries) {
    double hit = 0.0;
    uint64_t entries = 0;
    size_t n = 0;
    for (const CellResult& c : cells)
      if (c.ok && c.method == s.method) {
        hit += c.hit_rate;
        entries = std::max(entries, c.kb_entries);
        ++n;
      }
    std::snprintf(line, sizeof line, "%-16s %5zu  %.4f +- %.4f  %.4f +- %.4f  %6.3f %10llu\n",
                  s.method.c_str(), s.cells, s.auc_mean, s.auc_std, s.logloss_mean, s.logloss_std,
                  n ? hit / double(n) : 0.0, static_cast<unsigned long long>(entries));
    os << line;
  }
  for (const CellResult& c : cells)
    if (!c.ok) os << "FAILED " << c.method << " seed " << c.seed << ": " << c.error << "\n";
  return os.str();
}

std::string ExperimentReport::jsonl() const {
  std::ostringstream os;
  for (const CellResult& c : cells) {
    os << "{\"record\":\"cell\",\"method\":\"" << c.method << "\",\"seed\":" << c.seed
       << ",\"ok\":" << (c.ok ? "true" : "false");
    if (c.ok) {
      os << ",\"auc\":" << fmt(c.auc) << ",\"logloss\":" << fmt(c.logloss)
         << ",\"hit_rate\":" << fmt(c.hit_rate) << ",\"train_seconds\":" << fmt(c.train_seconds)
         << ",\"encoder_seconds\":" << fmt(c.encoder_seconds)
         << ",\"kb_build_seconds\":" << fmt(c.kb_build_seconds)
         << ",\"kb_entries\":" << c.kb_entries << ",\"kb_bytes\":" << c.kb_bytes;
    } else {
      os << ",\"error\":\"" << json_escape(c.error) << "\"";
    }
    os << "}\n";
  }
  for (const MethodSummary& s : summaries) {
    os << "{\"record\":\"summary\",\"method\":\"" << s.method << "\",\"cells\":" << s.cells
       << ",\"auc_mean\":" << fmt(s.auc_mean) << ",\"auc_std\":" << fmt(s.auc_std)
       << ",\"logloss_mean\":" << fmt(s.logloss_mean) << ",\"logloss_std\":" << fmt(s.logloss_std)
       << "}\n";
  }
  return os.str();
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  if (config.methods.empty()) throw ConfigError("run_experiment: no methods selected");
  if (config.seeds.empty()) throw ConfigError("run_experiment: no seeds");

  SyntheticData data = gen_synthetic(config.gen, config.data_seed);
  FeatureSchema schema = data.schema;
  if (!config.kb_subset.empty()) {
    schema.kb_subset = config.kb_subset;
    schema.validate();
  }
  // partition requires a non-empty old range; p1 = 0 is this harness's way of
  // saying "no old block", so carve the windows with p1=1 and drop the block.
  DatasetPartition part = partition(data.samples, config.gen.window_seconds,
                                    std::max<size_t>(config.p1, 1), config.p2, config.gap);
  part.p1 = config.p1;
  std::vector<Sample> d_old = part.old_data();
  std::vector<Sample> d_tr = part.train_data();
  std::vector<Sample> d_te = part.test_data();
  if (d_tr.empty() || d_te.empty())
    throw ConfigError("run_experiment: empty train/test split");

  bool any_kb = false;
  for (Method m : config.methods) any_kb |= needs_kb(m);
  if (any_kb && d_old.empty())
    throw ConfigError("run_experiment: knowledge methods need a non-empty old block");

  std::vector<uint8_t> te_labels;
  te_labels.reserve(d_te.size());
  for (const Sample& x : d_te) te_labels.push_back(x.label);

  ExperimentReport report;
  report.n_old = d_old.size();
  report.n_train = d_tr.size();
  report.n_test = d_te.size();

  std::map<uint64_t, SeedArtifacts> kb_cache;
  auto artifacts_for = [&](uint64_t seed) -> SeedArtifacts& {
    auto it = kb_cache.find(seed);
    if (it != kb_cache.end()) return it->second;
    EncoderConfig ec = config.encoder;
    ec.seed = seed;
    Clock::time_point t0 = Clock::now();
    EncoderModel enc = train_encoder(d_old, schema, data.vocab, ec);
    double enc_s = seconds_since(t0);
    t0 = Clock::now();
    KnowledgeBase kb = generate_kb(d_old, enc, schema);
    double build_s = seconds_since(t0);
    SeedArtifacts art{std::move(kb), enc_s, build_s};
    return kb_cache.emplace(seed, std::move(art)).first->second;
  };

  auto eval_scores = [&](const std::vector<double>& scores) {
    return evaluate(scores, te_labels);
  };

  for (Method m : config.methods) {
    for (uint64_t seed : config.seeds) {
      CellResult cell;
      cell.method = method_name(m);
      cell.seed = seed;
      try {
        BackboneConfig bc = config.backbone;
        bc.seed = seed;
        bc.mode = InjectMode::Plain;
        bc.adaptation = AdaptMode::None;
        MetricPair mp{};
        Clock::time_point t0;
        switch (m) {
          case Method::FixedR: {
            t0 = Clock::now();
            BackboneModel model = train_rec(d_tr, nullptr, schema, data.vocab, bc);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, nullptr));
            break;
          }
          case Method::FixedA: {
            std::vector<Sample> all = d_old;
            all.insert(all.end(), d_tr.begin(), d_tr.end());
            t0 = Clock::now();
            BackboneModel model = train_rec(all, nullptr, schema, data.vocab, bc);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, nullptr));
            break;
          }
          case Method::Incremental: {
            std::vector<std::vector<Sample>> blocks;
            for (size_t b = 0; b < config.p1; ++b) blocks.push_back(part.blocks[b]);
            for (size_t b = config.p1 + config.gap; b < config.p2; ++b)
              blocks.push_back(part.blocks[b]);
            t0 = Clock::now();
            BackboneModel model = train_incremental(blocks, schema, data.vocab, bc,
                                                    config.incr_max_epochs, config.incr_tol);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, nullptr));
            break;
          }
          case Method::RandomCoreset: {
            std::vector<uint32_t> pool(d_old.size());
            std::iota(pool.begin(), pool.end(), 0);
            Rng r(mix64(seed, kCoresetTag));
            r.shuffle(pool);
            size_t k = static_cast<size_t>(double(d_old.size()) * config.coreset_frac);
            std::vector<Sample> mixed = d_tr;
            for (size_t i = 0; i < k; ++i) mixed.push_back(d_old[pool[i]]);
            t0 = Clock::now();
            BackboneModel model = train_rec(mixed, nullptr, schema, data.vocab, bc);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, nullptr));
            break;
          }
          case Method::D2kBase:
          case Method::D2kAdpShare:
          case Method::D2kAdpSep:
          case Method::D2kAdpSmall: {
            SeedArtifacts& art = artifacts_for(seed);
            cell.encoder_seconds = art.encoder_seconds;
            cell.kb_build_seconds = art.kb_build_seconds;
            KbStats st = kb_stats(art.kb);
            cell.kb_entries = st.entries;
            cell.kb_bytes = st.bytes;
            bc.mode = config.injection;
            bc.adaptation = m == Method::D2kBase        ? AdaptMode::None
                            : m == Method::D2kAdpShare  ? AdaptMode::Share
                            : m == Method::D2kAdpSep    ? AdaptMode::Sep
                                                        : AdaptMode::Small;
            t0 = Clock::now();
            BackboneModel model = train_rec(d_tr, &art.kb, schema, data.vocab, bc);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, &art.kb));
            cell.hit_rate = retrieve_batch(d_te, art.kb, schema).hit_rate;
            break;
          }
          case Method::DirectOnly:
          case Method::DirectOnlyAdp: {
            SeedArtifacts& art = artifacts_for(seed);
            cell.encoder_seconds = art.encoder_seconds;
            cell.kb_build_seconds = art.kb_build_seconds;
            KbStats st = kb_stats(art.kb);
            cell.kb_entries = st.entries;
            cell.kb_bytes = st.bytes;
            DirectConfig dc = config.direct;
            dc.seed = seed;
            dc.adapted = m == Method::DirectOnlyAdp;
            t0 = Clock::now();
            DirectModel model = train_direct(d_tr, art.kb, schema, data.vocab, dc);
            cell.train_seconds = seconds_since(t0);
            mp = eval_scores(model.predict(d_te, art.kb));
            cell.hit_rate = retrieve_batch(d_te, art.kb, schema).hit_rate;
            break;
          }
        }
        cell.auc = mp.auc;
        cell.logloss = mp.logloss;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      report.cells.push_back(std::move(cell));
    }
  }

  for (Method m : config.methods) {
    MethodSummary s;
    s.method = method_name(m);
    std::vector<double> aucs, lls;
    for (const CellResult& c : report.cells)
      if (c.ok && c.method == s.method) {
        aucs.push_back(c.auc);
        lls.push_back(c.logloss);
      }
    s.cells = aucs.size();
    std::tie(s.auc_mean, s.auc_std) = mean_std(aucs);
    std::tie(s.logloss_mean, s.logloss_std) = mean_std(lls);
    report.summaries.push_back(std::move(s));
  }
  return report;
}

BenchResult bench_retrieval(const KnowledgeBase& kb, const std::vector<Sample>& samples,
                            const FeatureSchema& schema, size_t batch) {
  if (samples.empty()) throw DataError("bench_retrieval: no samples");
  if (batch == 0) throw ConfigError("bench_retrieval: batch must be positive");
  BenchResult res;
  res.batch_size = batch;
  KbStats st = kb_stats(kb);
  res.kb_entries = st.entries;
  res.kb_bytes = st.bytes;

  auto slice = [&](size_t start) {
    std::vector<Sample> out;
    out.reserve(batch);
    for (size_t i = 0; i < batch; ++i) out.push_back(samples[(start + i) % samples.size()]);
    return out;
  };

  volatile double sink = 0.0;
  {
    std::vector<Sample> warm = slice(0);
    sink += retrieve_batch(warm, kb, schema).hit_rate;
  }
  size_t n_batches = std::max<size_t>(20, (samples.size() + batch - 1) / batch);
  std::vector<double> ms;
  ms.reserve(n_batches);
  for (size_t b = 0; b < n_batches; ++b) {
    std::vector<Sample> chunk = slice(b * batch);
    Clock::time_point t0 = Clock::now();
    RetrievedBatch rb = retrieve_batch(chunk, kb, schema);
    double dt = seconds_since(t0) * 1000.0;
    sink += rb.hit_rate;
    ms.push_back(dt);
  }
  (void)sink;
  std::sort(ms.begin(), ms.end());
  res.batches = n_batches;
  res.ms_per_batch = ms[ms.size() / 2];
  res.ms_per_sample = res.ms_per_batch / double(batch);
  return res;
}

}  // namespace d2k
