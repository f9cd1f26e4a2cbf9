#include <d2k/d2k.h>

#include <cstring>
#include <exception>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/backbone.hpp"
#include "core/common.hpp"
#include "core/dataset.hpp"
#include "core/encoder.hpp"
#include "core/experiment.hpp"
#include "core/kbase.hpp"
#include "core/metrics.hpp"
#include "core/schema.hpp"
#include "core/synthetic.hpp"
#include "core/utilize.hpp"

using nlohmann::json;

struct d2k_schema {
  d2k::FeatureSchema v;
};
struct d2k_vocab {
  d2k::Vocabulary v;
};
struct d2k_dataset {
  std::vector<d2k::Sample> v;
};
struct d2k_encoder {
  d2k::EncoderModel v;
};
struct d2k_kb {
  d2k::KnowledgeBase v;
};
struct d2k_model {
  d2k::BackboneModel v;
};

namespace {

thread_local std::string g_last_error;

d2k_status fail(d2k_status code, std::string msg) {
  g_last_error = std::move(msg);
  return code;
}

d2k_status invalid(const char* msg) { return fail(D2K_ERR_INVALID_ARG, msg); }

// Runs the body and folds the library's exception taxonomy onto status codes.
template <typename F>
d2k_status guarded(F&& body) {
  try {
    body();
    return D2K_OK;
  } catch (const d2k::ConfigError& e) {
    return fail(D2K_ERR_CONFIG, e.what());
  } catch (const d2k::DataError& e) {
    return fail(D2K_ERR_DATA, e.what());
  } catch (const d2k::TrainError& e) {
    return fail(D2K_ERR_TRAIN, e.what());
  } catch (const d2k::FormatError& e) {
    return fail(D2K_ERR_FORMAT, e.what());
  } catch (const d2k::MetricError& e) {
    return fail(D2K_ERR_METRIC, e.what());
  } catch (const std::exception& e) {
    return fail(D2K_ERR_INTERNAL, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw d2k::ConfigError(std::string(what) + ": " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw d2k::ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) throw d2k::ConfigError(std::string(what) + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

d2k::GenConfig parse_gen(const json& j) {
  check_keys(j,
             {"n_users", "n_items", "n_ctx", "n_groups", "n_cats", "n_brands", "hist_pool",
              "hist_min", "hist_max", "n_samples", "windows", "window_seconds", "sigma", "bias",
              "drift_rate"},
             "generator config");
  d2k::GenConfig c;
  get_if(j, "n_users", c.n_users);
  get_if(j, "n_items", c.n_items);
  get_if(j, "n_ctx", c.n_ctx);
  get_if(j, "n_groups", c.n_groups);
  get_if(j, "n_cats", c.n_cats);
  get_if(j, "n_brands", c.n_brands);
  get_if(j, "hist_pool", c.hist_pool);
  get_if(j, "hist_min", c.hist_min);
  get_if(j, "hist_max", c.hist_max);
  get_if(j, "n_samples", c.n_samples);
  get_if(j, "windows", c.windows);
  get_if(j, "window_seconds", c.window_seconds);
  get_if(j, "sigma", c.sigma);
  get_if(j, "bias", c.bias);
  get_if(j, "drift_rate", c.drift_rate);
  return c;
}

d2k::EncoderConfig parse_encoder(const json& j) {
  check_keys(j,
             {"d", "dk", "heads", "knowledge_hidden", "ffn_hidden", "lr", "batch", "epochs",
              "plateau_tol", "seed"},
             "encoder config");
  d2k::EncoderConfig c;
  get_if(j, "d", c.d);
  get_if(j, "dk", c.dk);
  get_if(j, "heads", c.heads);
  get_if(j, "knowledge_hidden", c.knowledge_hidden);
  get_if(j, "ffn_hidden", c.ffn_hidden);
  get_if(j, "lr", c.lr);
  get_if(j, "batch", c.batch);
  get_if(j, "epochs", c.epochs);
  get_if(j, "plateau_tol", c.plateau_tol);
  get_if(j, "seed", c.seed);
  return c;
}

d2k::InjectMode parse_inject(const std::string& s) {
  if (s == "plain") return d2k::InjectMode::Plain;
  if (s == "concat") return d2k::InjectMode::Concat;
  if (s == "tower_lr") return d2k::InjectMode::TowerLR;
  if (s == "tower_mlp") return d2k::InjectMode::TowerMLP;
  throw d2k::ConfigError("unknown injection '" + s + "'");
}

d2k::AdaptMode parse_adapt(const std::string& s) {
  if (s == "none") return d2k::AdaptMode::None;
  if (s == "share") return d2k::AdaptMode::Share;
  if (s == "sep") return d2k::AdaptMode::Sep;
  if (s == "small") return d2k::AdaptMode::Small;
  throw d2k::ConfigError("unknown adaptation '" + s + "'");
}

d2k::BackboneConfig parse_backbone(const json& j) {
  check_keys(j,
             {"d", "hidden", "fm", "injection", "adaptation", "adapt_layers", "d_adp",
              "tower_hidden", "lr", "batch", "epochs", "plateau_tol", "seed"},
             "model config");
  d2k::BackboneConfig c;
  get_if(j, "d", c.d);
  get_if(j, "hidden", c.hidden);
  get_if(j, "fm", c.fm);
  if (auto it = j.find("injection"); it != j.end())
    c.mode = parse_inject(it->get<std::string>());
  if (auto it = j.find("adaptation"); it != j.end())
    c.adaptation = parse_adapt(it->get<std::string>());
  get_if(j, "adapt_layers", c.adapt_layers);
  get_if(j, "d_adp", c.d_adp);
  get_if(j, "tower_hidden", c.tower_hidden);
  get_if(j, "lr", c.lr);
  get_if(j, "batch", c.batch);
  get_if(j, "epochs", c.epochs);
  get_if(j, "plateau_tol", c.plateau_tol);
  get_if(j, "seed", c.seed);
  return c;
}

d2k::DirectConfig parse_direct(const json& j) {
  check_keys(j, {"adapt_layers", "d", "lr", "batch", "epochs", "plateau_tol", "seed"},
             "direct config");
  d2k::DirectConfig c;
  get_if(j, "adapt_layers", c.adapt_layers);
  get_if(j, "d", c.d);
  get_if(j, "lr", c.lr);
  get_if(j, "batch", c.batch);
  get_if(j, "epochs", c.epochs);
  get_if(j, "plateau_tol", c.plateau_tol);
  get_if(j, "seed", c.seed);
  return c;
}

d2k::ExperimentConfig parse_experiment(const json& j) {
  check_keys(j,
             {"gen", "data_seed", "p1", "p2", "gap", "methods", "seeds", "encoder", "backbone",
              "direct", "injection", "coreset_frac", "incr_max_epochs", "incr_tol", "kb_subset"},
             "experiment config");
  d2k::ExperimentConfig c;
  if (auto it = j.find("gen"); it != j.end()) c.gen = parse_gen(*it);
  get_if(j, "data_seed", c.data_seed);
  get_if(j, "p1", c.p1);
  get_if(j, "p2", c.p2);
  get_if(j, "gap", c.gap);
  if (auto it = j.find("methods"); it != j.end()) {
    c.methods.clear();
    for (const auto& name : *it) c.methods.push_back(d2k::method_from_name(name.get<std::string>()));
  }
  if (auto it = j.find("seeds"); it != j.end()) it->get_to(c.seeds);
  if (auto it = j.find("encoder"); it != j.end()) c.encoder = parse_encoder(*it);
  if (auto it = j.find("backbone"); it != j.end()) c.backbone = parse_backbone(*it);
  if (auto it = j.find("direct"); it != j.end()) c.direct = parse_direct(*it);
  if (auto it = j.find("injection"); it != j.end())
    c.injection = parse_inject(it->get<std::string>());
  get_if(j, "coreset_frac", c.coreset_frac);
  get_if(j, "incr_max_epochs", c.incr_max_epochs);
  get_if(j, "incr_tol", c.incr_tol);
  get_if(j, "kb_subset", c.kb_subset);
  return c;
}

}  // namespace

extern "C" {

const char* d2k_version(void) { return "1.0.0"; }

const char* d2k_last_error(void) { return g_last_error.c_str(); }

void d2k_string_free(char* s) { delete[] s; }

d2k_status d2k_schema_parse(const char* text, d2k_schema** out) {
  if (!text || !out) return invalid("d2k_schema_parse: null argument");
  return guarded([&] { *out = new d2k_schema{d2k::parse_schema(text)}; });
}

d2k_status d2k_schema_load(const char* path, d2k_schema** out) {
  if (!path || !out) return invalid("d2k_schema_load: null argument");
  return guarded([&] { *out = new d2k_schema{d2k::load_schema(path)}; });
}

d2k_status d2k_schema_serialize(const d2k_schema* schema, char** out) {
  if (!schema || !out) return invalid("d2k_schema_serialize: null argument");
  return guarded([&] { *out = dup_string(d2k::serialize_schema(schema->v)); });
}

d2k_status d2k_schema_field_count(const d2k_schema* schema, uint64_t* out) {
  if (!schema || !out) return invalid("d2k_schema_field_count: null argument");
  *out = schema->v.field_count();
  return D2K_OK;
}

void d2k_schema_free(d2k_schema* schema) { delete schema; }

d2k_status d2k_vocab_save(const d2k_vocab* vocab, const char* path) {
  if (!vocab || !path) return invalid("d2k_vocab_save: null argument");
  return guarded([&] { vocab->v.save(path); });
}

d2k_status d2k_vocab_load(const char* path, const d2k_schema* schema, d2k_vocab** out) {
  if (!path || !schema || !out) return invalid("d2k_vocab_load: null argument");
  return guarded(
      [&] { *out = new d2k_vocab{d2k::Vocabulary::load(path, schema->v.field_count())}; });
}

void d2k_vocab_free(d2k_vocab* vocab) { delete vocab; }

d2k_status d2k_gen_synthetic(const char* config_json, uint64_t seed, d2k_schema** out_schema,
                             d2k_vocab** out_vocab, d2k_dataset** out_data) {
  if (!out_schema || !out_vocab || !out_data) return invalid("d2k_gen_synthetic: null argument");
  return guarded([&] {
    d2k::GenConfig cfg = parse_gen(parse_json(config_json, "generator config"));
    d2k::SyntheticData data = d2k::gen_synthetic(cfg, seed);
    *out_schema = new d2k_schema{std::move(data.schema)};
    *out_vocab = new d2k_vocab{std::move(data.vocab)};
    *out_data = new d2k_dataset{std::move(data.samples)};
  });
}

d2k_status d2k_logs_load(const char* path, const d2k_schema* schema, d2k_vocab** out_vocab,
                         d2k_dataset** out_data) {
  if (!path || !schema || !out_vocab || !out_data) return invalid("d2k_logs_load: null argument");
  return guarded([&] {
    d2k::LogData logs = d2k::load_logs(path, schema->v);
    *out_vocab = new d2k_vocab{std::move(logs.vocab)};
    *out_data = new d2k_dataset{std::move(logs.samples)};
  });
}

d2k_status d2k_logs_load_frozen(const char* path, const d2k_schema* schema,
                                const d2k_vocab* vocab, d2k_dataset** out_data) {
  if (!path || !schema || !vocab || !out_data)
    return invalid("d2k_logs_load_frozen: null argument");
  return guarded(
      [&] { *out_data = new d2k_dataset{d2k::load_logs_frozen(path, schema->v, vocab->v)}; });
}

d2k_status d2k_logs_save(const char* path, const d2k_schema* schema, const d2k_vocab* vocab,
                         const d2k_dataset* data) {
  if (!path || !schema || !vocab || !data) return invalid("d2k_logs_save: null argument");
  return guarded([&] { d2k::save_logs(path, schema->v, vocab->v, data->v); });
}

d2k_status d2k_dataset_size(const d2k_dataset* data, uint64_t* out) {
  if (!data || !out) return invalid("d2k_dataset_size: null argument");
  *out = data->v.size();
  return D2K_OK;
}

d2k_status d2k_dataset_labels(const d2k_dataset* data, uint8_t* out) {
  if (!data || !out) return invalid("d2k_dataset_labels: null argument");
  for (size_t i = 0; i < data->v.size(); ++i) out[i] = data->v[i].label;
  return D2K_OK;
}

d2k_status d2k_dataset_window(const d2k_dataset* data, int64_t window_seconds, uint64_t p1,
                              uint64_t p2, uint64_t gap, d2k_split which, d2k_dataset** out) {
  if (!data || !out) return invalid("d2k_dataset_window: null argument");
  if (which != D2K_SPLIT_OLD && which != D2K_SPLIT_TRAIN && which != D2K_SPLIT_TEST)
    return invalid("d2k_dataset_window: bad split selector");
  return guarded([&] {
    d2k::DatasetPartition part = d2k::partition(data->v, window_seconds, p1, p2, gap);
    std::vector<d2k::Sample> block;
    if (which == D2K_SPLIT_OLD)
      block = part.old_data();
    else if (which == D2K_SPLIT_TRAIN)
      block = part.train_data();
    else
      block = part.test_data();
    *out = new d2k_dataset{std::move(block)};
  });
}

void d2k_dataset_free(d2k_dataset* data) { delete data; }

d2k_status d2k_encoder_train(const d2k_dataset* old_data, const d2k_schema* schema,
                             const d2k_vocab* vocab, const char* config_json, d2k_encoder** out) {
  if (!old_data || !schema || !vocab || !out) return invalid("d2k_encoder_train: null argument");
  return guarded([&] {
    d2k::EncoderConfig cfg = parse_encoder(parse_json(config_json, "encoder config"));
    *out = new d2k_encoder{d2k::train_encoder(old_data->v, schema->v, vocab->v, cfg)};
  });
}

d2k_status d2k_encoder_save(const d2k_encoder* encoder, const char* path) {
  if (!encoder || !path) return invalid("d2k_encoder_save: null argument");
  return guarded([&] { encoder->v.save(path); });
}

d2k_status d2k_encoder_load(const char* path, const d2k_schema* schema, d2k_encoder** out) {
  if (!path || !schema || !out) return invalid("d2k_encoder_load: null argument");
  return guarded([&] { *out = new d2k_encoder{d2k::EncoderModel::load(path, schema->v)}; });
}

void d2k_encoder_free(d2k_encoder* encoder) { delete encoder; }

d2k_status d2k_kb_generate(const d2k_dataset* old_data, const d2k_encoder* encoder,
                           const d2k_schema* schema, d2k_kb** out) {
  if (!old_data || !encoder || !schema || !out) return invalid("d2k_kb_generate: null argument");
  return guarded([&] {
    // Encoding runs scratch tapes; the model parameters stay untouched.
    auto& model = const_cast<d2k_encoder*>(encoder)->v;
    *out = new d2k_kb{d2k::generate_kb(old_data->v, model, schema->v)};
  });
}

d2k_status d2k_kb_update(const d2k_kb* base, const d2k_dataset* new_data,
                         const d2k_encoder* encoder, const d2k_schema* schema,
                         d2k_update_policy policy, d2k_kb** out) {
  if (!base || !new_data || !encoder || !schema || !out)
    return invalid("d2k_kb_update: null argument");
  if (policy != D2K_UPDATE_RP && policy != D2K_UPDATE_AP)
    return invalid("d2k_kb_update: bad update policy");
  return guarded([&] {
    auto& model = const_cast<d2k_encoder*>(encoder)->v;
    d2k::UpdatePolicy p =
        policy == D2K_UPDATE_RP ? d2k::UpdatePolicy::RP : d2k::UpdatePolicy::AP;
    *out = new d2k_kb{d2k::update_kb(base->v, new_data->v, model, schema->v, p)};
  });
}

d2k_status d2k_kb_entry_count(const d2k_kb* kb, uint64_t* out) {
  if (!kb || !out) return invalid("d2k_kb_entry_count: null argument");
  *out = kb->v.size();
  return D2K_OK;
}

d2k_status d2k_kb_stats_json(const d2k_kb* kb, char** out) {
  if (!kb || !out) return invalid("d2k_kb_stats_json: null argument");
  return guarded([&] {
    d2k::KbStats stats = d2k::kb_stats(kb->v);
    json j;
    j["entries"] = stats.entries;
    j["bytes"] = stats.bytes;
    j["dk"] = kb->v.dk();
    json triples = json::array();
    for (const auto& [fields, count] : stats.by_field_triple)
      triples.push_back({{"fields", {fields[0], fields[1], fields[2]}}, {"entries", count}});
    j["by_field_triple"] = std::move(triples);
    *out = dup_string(j.dump());
  });
}

d2k_status d2k_kb_save(const d2k_kb* kb, const char* path) {
  if (!kb || !path) return invalid("d2k_kb_save: null argument");
  return guarded([&] { d2k::save_kb(kb->v, path); });
}

d2k_status d2k_kb_load(const char* path, d2k_kb** out) {
  if (!path || !out) return invalid("d2k_kb_load: null argument");
  return guarded([&] { *out = new d2k_kb{d2k::load_kb(path)}; });
}

void d2k_kb_free(d2k_kb* kb) { delete kb; }

d2k_status d2k_model_train(const d2k_dataset* train_data, const d2k_kb* kb,
                           const d2k_schema* schema, const d2k_vocab* vocab,
                           const char* config_json, d2k_model** out) {
  if (!train_data || !schema || !vocab || !out) return invalid("d2k_model_train: null argument");
  return guarded([&] {
    d2k::BackboneConfig cfg = parse_backbone(parse_json(config_json, "model config"));
    *out = new d2k_model{
        d2k::train_rec(train_data->v, kb ? &kb->v : nullptr, schema->v, vocab->v, cfg)};
  });
}

d2k_status d2k_model_predict(const d2k_model* model, const d2k_dataset* data, const d2k_kb* kb,
                             double* out_scores) {
  if (!model || !data || !out_scores) return invalid("d2k_model_predict: null argument");
  return guarded([&] {
    auto& m = const_cast<d2k_model*>(model)->v;
    std::vector<double> scores = m.predict(data->v, kb ? &kb->v : nullptr);
    std::memcpy(out_scores, scores.data(), scores.size() * sizeof(double));
  });
}

d2k_status d2k_model_save(const d2k_model* model, const char* path) {
  if (!model || !path) return invalid("d2k_model_save: null argument");
  return guarded([&] { model->v.save(path); });
}

d2k_status d2k_model_load(const char* path, const d2k_schema* schema, d2k_model** out) {
  if (!path || !schema || !out) return invalid("d2k_model_load: null argument");
  return guarded([&] { *out = new d2k_model{d2k::BackboneModel::load(path, schema->v)}; });
}

void d2k_model_free(d2k_model* model) { delete model; }

d2k_status d2k_metrics(const double* scores, const uint8_t* labels, uint64_t n, double* out_auc,
                       double* out_logloss) {
  if (!scores || !labels || !out_auc || !out_logloss) return invalid("d2k_metrics: null argument");
  return guarded([&] {
    d2k::MetricPair m = d2k::evaluate(std::span(scores, n), std::span(labels, n));
    *out_auc = m.auc;
    *out_logloss = m.logloss;
  });
}

d2k_status d2k_run_experiment(const char* config_json, char** out_jsonl, char** out_table,
                              int* out_all_ok) {
  return guarded([&] {
    d2k::ExperimentConfig cfg = parse_experiment(parse_json(config_json, "experiment config"));
    d2k::ExperimentReport report = d2k::run_experiment(cfg);
    if (out_jsonl) *out_jsonl = dup_string(report.jsonl());
    if (out_table) *out_table = dup_string(report.table());
    if (out_all_ok) *out_all_ok = report.all_ok() ? 1 : 0;
  });
}

d2k_status d2k_bench_retrieval(const d2k_kb* kb, const d2k_dataset* data,
                               const d2k_schema* schema, uint64_t batch, char** out_json) {
  if (!kb || !data || !schema || !out_json) return invalid("d2k_bench_retrieval: null argument");
  return guarded([&] {
    d2k::BenchResult r = d2k::bench_retrieval(kb->v, data->v, schema->v, batch);
    json j;
    j["ms_per_batch"] = r.ms_per_batch;
    j["ms_per_sample"] = r.ms_per_sample;
    j["batch_size"] = r.batch_size;
    j["batches"] = r.batches;
    j["kb_entries"] = r.kb_entries;
    j["kb_bytes"] = r.kb_bytes;
    *out_json = dup_string(j.dump());
  });
}

}  // extern "C"
