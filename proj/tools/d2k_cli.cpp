#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <d2k/d2k.h>

namespace {

[[noreturn]] void die(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  std::exit(1);
}

void check(d2k_status st, const std::string& what) {
  if (st != D2K_OK) die(what + ": " + d2k_last_error());
}

struct SchemaDel {
  void operator()(d2k_schema* p) const { d2k_schema_free(p); }
};
struct VocabDel {
  void operator()(d2k_vocab* p) const { d2k_vocab_free(p); }
};
struct DatasetDel {
  void operator()(d2k_dataset* p) const { d2k_dataset_free(p); }
};
struct EncoderDel {
  void operator()(d2k_encoder* p) const { d2k_encoder_free(p); }
};
struct KbDel {
  void operator()(d2k_kb* p) const { d2k_kb_free(p); }
};
struct ModelDel {
  void operator()(d2k_model* p) const { d2k_model_free(p); }
};
using SchemaPtr = std::unique_ptr<d2k_schema, SchemaDel>;
using VocabPtr = std::unique_ptr<d2k_vocab, VocabDel>;
using DatasetPtr = std::unique_ptr<d2k_dataset, DatasetDel>;
using EncoderPtr = std::unique_ptr<d2k_encoder, EncoderDel>;
using KbPtr = std::unique_ptr<d2k_kb, KbDel>;
using ModelPtr = std::unique_ptr<d2k_model, ModelDel>;

std::string take(char* s) {
  std::string out = s ? s : "";
  d2k_string_free(s);
  return out;
}

// Config options accept a file path or inline JSON (anything starting with
// '{'); an empty value means library defaults.
std::string slurp_config(const std::string& arg) {
  if (arg.empty() || arg.front() == '{') return arg;
  std::ifstream in(arg, std::ios::binary);
  if (!in) die("cannot open config file " + arg);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) die("cannot write " + path);
  out << text;
}

SchemaPtr load_schema(const std::string& path) {
  d2k_schema* s = nullptr;
  check(d2k_schema_load(path.c_str(), &s), "schema " + path);
  return SchemaPtr(s);
}

VocabPtr load_vocab(const std::string& path, const d2k_schema* schema) {
  d2k_vocab* v = nullptr;
  check(d2k_vocab_load(path.c_str(), schema, &v), "vocabulary " + path);
  return VocabPtr(v);
}

DatasetPtr load_data(const std::string& path, const d2k_schema* schema, const d2k_vocab* vocab) {
  d2k_dataset* d = nullptr;
  check(d2k_logs_load_frozen(path.c_str(), schema, vocab, &d), "logs " + path);
  return DatasetPtr(d);
}

EncoderPtr load_encoder(const std::string& path, const d2k_schema* schema) {
  d2k_encoder* e = nullptr;
  check(d2k_encoder_load(path.c_str(), schema, &e), "encoder " + path);
  return EncoderPtr(e);
}

KbPtr load_kb(const std::string& path) {
  d2k_kb* kb = nullptr;
  check(d2k_kb_load(path.c_str(), &kb), "knowledge base " + path);
  return KbPtr(kb);
}

struct CommonIn {
  std::string schema, vocab, data;
};

void add_common(CLI::App* cmd, CommonIn& in) {
  cmd->add_option("--schema", in.schema, "schema file")->required();
  cmd->add_option("--vocab", in.vocab, "vocabulary file")->required();
  cmd->add_option("--data", in.data, "TSV log file")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("knowledge-base recommendation toolkit (library ") + d2k_version() +
               ")"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic logs");
  std::string gen_config, gen_out, gen_schema_out, gen_vocab_out;
  uint64_t gen_seed = 1;
  gen->add_option("--config", gen_config, "generator config (JSON file or inline)");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output TSV path")->required();
  gen->add_option("--schema-out", gen_schema_out, "schema output path")->required();
  gen->add_option("--vocab-out", gen_vocab_out, "vocabulary output path")->required();
  gen->callback([&] {
    d2k_schema* schema = nullptr;
    d2k_vocab* vocab = nullptr;
    d2k_dataset* data = nullptr;
    check(d2k_gen_synthetic(slurp_config(gen_config).c_str(), gen_seed, &schema, &vocab, &data),
          "gen-data");
    SchemaPtr s(schema);
    VocabPtr v(vocab);
    DatasetPtr d(data);
    check(d2k_logs_save(gen_out.c_str(), schema, vocab, data), "write " + gen_out);
    char* text = nullptr;
    check(d2k_schema_serialize(schema, &text), "serialize schema");
    write_text(gen_schema_out, take(text));
    check(d2k_vocab_save(vocab, gen_vocab_out.c_str()), "write " + gen_vocab_out);
    uint64_t n = 0;
    d2k_dataset_size(data, &n);
    std::cout << "wrote " << n << " samples to " << gen_out << "\n";
  });

  // split
  auto* split = app.add_subcommand("split", "slice logs into old/train/test blocks");
  CommonIn split_in;
  add_common(split, split_in);
  int64_t split_window = 86400;
  uint64_t split_p1 = 4, split_p2 = 5, split_gap = 0;
  std::string split_old, split_train, split_test;
  split->add_option("--window-seconds", split_window, "window length in seconds");
  split->add_option("--p1", split_p1, "old block ends before this window");
  split->add_option("--p2", split_p2, "training ends before this window");
  split->add_option("--gap", split_gap, "windows dropped between old and train");
  split->add_option("--old-out", split_old, "old block output path");
  split->add_option("--train-out", split_train, "training block output path");
  split->add_option("--test-out", split_test, "test block output path");
  split->callback([&] {
    SchemaPtr schema = load_schema(split_in.schema);
    VocabPtr vocab = load_vocab(split_in.vocab, schema.get());
    DatasetPtr data = load_data(split_in.data, schema.get(), vocab.get());
    auto emit = [&](d2k_split which, const std::string& path, const char* name) {
      if (path.empty()) return;
      d2k_dataset* block = nullptr;
      check(d2k_dataset_window(data.get(), split_window, split_p1, split_p2, split_gap, which,
                               &block),
            "split");
      DatasetPtr b(block);
      check(d2k_logs_save(path.c_str(), schema.get(), vocab.get(), block), "write " + path);
      uint64_t n = 0;
      d2k_dataset_size(block, &n);
      std::cout << name << ": " << n << " samples -> " << path << "\n";
    };
    emit(D2K_SPLIT_OLD, split_old, "old");
    emit(D2K_SPLIT_TRAIN, split_train, "train");
    emit(D2K_SPLIT_TEST, split_test, "test");
  });

  // train-encoder
  auto* tenc = app.add_subcommand("train-encoder", "train the knowledge encoder on old logs");
  CommonIn tenc_in;
  add_common(tenc, tenc_in);
  std::string tenc_config, tenc_out;
  tenc->add_option("--config", tenc_config, "encoder config (JSON file or inline)");
  tenc->add_option("--out", tenc_out, "encoder checkpoint path")->required();
  tenc->callback([&] {
    SchemaPtr schema = load_schema(tenc_in.schema);
    VocabPtr vocab = load_vocab(tenc_in.vocab, schema.get());
    DatasetPtr data = load_data(tenc_in.data, schema.get(), vocab.get());
    d2k_encoder* enc = nullptr;
    check(d2k_encoder_train(data.get(), schema.get(), vocab.get(),
                            slurp_config(tenc_config).c_str(), &enc),
          "train-encoder");
    EncoderPtr e(enc);
    check(d2k_encoder_save(enc, tenc_out.c_str()), "write " + tenc_out);
    std::cout << "encoder saved to " << tenc_out << "\n";
  });

  // kb build | update | stats
  auto* kb = app.add_subcommand("kb", "knowledge base operations");
  kb->require_subcommand(1);

  auto* kb_build = kb->add_subcommand("build", "encode old logs into a knowledge base");
  CommonIn kbb_in;
  add_common(kb_build, kbb_in);
  std::string kbb_encoder, kbb_out;
  kb_build->add_option("--encoder", kbb_encoder, "encoder checkpoint")->required();
  kb_build->add_option("--out", kbb_out, "knowledge base output path")->required();
  kb_build->callback([&] {
    SchemaPtr schema = load_schema(kbb_in.schema);
    VocabPtr vocab = load_vocab(kbb_in.vocab, schema.get());
    DatasetPtr data = load_data(kbb_in.data, schema.get(), vocab.get());
    EncoderPtr enc = load_encoder(kbb_encoder, schema.get());
    d2k_kb* base = nullptr;
    check(d2k_kb_generate(data.get(), enc.get(), schema.get(), &base), "kb build");
    KbPtr k(base);
    check(d2k_kb_save(base, kbb_out.c_str()), "write " + kbb_out);
    uint64_t entries = 0;
    d2k_kb_entry_count(base, &entries);
    std::cout << entries << " entries -> " << kbb_out << "\n";
  });

  auto* kb_update = kb->add_subcommand("update", "fold new logs into an existing base");
  CommonIn kbu_in;
  add_common(kb_update, kbu_in);
  std::string kbu_base, kbu_encoder, kbu_policy = "ap", kbu_out;
  kb_update->add_option("--base", kbu_base, "existing knowledge base")->required();
  kb_update->add_option("--encoder", kbu_encoder, "encoder checkpoint")->required();
  kb_update->add_option("--policy", kbu_policy, "rp (replace) or ap (average)")
      ->check(CLI::IsMember({"rp", "ap"}));
  kb_update->add_option("--out", kbu_out, "updated base output path")->required();
  kb_update->callback([&] {
    SchemaPtr schema = load_schema(kbu_in.schema);
    VocabPtr vocab = load_vocab(kbu_in.vocab, schema.get());
    DatasetPtr data = load_data(kbu_in.data, schema.get(), vocab.get());
    EncoderPtr enc = load_encoder(kbu_encoder, schema.get());
    KbPtr base = load_kb(kbu_base);
    d2k_kb* merged = nullptr;
    d2k_update_policy policy = kbu_policy == "rp" ? D2K_UPDATE_RP : D2K_UPDATE_AP;
    check(d2k_kb_update(base.get(), data.get(), enc.get(), schema.get(), policy, &merged),
          "kb update");
    KbPtr m(merged);
    check(d2k_kb_save(merged, kbu_out.c_str()), "write " + kbu_out);
    uint64_t entries = 0;
    d2k_kb_entry_count(merged, &entries);
    std::cout << entries << " entries -> " << kbu_out << "\n";
  });

  auto* kb_stats = kb->add_subcommand("stats", "print knowledge base statistics");
  std::string kbs_path;
  bool kbs_json = false;
  kb_stats->add_option("--kb", kbs_path, "knowledge base file")->required();
  kb_stats->add_flag("--json", kbs_json, "emit JSON instead of text");
  kb_stats->callback([&] {
    KbPtr base = load_kb(kbs_path);
    char* out = nullptr;
    check(d2k_kb_stats_json(base.get(), &out), "kb stats");
    std::string stats = take(out);
    if (kbs_json) {
      std::cout << stats << "\n";
      return;
    }
    auto j = nlohmann::json::parse(stats);
    std::cout << "entries: " << j["entries"].get<uint64_t>() << "\n"
              << "bytes:   " << j["bytes"].get<uint64_t>() << "\n"
              << "dk:      " << j["dk"].get<uint64_t>() << "\n";
    for (const auto& t : j["by_field_triple"]) {
      const auto& f = t["fields"];
      std::cout << "  fields (" << f[0].get<int>() << "," << f[1].get<int>() << ","
                << f[2].get<int>() << "): " << t["entries"].get<uint64_t>() << " entries\n";
    }
  });

  // train-rec
  auto* trec = app.add_subcommand("train-rec", "train the recommendation model");
  CommonIn trec_in;
  add_common(trec, trec_in);
  std::string trec_kb, trec_config, trec_out;
  trec->add_option("--kb", trec_kb, "knowledge base (omit for plain backbone)");
  trec->add_option("--config", trec_config, "model config (JSON file or inline)");
  trec->add_option("--out", trec_out, "model checkpoint path")->required();
  trec->callback([&] {
    SchemaPtr schema = load_schema(trec_in.schema);
    VocabPtr vocab = load_vocab(trec_in.vocab, schema.get());
    DatasetPtr data = load_data(trec_in.data, schema.get(), vocab.get());
    KbPtr base;
    if (!trec_kb.empty()) base = load_kb(trec_kb);
    d2k_model* model = nullptr;
    check(d2k_model_train(data.get(), base.get(), schema.get(), vocab.get(),
                          slurp_config(trec_config).c_str(), &model),
          "train-rec");
    ModelPtr m(model);
    check(d2k_model_save(model, trec_out.c_str()), "write " + trec_out);
    std::cout << "model saved to " << trec_out << "\n";
  });

  // eval
  auto* eval = app.add_subcommand("eval", "score a model on held-out logs");
  CommonIn eval_in;
  add_common(eval, eval_in);
  std::string eval_model, eval_kb;
  bool eval_json = false;
  eval->add_option("--model", eval_model, "model checkpoint")->required();
  eval->add_option("--kb", eval_kb, "knowledge base (required for knowledge models)");
  eval->add_flag("--json", eval_json, "emit JSON instead of text");
  eval->callback([&] {
    SchemaPtr schema = load_schema(eval_in.schema);
    VocabPtr vocab = load_vocab(eval_in.vocab, schema.get());
    DatasetPtr data = load_data(eval_in.data, schema.get(), vocab.get());
    d2k_model* model = nullptr;
    check(d2k_model_load(eval_model.c_str(), schema.get(), &model), "model " + eval_model);
    ModelPtr m(model);
    KbPtr base;
    if (!eval_kb.empty()) base = load_kb(eval_kb);
    uint64_t n = 0;
    d2k_dataset_size(data.get(), &n);
    std::vector<double> scores(n);
    std::vector<uint8_t> labels(n);
    check(d2k_model_predict(model, data.get(), base.get(), scores.data()), "predict");
    check(d2k_dataset_labels(data.get(), labels.data()), "labels");
    double auc = 0.0, logloss = 0.0;
    check(d2k_metrics(scores.data(), labels.data(), n, &auc, &logloss), "metrics");
    if (eval_json) {
      nlohmann::json j{{"n", n}, {"auc", auc}, {"logloss", logloss}};
      std::cout << j.dump() << "\n";
    } else {
      std::cout << "n=" << n << " auc=" << auc << " logloss=" << logloss << "\n";
    }
  });

  // experiment
  auto* exp = app.add_subcommand("experiment", "run a method comparison grid");
  std::string exp_config, exp_jsonl;
  bool exp_quiet = false;
  exp->add_option("--config", exp_config, "experiment config (JSON file or inline)");
  exp->add_option("--jsonl-out", exp_jsonl, "write one JSON record per cell and summary");
  exp->add_flag("--quiet", exp_quiet, "suppress the summary table");
  exp->callback([&] {
    char* jsonl = nullptr;
    char* table = nullptr;
    int all_ok = 0;
    check(d2k_run_experiment(slurp_config(exp_config).c_str(), &jsonl, &table, &all_ok),
          "experiment");
    std::string jsonl_str = take(jsonl);
    std::string table_str = take(table);
    if (!exp_jsonl.empty()) write_text(exp_jsonl, jsonl_str);
    if (!exp_quiet) std::cout << table_str;
    if (!all_ok) {
      std::cerr << "error: at least one experiment cell failed\n";
      std::exit(1);
    }
  });

  // bench
  auto* bench = app.add_subcommand("bench", "time knowledge retrieval batches");
  CommonIn bench_in;
  add_common(bench, bench_in);
  std::string bench_kb;
  uint64_t bench_batch = 1024;
  bench->add_option("--kb", bench_kb, "knowledge base file")->required();
  bench->add_option("--batch", bench_batch, "samples per batch");
  bench->callback([&] {
    SchemaPtr schema = load_schema(bench_in.schema);
    VocabPtr vocab = load_vocab(bench_in.vocab, schema.get());
    DatasetPtr data = load_data(bench_in.data, schema.get(), vocab.get());
    KbPtr base = load_kb(bench_kb);
    char* out = nullptr;
    check(d2k_bench_retrieval(base.get(), data.get(), schema.get(), bench_batch, &out), "bench");
    std::cout << take(out) << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}
