#include "encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace d2k {

namespace {

constexpr uint64_t kInitTag = 0x656e632d696e6974ULL;
constexpr uint64_t kShuffleTag = 0x656e632d73687566ULL;
constexpr char kMagic[4] = {'D', '2', 'K', 'E'};
constexpr uint32_t kVersion = 1;

std::vector<uint16_t> resolve_input_fields(const FeatureSchema& schema) {
  std::vector<uint16_t> out = schema.kb_user_fields();
  for (uint16_t f : schema.kb_item_fields()) out.push_back(f);
  for (uint16_t f : schema.kb_context_fields()) out.push_back(f);
  return out;
}

std::vector<uint32_t> resolve_vocab_sizes(const FeatureSchema& schema, const Vocabulary& vocab) {
  if (vocab.fields() != schema.field_count())
    throw ConfigError("vocabulary covers " + std::to_string(vocab.fields()) + " fields, schema has " +
                      std::to_string(schema.field_count()));
  std::vector<uint32_t> sizes;
  for (uint16_t f : resolve_input_fields(schema)) sizes.push_back(vocab.size(f));
  return sizes;
}

void fill_uniform(Param& p, Rng& r, size_t fan_in) {
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : p.value.data) x = r.uniform(-s, s);
}

}  // namespace

EncoderModel::EncoderModel(const FeatureSchema& schema, const Vocabulary& vocab,
                           const EncoderConfig& config)
    : EncoderModel(schema, config, resolve_vocab_sizes(schema, vocab)) {
  init_params();
}

EncoderModel::EncoderModel(const FeatureSchema& schema, const EncoderConfig& config,
                           std::vector<uint32_t> vocab_sizes)
    : schema_(schema), cfg_(config), vocab_sizes_(std::move(vocab_sizes)) {
  schema_.validate();
  if (cfg_.d == 0 || cfg_.dk == 0) throw ConfigError("encoder widths must be positive");
  if (cfg_.heads == 0 || cfg_.d % cfg_.heads != 0)
    throw ConfigError("embedding width " + std::to_string(cfg_.d) + " not divisible by " +
                      std::to_string(cfg_.heads) + " heads");
  if (cfg_.knowledge_hidden == 0 || cfg_.ffn_hidden == 0)
    throw ConfigError("hidden widths must be positive");
  input_fields_ = resolve_input_fields(schema_);
  if (vocab_sizes_.size() != input_fields_.size())
    throw ConfigError("vocabulary sizes do not match encoder input fields");
  n_user_in_ = schema_.kb_user_fields().size();
  n_item_in_ = schema_.kb_item_fields().size();
  n_ctx_in_ = schema_.kb_context_fields().size();
  for (uint32_t i = 0; i < n_user_in_; ++i)
    for (uint32_t j = 0; j < n_item_in_; ++j)
      for (uint32_t k = 0; k < n_ctx_in_; ++k)
        triples_.push_back({i, static_cast<uint32_t>(n_user_in_ + j),
                            static_cast<uint32_t>(n_user_in_ + n_item_in_ + k)});
  build_params();
}

void EncoderModel::build_params() {
  const size_t d = cfg_.d, dk = cfg_.dk;
  embeddings_.reserve(input_fields_.size());
  for (size_t i = 0; i < input_fields_.size(); ++i) {
    const FieldDef& fd = schema_.field(input_fields_[i]);
    embeddings_.emplace_back("emb:" + fd.name, std::max<uint32_t>(vocab_sizes_[i], 1), d);
  }
  wq_ = Param("wq", d, d);
  wk_ = Param("wk", d, d);
  wv_ = Param("wv", d, d);
  wo_ = Param("wo", d, d);
  ln1_g_ = Param("ln1_gamma", 1, d);
  ln1_b_ = Param("ln1_beta", 1, d);
  ln2_g_ = Param("ln2_gamma", 1, d);
  ln2_b_ = Param("ln2_beta", 1, d);
  ffn_w1_ = Param("ffn_w1", d, cfg_.ffn_hidden);
  ffn_b1_ = Param("ffn_b1", 1, cfg_.ffn_hidden);
  ffn_w2_ = Param("ffn_w2", cfg_.ffn_hidden, d);
  ffn_b2_ = Param("ffn_b2", 1, d);
  know_w1_ = Param("know_w1", 3 * d, cfg_.knowledge_hidden);
  know_b1_ = Param("know_b1", 1, cfg_.knowledge_hidden);
  know_w2_ = Param("know_w2", cfg_.knowledge_hidden, dk);
  know_b2_ = Param("know_b2", 1, dk);
  head_w_ = Param("head_w", triples_.size() * dk, 1);
  head_b_ = Param("head_b", 1, 1);
}

void EncoderModel::init_params() {
  Rng r(mix64(cfg_.seed, kInitTag));
  for (Param& e : embeddings_) fill_uniform(e, r, cfg_.d);
  for (Param* w : {&wq_, &wk_, &wv_, &wo_, &ffn_w1_, &ffn_w2_, &know_w1_, &know_w2_, &head_w_})
    fill_uniform(*w, r, w->value.rows);
  ln1_g_.value.fill(1.0);
  ln2_g_.value.fill(1.0);
}

std::vector<Param*> EncoderModel::params() {
  std::vector<Param*> out;
  for (Param& e : embeddings_) out.push_back(&e);
  for (Param* p : {&wq_, &wk_, &wv_, &wo_, &ln1_g_, &ln1_b_, &ffn_w1_, &ffn_b1_, &ffn_w2_,
                   &ffn_b2_, &ln2_g_, &ln2_b_, &know_w1_, &know_b1_, &know_w2_, &know_b2_,
                   &head_w_, &head_b_})
    out.push_back(p);
  return out;
}

size_t EncoderModel::field_slot(uint16_t flat) const {
  for (size_t i = 0; i < input_fields_.size(); ++i)
    if (input_fields_[i] == flat) return i;
  throw ConfigError("field index " + std::to_string(flat) + " is not an encoder input field");
}

Tape::Id EncoderModel::embed_node(Tape& t, const Sample& s) {
  std::vector<Tape::Id> rows;
  rows.reserve(input_fields_.size());
  for (size_t i = 0; i < input_fields_.size(); ++i) {
    uint16_t flat = input_fields_[i];
    if (flat >= s.values.size())
      throw DataError("sample has no slot for field " + schema_.field(flat).name);
    const std::vector<uint32_t>& vals = s.values[flat];
    if (vals.empty()) throw DataError("empty value list for field " + schema_.field(flat).name);
    if (schema_.field(flat).kind == FieldKind::Single || vals.size() == 1) {
      rows.push_back(t.gather_rows(embeddings_[i], {vals[0]}));
    } else {
      rows.push_back(
          t.gather_mean_segments(embeddings_[i], vals, {0, static_cast<uint32_t>(vals.size())}));
    }
  }
  return t.concat_rows(rows);
}

Tape::Id EncoderModel::transform_node(Tape& t, Tape::Id rows) {
  Tape::Id q = t.matmul(rows, t.param(wq_));
  Tape::Id k = t.matmul(rows, t.param(wk_));
  Tape::Id v = t.matmul(rows, t.param(wv_));
  Tape::Id att = t.attention(q, k, v, cfg_.heads);
  Tape::Id res1 = t.add(rows, t.matmul(att, t.param(wo_)));
  Tape::Id n1 = t.layer_norm_rows(res1, t.param(ln1_g_), t.param(ln1_b_));
  Tape::Id h = t.tanh_op(t.add_row_broadcast(t.matmul(n1, t.param(ffn_w1_)), t.param(ffn_b1_)));
  Tape::Id f = t.add_row_broadcast(t.matmul(h, t.param(ffn_w2_)), t.param(ffn_b2_));
  Tape::Id res2 = t.add(n1, f);
  return t.layer_norm_rows(res2, t.param(ln2_g_), t.param(ln2_b_));
}

Tape::Id EncoderModel::knowledge_from(Tape& t, Tape::Id rows,
                                      const std::vector<std::array<uint32_t, 3>>& triples) {
  Tape::Id cc = t.cross_concat_rows(rows, triples);
  Tape::Id h = t.tanh_op(t.add_row_broadcast(t.matmul(cc, t.param(know_w1_)), t.param(know_b1_)));
  return t.add_row_broadcast(t.matmul(h, t.param(know_w2_)), t.param(know_b2_));
}

Tape::Id EncoderModel::knowledge_node(Tape& t, Tape::Id rows) {
  return knowledge_from(t, rows, triples_);
}

Tape::Id EncoderModel::head_node(Tape& t, Tape::Id flat_z) {
  Tape::Id logit = t.add_row_broadcast(t.matmul(flat_z, t.param(head_w_)), t.param(head_b_));
  return t.sigmoid_op(logit);
}

Tensor2 EncoderModel::embed_sample(const Sample& s) {
  Tape t(false);
  return t.val(embed_node(t, s));
}

Tensor2 EncoderModel::encode_sample(const Sample& s) {
  Tape t(false);
  return t.val(transform_node(t, embed_node(t, s)));
}

Tensor2 EncoderModel::transform_rows(const Tensor2& stacked) {
  if (stacked.cols != cfg_.d)
    throw ConfigError("transform_rows expects width " + std::to_string(cfg_.d));
  if (stacked.rows == 0) throw ConfigError("transform_rows needs at least one row");
  Tape t(false);
  return t.val(transform_node(t, t.input(stacked)));
}

Tensor2 EncoderModel::sample_knowledge(const Sample& s) {
  Tape t(false);
  return t.val(knowledge_node(t, transform_node(t, embed_node(t, s))));
}

double EncoderModel::predict(const Sample& s) {
  Tape t(false);
  Tape::Id z = knowledge_node(t, transform_node(t, embed_node(t, s)));
  Tape::Id flat = t.reshape(z, 1, triples_.size() * cfg_.dk);
  return t.val(head_node(t, flat)).at(0, 0);
}

std::vector<double> EncoderModel::encode_isolated(uint16_t uf, uint16_t vf, uint16_t cf,
                                                  uint32_t uv, uint32_t vv, uint32_t cv) {
  size_t su = field_slot(uf), sv = field_slot(vf), sc = field_slot(cf);
  if (su >= n_user_in_ || sv < n_user_in_ || sv >= n_user_in_ + n_item_in_ ||
      sc < n_user_in_ + n_item_in_)
    throw ConfigError("isolated encoding needs one user, one item and one context field");
  const uint32_t vals[3] = {uv, vv, cv};
  const size_t slots[3] = {su, sv, sc};
  Tape t(false);
  std::vector<Tape::Id> rows;
  for (int i = 0; i < 3; ++i) {
    if (vals[i] >= embeddings_[slots[i]].value.rows)
      throw DataError("value id " + std::to_string(vals[i]) + " out of range for field " +
                      schema_.field(input_fields_[slots[i]]).name);
    rows.push_back(t.gather_rows(embeddings_[slots[i]], {vals[i]}));
  }
  Tape::Id e = transform_node(t, t.concat_rows(rows));
  Tape::Id z = knowledge_from(t, e, {{0, 1, 2}});
  const Tensor2& zv = t.val(z);
  return std::vector<double>(zv.data.begin(), zv.data.end());
}

void EncoderModel::save(const std::string& path) const {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  Hash256 h = schema_fingerprint(schema_);
  buf.append(reinterpret_cast<const char*>(h.bytes), 32);
  put_u32(buf, static_cast<uint32_t>(cfg_.d));
  put_u32(buf, static_cast<uint32_t>(cfg_.dk));
  put_u32(buf, static_cast<uint32_t>(cfg_.heads));
  put_u32(buf, static_cast<uint32_t>(cfg_.knowledge_hidden));
  put_u32(buf, static_cast<uint32_t>(cfg_.ffn_hidden));
  put_f64(buf, cfg_.lr);
  put_u64(buf, cfg_.batch);
  put_u64(buf, cfg_.epochs);
  put_f64(buf, cfg_.plateau_tol);
  put_u64(buf, cfg_.seed);
  put_u32(buf, static_cast<uint32_t>(input_fields_.size()));
  for (size_t i = 0; i < input_fields_.size(); ++i) {
    put_u16(buf, input_fields_[i]);
    put_u32(buf, vocab_sizes_[i]);
  }
  std::vector<Param*> ps = const_cast<EncoderModel*>(this)->params();
  put_u32(buf, static_cast<uint32_t>(ps.size()));
  for (const Param* p : ps) {
    put_u32(buf, static_cast<uint32_t>(p->value.rows));
    put_u32(buf, static_cast<uint32_t>(p->value.cols));
    for (double x : p->value.data) put_f64(buf, x);
  }
  write_file(path, buf);
}

EncoderModel EncoderModel::load(const std::string& path, const FeatureSchema& schema) {
  std::string data = read_file(path);
  ByteReader r(data);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not an encoder checkpoint (bad magic)");
  uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  Hash256 h;
  r.raw(h.bytes, 32);
  if (h != schema_fingerprint(schema))
    throw FormatError(path + ": schema hash mismatch at offset 8");
  EncoderConfig cfg;
  cfg.d = r.u32();
  cfg.dk = r.u32();
  cfg.heads = r.u32();
  cfg.knowledge_hidden = r.u32();
  cfg.ffn_hidden = r.u32();
  cfg.lr = r.f64();
  cfg.batch = r.u64();
  cfg.epochs = r.u64();
  cfg.plateau_tol = r.f64();
  cfg.seed = r.u64();
  uint32_t nf = r.u32();
  std::vector<uint16_t> fields(nf);
  std::vector<uint32_t> sizes(nf);
  for (uint32_t i = 0; i < nf; ++i) {
    fields[i] = r.u16();
    sizes[i] = r.u32();
  }
  if (fields != resolve_input_fields(schema))
    throw FormatError(path + ": checkpoint field list does not match schema kb fields");
  EncoderModel model(schema, cfg, std::move(sizes));
  std::vector<Param*> ps = model.params();
  uint32_t np = r.u32();
  if (np != ps.size())
    throw FormatError(path + ": expected " + std::to_string(ps.size()) + " parameter blocks, got " +
                      std::to_string(np));
  for (Param* p : ps) {
    size_t off = r.offset();
    uint32_t rows = r.u32();
    uint32_t cols = r.u32();
    if (rows != p->value.rows || cols != p->value.cols)
      throw FormatError(path + ": shape mismatch for '" + p->name + "' at offset " +
                        std::to_string(off));
    for (double& x : p->value.data) x = r.f64();
  }
  if (r.remaining() != 0)
    throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return model;
}

EncoderModel train_encoder(const std::vector<Sample>& old_data, const FeatureSchema& schema,
                           const Vocabulary& vocab, const EncoderConfig& config) {
  if (old_data.empty()) throw DataError("train_encoder: empty training set");
  if (config.batch == 0 || config.epochs == 0)
    throw ConfigError("train_encoder: batch and epochs must be positive");
  EncoderModel model(schema, vocab, config);
  const size_t nq = model.query_count();
  const size_t n = old_data.size();
  AdamOptions opt;
  opt.lr = config.lr;
  std::vector<Param*> params = model.params();
  AdamState adam(params, opt);
  Rng shuf(mix64(config.seed, kShuffleTag));
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double prev = std::numeric_limits<double>::infinity();
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuf.shuffle(order);
    double total = 0.0;
    Tape t;
    for (size_t start = 0; start < n; start += config.batch) {
      size_t end = std::min(n, start + config.batch);
      t.reset();
      std::vector<Tape::Id> zrows;
      std::vector<double> labels;
      zrows.reserve(end - start);
      labels.reserve(end - start);
      for (size_t b = start; b < end; ++b) {
        const Sample& s = old_data[order[b]];
        Tape::Id z = model.knowledge_node(t, model.transform_node(t, model.embed_node(t, s)));
        zrows.push_back(t.reshape(z, 1, nq * config.dk));
        labels.push_back(static_cast<double>(s.label));
      }
      Tape::Id prob = model.head_node(t, t.concat_rows(zrows));
      Tape::Id loss = t.bce_mean(prob, labels);
      double lv = t.val(loss).at(0, 0);
      if (!std::isfinite(lv))
        throw TrainError("encoder loss diverged at epoch " + std::to_string(epoch + 1) +
                         ", batch " + std::to_string(start / config.batch + 1));
      for (Param* p : params) p->zero_grad();
      t.backward(loss);
      adam.step();
      total += lv * static_cast<double>(end - start);
    }
    double mean = total / static_cast<double>(n);
    model.loss_history().push_back(mean);
    if (epoch > 0 && prev - mean < config.plateau_tol) break;
    prev = mean;
  }
  return model;
}

}  // namespace d2k
