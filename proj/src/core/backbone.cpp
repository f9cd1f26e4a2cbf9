#include "backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace d2k {

namespace {

constexpr uint64_t kInitTag = 0x626b622d696e6974ULL;
constexpr uint64_t kShuffleTag = 0x626b622d73687566ULL;
constexpr char kMagic[4] = {'D', '2', 'K', 'B'};
constexpr uint32_t kVersion = 1;

std::vector<uint32_t> resolve_vocab_sizes(const FeatureSchema& schema, const Vocabulary& vocab) {
  if (vocab.fields() != schema.field_count())
    throw ConfigError("vocabulary covers " + std::to_string(vocab.fields()) +
                      " fields, schema has " + std::to_string(schema.field_count()));
  std::vector<uint32_t> out(schema.field_count());
  for (size_t f = 0; f < out.size(); ++f) out[f] = std::max<uint32_t>(vocab.size(f), 1);
  return out;
}

void check_config(const BackboneConfig& c, size_t nq, size_t dk) {
  if (c.d == 0) throw ConfigError("backbone embedding width must be positive");
  if (c.mode != InjectMode::Plain && (nq == 0 || dk == 0))
    throw ConfigError("knowledge injection needs positive query count and knowledge width");
  if (c.mode == InjectMode::Plain && c.adaptation != AdaptMode::None)
    throw ConfigError("adaptation requires a knowledge injection mode");
  if (c.adaptation != AdaptMode::None && c.adapt_layers == 0)
    throw ConfigError("adapt_layers must be positive");
  if (c.mode == InjectMode::TowerMLP && c.tower_hidden == 0)
    throw ConfigError("tower hidden width must be positive");
}

}  // namespace

BackboneModel::BackboneModel(const FeatureSchema& schema, const Vocabulary& vocab, size_t nq,
                             size_t dk, const BackboneConfig& config)
    : BackboneModel(schema, resolve_vocab_sizes(schema, vocab), nq, dk, config) {}

BackboneModel::BackboneModel(const FeatureSchema& schema,
                             const std::vector<uint32_t>& vocab_sizes, size_t nq, size_t dk,
                             const BackboneConfig& config)
    : schema_(schema), cfg_(config), nq_(nq), dk_(dk), vocab_sizes_(vocab_sizes) {
  schema_.validate();
  check_config(cfg_, nq_, dk_);
  build_params(vocab_sizes_);
  init_params();
}

size_t BackboneModel::deep_input_width() const {
  size_t w = schema_.field_count() * cfg_.d;
  if (cfg_.mode == InjectMode::Concat) w += nq_ * dk_;
  return w;
}

size_t BackboneModel::adapt_source_width() const {
  switch (cfg_.adaptation) {
    case AdaptMode::Share:
      return schema_.field_count() * cfg_.d;
    case AdaptMode::Sep:
      return schema_.field_count() * (cfg_.d_adp ? cfg_.d_adp : cfg_.d);
    case AdaptMode::Small:
      return schema_.field_count() * std::max<size_t>(1, cfg_.d / 4);
    default:
      return 0;
  }
}

void BackboneModel::build_params(const std::vector<uint32_t>& vocab_sizes) {
  for (size_t f = 0; f < schema_.field_count(); ++f)
    embeddings_.emplace_back("emb:" + schema_.field(f).name, vocab_sizes[f], cfg_.d);
  if (cfg_.adaptation == AdaptMode::Sep || cfg_.adaptation == AdaptMode::Small) {
    size_t w = adapt_source_width() / schema_.field_count();
    for (size_t f = 0; f < schema_.field_count(); ++f)
      adp_embeddings_.emplace_back("adp_emb:" + schema_.field(f).name, vocab_sizes[f], w);
  }
  if (cfg_.adaptation != AdaptMode::None)
    unit_ = AdaptationUnit(cfg_.adapt_layers, dk_, adapt_source_width(),
                           mix64(cfg_.seed, 0x61647075ULL));
  size_t in = deep_input_width();
  for (size_t h : cfg_.hidden) {
    mlp_w_.emplace_back("mlp_w" + std::to_string(mlp_w_.size()), in, h);
    mlp_b_.emplace_back("mlp_b" + std::to_string(mlp_b_.size()), 1, h);
    in = h;
  }
  mlp_w_.emplace_back("mlp_out_w", in, 1);
  mlp_b_.emplace_back("mlp_out_b", 1, 1);
  if (cfg_.mode == InjectMode::TowerLR) {
    tower_w1_ = Param("tower_w", nq_ * dk_, 1);
    tower_b1_ = Param("tower_b", 1, 1);
  } else if (cfg_.mode == InjectMode::TowerMLP) {
    tower_w1_ = Param("tower_w1", nq_ * dk_, cfg_.tower_hidden);
    tower_b1_ = Param("tower_b1", 1, cfg_.tower_hidden);
    tower_w2_ = Param("tower_w2", cfg_.tower_hidden, 1);
    tower_b2_ = Param("tower_b2", 1, 1);
  }
}

void BackboneModel::init_params() {
  Rng r(mix64(cfg_.seed, kInitTag));
  auto fill = [&r](Param& p, double scale) {
    for (double& x : p.value.data) x = r.uniform(-scale, scale);
  };
  for (Param& e : embeddings_) fill(e, 1.0 / std::sqrt(double(cfg_.d)));
  for (Param& e : adp_embeddings_) fill(e, 1.0 / std::sqrt(double(e.value.cols)));
  for (Param& w : mlp_w_) fill(w, 1.0 / std::sqrt(double(w.value.rows)));
  if (cfg_.mode == InjectMode::TowerLR || cfg_.mode == InjectMode::TowerMLP)
    fill(tower_w1_, 1.0 / std::sqrt(double(tower_w1_.value.rows)));
  if (cfg_.mode == InjectMode::TowerMLP)
    fill(tower_w2_, 1.0 / std::sqrt(double(tower_w2_.value.rows)));
}

std::vector<Param*> BackboneModel::params() {
  std::vector<Param*> out;
  for (Param& e : embeddings_) out.push_back(&e);
  for (Param& e : adp_embeddings_) out.push_back(&e);
  if (cfg_.adaptation != AdaptMode::None) out.push_back(&unit_.w_pro());
  for (size_t i = 0; i < mlp_w_.size(); ++i) {
    out.push_back(&mlp_w_[i]);
    out.push_back(&mlp_b_[i]);
  }
  if (cfg_.mode == InjectMode::TowerLR) {
    out.push_back(&tower_w1_);
    out.push_back(&tower_b1_);
  } else if (cfg_.mode == InjectMode::TowerMLP) {
    out.push_back(&tower_w1_);
    out.push_back(&tower_b1_);
    out.push_back(&tower_w2_);
    out.push_back(&tower_b2_);
  }
  return out;
}

size_t BackboneModel::param_count() {
  size_t n = 0;
  for (Param* p : params()) n += p->value.data.size();
  return n;
}

Tape::Id BackboneModel::forward_node(Tape& t, const std::vector<Sample>& samples,
                                     const std::vector<uint32_t>& idx, const Tensor2& kflat) {
  std::vector<Tape::Id> fields = gather_field_nodes(t, embeddings_, schema_, samples, idx);
  Tape::Id x_vec = t.concat_cols(fields);

  Tape::Id z = 0;
  if (cfg_.mode != InjectMode::Plain) {
    if (kflat.cols != nq_ * dk_)
      throw ConfigError("knowledge rows are " + std::to_string(kflat.cols) + " wide, expected " +
                        std::to_string(nq_ * dk_));
    z = t.input(rows_subset(kflat, idx, 0, idx.size()));
    if (cfg_.adaptation != AdaptMode::None) {
      Tape::Id src =
          cfg_.adaptation == AdaptMode::Share
              ? x_vec
              : t.concat_cols(gather_field_nodes(t, adp_embeddings_, schema_, samples, idx));
      z = unit_.apply(t, src, z, nq_);
    }
  }

  Tape::Id deep_in = cfg_.mode == InjectMode::Concat ? t.concat_cols({x_vec, z}) : x_vec;
  Tape::Id h = deep_in;
  for (size_t i = 0; i + 1 < mlp_w_.size(); ++i)
    h = t.tanh_op(linear(t, h, mlp_w_[i], mlp_b_[i]));
  Tape::Id logit = linear(t, h, mlp_w_.back(), mlp_b_.back());

  if (cfg_.fm) {
    Tape::Id esum = fields[0];
    Tape::Id sq_sum = t.mul(fields[0], fields[0]);
    for (size_t f = 1; f < fields.size(); ++f) {
      esum = t.add(esum, fields[f]);
      sq_sum = t.add(sq_sum, t.mul(fields[f], fields[f]));
    }
    Tape::Id pairwise = t.scale(t.sum_cols(t.sub(t.mul(esum, esum), sq_sum)), 0.5);
    logit = t.add(logit, pairwise);
  }

  if (cfg_.mode == InjectMode::TowerLR) {
    logit = t.add(logit, linear(t, z, tower_w1_, tower_b1_));
  } else if (cfg_.mode == InjectMode::TowerMLP) {
    Tape::Id th = t.tanh_op(linear(t, z, tower_w1_, tower_b1_));
    logit = t.add(logit, linear(t, th, tower_w2_, tower_b2_));
  }
  return t.sigmoid_op(logit);
}

std::vector<double> BackboneModel::predict(const std::vector<Sample>& samples,
                                           const KnowledgeBase* kb) {
  Tensor2 kflat;
  if (cfg_.mode != InjectMode::Plain) {
    if (!kb) throw ConfigError("knowledge injection mode needs a knowledge base");
    if (kb->dk() != dk_)
      throw ConfigError("base stores " + std::to_string(kb->dk()) + "-wide vectors, model needs " +
                        std::to_string(dk_));
    kflat = retrieve_batch(samples, *kb, schema_).flat;
  }
  std::vector<double> out;
  out.reserve(samples.size());
  const size_t step = 4096;
  for (size_t lo = 0; lo < samples.size(); lo += step) {
    size_t hi = std::min(samples.size(), lo + step);
    std::vector<uint32_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), static_cast<uint32_t>(lo));
    Tape t(false);
    const Tensor2& p = t.val(forward_node(t, samples, idx, kflat));
    out.insert(out.end(), p.data.begin(), p.data.end());
  }
  return out;
}

double BackboneModel::predict_one(const Sample& x, const KnowledgeBase* kb) {
  return predict(std::vector<Sample>{x}, kb)[0];
}

void BackboneModel::save(const std::string& path) const {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  Hash256 h = schema_fingerprint(schema_);
  out.append(reinterpret_cast<const char*>(h.bytes), 32);
  put_u32(out, static_cast<uint32_t>(cfg_.d));
  put_u32(out, static_cast<uint32_t>(cfg_.hidden.size()));
  for (size_t v : cfg_.hidden) put_u32(out, static_cast<uint32_t>(v));
  out.push_back(cfg_.fm ? 1 : 0);
  out.push_back(static_cast<char>(cfg_.mode));
  out.push_back(static_cast<char>(cfg_.adaptation));
  put_u32(out, static_cast<uint32_t>(cfg_.adapt_layers));
  put_u32(out, static_cast<uint32_t>(cfg_.d_adp));
  put_u32(out, static_cast<uint32_t>(cfg_.tower_hidden));
  put_f64(out, cfg_.lr);
  put_u64(out, cfg_.batch);
  put_u64(out, cfg_.epochs);
  put_f64(out, cfg_.plateau_tol);
  put_u64(out, cfg_.seed);
  put_u64(out, nq_);
  put_u64(out, dk_);
  put_u32(out, static_cast<uint32_t>(vocab_sizes_.size()));
  for (uint32_t v : vocab_sizes_) put_u32(out, v);
  std::vector<Param*> ps = const_cast<BackboneModel*>(this)->params();
  put_u32(out, static_cast<uint32_t>(ps.size()));
  for (const Param* p : ps) {
    put_u32(out, static_cast<uint32_t>(p->value.rows));
    put_u32(out, static_cast<uint32_t>(p->value.cols));
    for (double v : p->value.data) put_f64(out, v);
  }
  write_file(path, out);
}

BackboneModel BackboneModel::load(const std::string& path, const FeatureSchema& schema) {
  std::string bytes = read_file(path);
  ByteReader r(bytes);
  auto fail = [&](const std::string& what) {
    throw FormatError(what + " at offset " + std::to_string(r.offset()));
  };
  char magic[4];
  if (r.remaining() < 4) fail("model file truncated");
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail("not a backbone model file");
  if (r.u32() != kVersion) fail("unsupported model version");
  Hash256 h;
  r.raw(h.bytes, 32);
  if (h != schema_fingerprint(schema)) fail("model was built against a different schema");
  BackboneConfig cfg;
  cfg.d = r.u32();
  cfg.hidden.resize(r.u32());
  for (size_t& v : cfg.hidden) v = r.u32();
  uint8_t fm = 0, mode = 0, adp = 0;
  r.raw(&fm, 1);
  r.raw(&mode, 1);
  r.raw(&adp, 1);
  if (mode > 3 || adp > 3) fail("bad mode byte");
  cfg.fm = fm != 0;
  cfg.mode = static_cast<InjectMode>(mode);
  cfg.adaptation = static_cast<AdaptMode>(adp);
  cfg.adapt_layers = r.u32();
  cfg.d_adp = r.u32();
  cfg.tower_hidden = r.u32();
  cfg.lr = r.f64();
  cfg.batch = r.u64();
  cfg.epochs = r.u64();
  cfg.plateau_tol = r.f64();
  cfg.seed = r.u64();
  size_t nq = r.u64();
  size_t dk = r.u64();
  std::vector<uint32_t> sizes(r.u32());
  if (sizes.size() != schema.field_count()) fail("field count mismatch");
  for (uint32_t& v : sizes) v = r.u32();
  BackboneModel m(schema, sizes, nq, dk, cfg);
  std::vector<Param*> ps = m.params();
  if (r.u32() != ps.size()) fail("parameter count mismatch");
  for (Param* p : ps) {
    if (r.u32() != p->value.rows || r.u32() != p->value.cols)
      fail("parameter shape mismatch for " + p->name);
    for (double& v : p->value.data) v = r.f64();
  }
  if (r.remaining() != 0) fail("trailing bytes");
  return m;
}

BackboneModel train_rec(const std::vector<Sample>& train_data, const KnowledgeBase* kb,
                        const FeatureSchema& schema, const Vocabulary& vocab,
                        const BackboneConfig& config) {
  if (train_data.empty()) throw DataError("train_rec: empty training set");
  if (config.batch == 0 || config.epochs == 0)
    throw ConfigError("train_rec: batch and epochs must be positive");
  size_t nq = 0, dk = 0;
  Tensor2 kflat;
  if (config.mode != InjectMode::Plain) {
    if (!kb) throw ConfigError("train_rec: injection mode needs a knowledge base");
    nq = schema.kb_user_fields().size() * schema.kb_item_fields().size() *
         schema.kb_context_fields().size();
    dk = kb->dk();
  }
  BackboneModel model(schema, vocab, nq, dk, config);
  if (config.mode != InjectMode::Plain) kflat = retrieve_batch(train_data, *kb, schema).flat;

  std::vector<Param*> params = model.params();
  AdamOptions opt;
  opt.lr = config.lr;
  AdamState adam(params, opt);
  Rng shuf(mix64(config.seed, kShuffleTag));
  std::vector<uint32_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  double prev = std::numeric_limits<double>::infinity();
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuf.shuffle(order);
    double total = 0.0;
    Tape t;
    for (size_t lo = 0; lo < order.size(); lo += config.batch) {
      size_t hi = std::min(order.size(), lo + config.batch);
      std::vector<uint32_t> idx(order.begin() + lo, order.begin() + hi);
      std::vector<double> labels(hi - lo);
      for (size_t b = 0; b < idx.size(); ++b) labels[b] = train_data[idx[b]].label;
      t.reset();
      Tape::Id prob = model.forward_node(t, train_data, idx, kflat);
      Tape::Id loss = t.bce_mean(prob, labels);
      double lv = t.val(loss).at(0, 0);
      if (!std::isfinite(lv))
        throw TrainError("backbone loss diverged at epoch " + std::to_string(epoch + 1) +
                         ", batch " + std::to_string(lo / config.batch + 1));
      for (Param* p : params) p->zero_grad();
      t.backward(loss);
      adam.step();
      total += lv * static_cast<double>(hi - lo);
    }
    double mean = total / static_cast<double>(order.size());
    model.loss_history().push_back(mean);
    if (epoch > 0 && prev - mean < config.plateau_tol) break;
    prev = mean;
  }
  return model;
}

}  // namespace d2k
