#include "utilize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace d2k {

namespace {

constexpr uint64_t kAdaptInitTag = 0x6164702d696e6974ULL;
constexpr uint64_t kDirectInitTag = 0x6469722d696e6974ULL;
constexpr uint64_t kDirectShufTag = 0x6469722d73687566ULL;

void check_sample_fields(const Sample& s, const FeatureSchema& schema) {
  if (s.values.size() < schema.field_count())
    throw DataError("sample has " + std::to_string(s.values.size()) + " fields, schema needs " +
                    std::to_string(schema.field_count()));
}

// Eq. 8 for one query: mean of all split lookups in enumeration order.
void retrieve_query(const KnowledgeBase& kb, uint16_t uf, uint16_t vf, uint16_t cf,
                    const std::vector<uint32_t>& uvs, const std::vector<uint32_t>& vvs,
                    const std::vector<uint32_t>& cvs, double* out, bool& all_hit, size_t& hits,
                    size_t& total) {
  size_t dk = kb.dk();
  std::fill(out, out + dk, 0.0);
  size_t n = 0;
  all_hit = true;
  for (uint32_t uv : uvs)
    for (uint32_t vv : vvs)
      for (uint32_t cv : cvs) {
        ++n;
        ++total;
        const float* v = kb.find({uf, vf, cf, uv, vv, cv});
        if (v) {
          ++hits;
          for (size_t i = 0; i < dk; ++i) out[i] += static_cast<double>(v[i]);
        } else {
          all_hit = false;
        }
      }
  for (size_t i = 0; i < dk; ++i) out[i] /= static_cast<double>(n);
}

void retrieve_row(const Sample& x, const KnowledgeBase& kb, const std::vector<uint16_t>& ufs,
                  const std::vector<uint16_t>& vfs, const std::vector<uint16_t>& cfs, double* row,
                  std::vector<uint8_t>* flags, size_t& hits, size_t& total) {
  size_t dk = kb.dk();
  size_t q = 0;
  for (uint16_t uf : ufs)
    for (uint16_t vf : vfs)
      for (uint16_t cf : cfs) {
        bool all_hit = false;
        retrieve_query(kb, uf, vf, cf, x.values[uf], x.values[vf], x.values[cf], row + q * dk,
                       all_hit, hits, total);
        if (flags) (*flags)[q] = all_hit ? 1 : 0;
        ++q;
      }
}

}  // namespace

std::vector<QueryTerm> gen_queries(const Sample& x, const FeatureSchema& schema) {
  check_sample_fields(x, schema);
  std::vector<QueryTerm> out;
  for (uint16_t uf : schema.kb_user_fields())
    for (uint16_t vf : schema.kb_item_fields())
      for (uint16_t cf : schema.kb_context_fields()) {
        QueryTerm q;
        q.uf = uf;
        q.vf = vf;
        q.cf = cf;
        q.uv = x.values[uf];
        q.vv = x.values[vf];
        q.cv = x.values[cf];
        out.push_back(std::move(q));
      }
  return out;
}

RetrievedKnowledge retrieve(const Sample& x, const KnowledgeBase& kb,
                            const FeatureSchema& schema) {
  check_sample_fields(x, schema);
  auto ufs = schema.kb_user_fields();
  auto vfs = schema.kb_item_fields();
  auto cfs = schema.kb_context_fields();
  size_t nq = ufs.size() * vfs.size() * cfs.size();
  RetrievedKnowledge out;
  out.z = Tensor2(nq, kb.dk());
  out.hit.assign(nq, 0);
  size_t hits = 0, total = 0;
  retrieve_row(x, kb, ufs, vfs, cfs, out.z.data.data(), &out.hit, hits, total);
  out.hit_rate = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return out;
}

RetrievedBatch retrieve_batch(const std::vector<Sample>& samples, const KnowledgeBase& kb,
                              const FeatureSchema& schema) {
  auto ufs = schema.kb_user_fields();
  auto vfs = schema.kb_item_fields();
  auto cfs = schema.kb_context_fields();
  size_t nq = ufs.size() * vfs.size() * cfs.size();
  RetrievedBatch out;
  out.flat = Tensor2(samples.size(), nq * kb.dk());
  size_t hits = 0, total = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    check_sample_fields(samples[i], schema);
    retrieve_row(samples[i], kb, ufs, vfs, cfs, &out.flat.data[i * out.flat.cols], nullptr, hits,
                 total);
  }
  out.hit_rate = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return out;
}

AdaptationUnit::AdaptationUnit(size_t layers, size_t dk, size_t in_width, uint64_t seed)
    : layers_(layers), dk_(dk), in_width_(in_width) {
  if (layers == 0 || dk == 0 || in_width == 0)
    throw ConfigError("adaptation unit needs positive layer count and widths");
  w_pro_ = Param("w_pro", layers * dk * (dk + 1), in_width);
  Rng r(mix64(seed, kAdaptInitTag));
  double s = 1.0 / std::sqrt(static_cast<double>(in_width));
  for (double& x : w_pro_.value.data) x = r.uniform(-s, s);
}

Tape::Id AdaptationUnit::apply(Tape& t, Tape::Id x_src, Tape::Id z_flat, size_t nq) {
  if (t.val(x_src).cols != in_width_)
    throw ConfigError("adaptation input width " + std::to_string(t.val(x_src).cols) +
                      ", unit expects " + std::to_string(in_width_));
  if (t.val(z_flat).cols != nq * dk_)
    throw ConfigError("knowledge width " + std::to_string(t.val(z_flat).cols) +
                      " is not nq*dk = " + std::to_string(nq * dk_));
  if (t.val(x_src).rows != t.val(z_flat).rows)
    throw ConfigError("adaptation batch sizes differ");
  Tape::Id wx = t.matmul(x_src, t.transpose(t.param(w_pro_)));
  std::vector<Tape::Id> adapted;
  adapted.reserve(nq);
  for (size_t q = 0; q < nq; ++q) {
    Tape::Id h = t.slice_cols(z_flat, q * dk_, dk_);
    size_t off = 0;
    for (size_t l = 0; l < layers_; ++l) {
      Tape::Id wl = t.slice_cols(wx, off, dk_ * dk_);
      off += dk_ * dk_;
      Tape::Id bl = t.slice_cols(wx, off, dk_);
      off += dk_;
      h = t.tanh_op(t.add(t.rows_as_matrix_vec(wl, h, dk_), bl));
    }
    adapted.push_back(h);
  }
  return nq == 1 ? adapted[0] : t.concat_cols(adapted);
}

std::vector<double> AdaptationUnit::adapt(const std::vector<double>& x_embedding,
                                          const std::vector<double>& z) {
  if (x_embedding.size() != in_width_)
    throw ConfigError("adapt: embedding length " + std::to_string(x_embedding.size()) +
                      ", unit expects " + std::to_string(in_width_));
  if (z.size() != dk_)
    throw ConfigError("adapt: knowledge length " + std::to_string(z.size()) + ", unit expects " +
                      std::to_string(dk_));
  Tape t(false);
  Tensor2 xe(1, in_width_);
  std::copy(x_embedding.begin(), x_embedding.end(), xe.data.begin());
  Tensor2 zf(1, dk_);
  std::copy(z.begin(), z.end(), zf.data.begin());
  const Tensor2& out = t.val(apply(t, t.input(std::move(xe)), t.input(std::move(zf)), 1));
  return std::vector<double>(out.data.begin(), out.data.end());
}

std::vector<double> inject_concat(const std::vector<double>& x_embedding,
                                  const RetrievedKnowledge& knowledge) {
  std::vector<double> out = x_embedding;
  out.insert(out.end(), knowledge.z.data.begin(), knowledge.z.data.end());
  return out;
}

double inject_tower(double backbone_logit, const RetrievedKnowledge& knowledge,
                    const LinearTower& tower) {
  if (tower.w.size() != knowledge.z.size())
    throw ConfigError("tower width " + std::to_string(tower.w.size()) + ", knowledge has " +
                      std::to_string(knowledge.z.size()));
  double p = tower.b;
  for (size_t i = 0; i < tower.w.size(); ++i) p += tower.w[i] * knowledge.z.data[i];
  return 1.0 / (1.0 + std::exp(-(backbone_logit + p)));
}

std::vector<Tape::Id> gather_field_nodes(Tape& t, std::vector<Param>& tables,
                                         const FeatureSchema& schema,
                                         const std::vector<Sample>& samples,
                                         const std::vector<uint32_t>& idx) {
  std::vector<Tape::Id> nodes;
  nodes.reserve(schema.field_count());
  for (size_t f = 0; f < schema.field_count(); ++f) {
    if (schema.field(f).kind == FieldKind::Single) {
      std::vector<uint32_t> ids(idx.size());
      for (size_t b = 0; b < idx.size(); ++b) ids[b] = samples[idx[b]].values[f][0];
      nodes.push_back(t.gather_rows(tables[f], std::move(ids)));
    } else {
      std::vector<uint32_t> values;
      std::vector<uint32_t> offsets(idx.size() + 1, 0);
      for (size_t b = 0; b < idx.size(); ++b) {
        const auto& vals = samples[idx[b]].values[f];
        values.insert(values.end(), vals.begin(), vals.end());
        offsets[b + 1] = static_cast<uint32_t>(values.size());
      }
      nodes.push_back(t.gather_mean_segments(tables[f], std::move(values), std::move(offsets)));
    }
  }
  return nodes;
}

Tensor2 rows_subset(const Tensor2& m, const std::vector<uint32_t>& idx, size_t lo, size_t hi) {
  Tensor2 out(hi - lo, m.cols);
  for (size_t b = lo; b < hi; ++b)
    std::copy(&m.data[size_t(idx[b]) * m.cols], &m.data[size_t(idx[b]) * m.cols] + m.cols,
              &out.data[(b - lo) * m.cols]);
  return out;
}

DirectModel::DirectModel(const FeatureSchema& schema, const Vocabulary& vocab, size_t nq,
                         size_t dk, const DirectConfig& config)
    : schema_(schema), cfg_(config), nq_(nq), dk_(dk) {
  if (nq_ == 0 || dk_ == 0) throw ConfigError("direct model needs positive nq and dk");
  Rng r(mix64(cfg_.seed, kDirectInitTag));
  if (cfg_.adapted) {
    if (vocab.fields() != schema_.field_count())
      throw ConfigError("vocabulary does not cover the schema");
    double s = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
    for (size_t f = 0; f < schema_.field_count(); ++f) {
      embeddings_.emplace_back("adp_emb:" + schema_.field(f).name,
                               std::max<uint32_t>(vocab.size(f), 1), cfg_.d);
      for (double& x : embeddings_.back().value.data) x = r.uniform(-s, s);
    }
    unit_ = AdaptationUnit(cfg_.adapt_layers, dk_, schema_.field_count() * cfg_.d,
                           mix64(cfg_.seed, 0x61647075ULL));
  }
  head_w_ = Param("direct_head_w", nq_ * dk_, 1);
  head_b_ = Param("direct_head_b", 1, 1);
  double s = 1.0 / std::sqrt(static_cast<double>(nq_ * dk_));
  for (double& x : head_w_.value.data) x = r.uniform(-s, s);
}

std::vector<Param*> DirectModel::params() {
  std::vector<Param*> out;
  for (Param& e : embeddings_) out.push_back(&e);
  if (cfg_.adapted) out.push_back(&unit_.w_pro());
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

Tape::Id DirectModel::forward_node(Tape& t, const std::vector<Sample>& samples,
                                   const std::vector<uint32_t>& idx, const Tensor2& kflat) {
  Tape::Id z = t.input(rows_subset(kflat, idx, 0, idx.size()));
  if (cfg_.adapted) {
    Tape::Id x_src = t.concat_cols(gather_field_nodes(t, embeddings_, schema_, samples, idx));
    z = unit_.apply(t, x_src, z, nq_);
  }
  Tape::Id logit = t.add_row_broadcast(t.matmul(z, t.param(head_w_)), t.param(head_b_));
  return t.sigmoid_op(logit);
}

std::vector<double> DirectModel::predict(const std::vector<Sample>& samples,
                                         const KnowledgeBase& kb) {
  RetrievedBatch rb = retrieve_batch(samples, kb, schema_);
  if (rb.flat.cols != nq_ * dk_)
    throw ConfigError("retrieved width " + std::to_string(rb.flat.cols) + ", model expects " +
                      std::to_string(nq_ * dk_));
  std::vector<double> out;
  out.reserve(samples.size());
  const size_t step = 4096;
  for (size_t lo = 0; lo < samples.size(); lo += step) {
    size_t hi = std::min(samples.size(), lo + step);
    std::vector<uint32_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), static_cast<uint32_t>(lo));
    Tape t(false);
    const Tensor2& p = t.val(forward_node(t, samples, idx, rb.flat));
    out.insert(out.end(), p.data.begin(), p.data.end());
  }
  return out;
}

DirectModel train_direct(const std::vector<Sample>& train_data, const KnowledgeBase& kb,
                         const FeatureSchema& schema, const Vocabulary& vocab,
                         const DirectConfig& config) {
  if (train_data.empty()) throw DataError("train_direct: empty training set");
  if (config.batch == 0 || config.epochs == 0)
    throw ConfigError("train_direct: batch and epochs must be positive");
  auto ufs = schema.kb_user_fields();
  size_t nq = ufs.size() * schema.kb_item_fields().size() * schema.kb_context_fields().size();
  DirectModel model(schema, vocab, nq, kb.dk(), config);
  RetrievedBatch rb = retrieve_batch(train_data, kb, schema);

  std::vector<Param*> params = model.params();
  AdamOptions opt;
  opt.lr = config.lr;
  AdamState adam(params, opt);
  Rng shuf(mix64(config.seed, kDirectShufTag));
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
      Tape::Id prob = model.forward_node(t, train_data, idx, rb.flat);
      Tape::Id loss = t.bce_mean(prob, labels);
      double lv = t.val(loss).at(0, 0);
      if (!std::isfinite(lv))
        throw TrainError("direct head loss diverged at epoch " + std::to_string(epoch + 1));
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
