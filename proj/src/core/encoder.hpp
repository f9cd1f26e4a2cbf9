#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "tensor.hpp"

namespace d2k {

struct EncoderConfig {
  size_t d = 16;         // embedding width
  size_t dk = 8;         // knowledge vector width
  size_t heads = 2;      // attention heads
  size_t knowledge_hidden = 32;
  size_t ffn_hidden = 32;
  double lr = 1e-3;
  size_t batch = 256;
  size_t epochs = 10;
  double plateau_tol = 1e-4;  // stop when an epoch improves the loss by less
  uint64_t seed = 1;
};

// Embedding tables + one Transformer block + knowledge network + linear head.
// Input fields are the schema's kb fields (user, item, context order); the
// head width is fixed to N_q * dk for that field set. The block applies
// multi-head attention with residual + layer norm, then a tanh feed-forward
// with residual + layer norm; no positional encoding, so the row transform is
// permutation equivariant.
class EncoderModel {
 public:
  EncoderModel(const FeatureSchema& schema, const Vocabulary& vocab,
               const EncoderConfig& config);

  const EncoderConfig& config() const { return cfg_; }
  const FeatureSchema& schema() const { return schema_; }
  const std::vector<uint16_t>& input_fields() const { return input_fields_; }
  size_t query_count() const { return triples_.size(); }  // N_q over kb fields
  // Position triples (into input_fields) in fixed nested (i, j, k) order.
  const std::vector<std::array<uint32_t, 3>>& triples() const { return triples_; }

  std::vector<Param*> params();
  std::vector<double>& loss_history() { return loss_history_; }
  const std::vector<double>& loss_history() const { return loss_history_; }

  // Graph builders shared by training and inference.
  Tape::Id embed_node(Tape& t, const Sample& s);
  Tape::Id transform_node(Tape& t, Tape::Id rows);          // TRM block
  Tape::Id knowledge_node(Tape& t, Tape::Id rows);          // N_q x dk from E
  Tape::Id head_node(Tape& t, Tape::Id flat_z);             // probability column

  // Convenience single-sample forwards (no gradients recorded).
  Tensor2 embed_sample(const Sample& s);
  Tensor2 encode_sample(const Sample& s);                   // E rows
  Tensor2 transform_rows(const Tensor2& stacked);           // arbitrary F x d
  Tensor2 sample_knowledge(const Sample& s);                // N_q x dk
  double predict(const Sample& s);

  // Knowledge vector of one ternary triple encoded in isolation: the encoder
  // sees exactly the three feature values, so the result is independent of
  // any surrounding sample. Field arguments are flat schema indices.
  std::vector<double> encode_isolated(uint16_t uf, uint16_t vf, uint16_t cf, uint32_t uv,
                                      uint32_t vv, uint32_t cv);

  void save(const std::string& path) const;
  static EncoderModel load(const std::string& path, const FeatureSchema& schema);

 private:
  EncoderModel(const FeatureSchema& schema, const EncoderConfig& config,
               std::vector<uint32_t> vocab_sizes);
  void build_params();
  void init_params();
  size_t field_slot(uint16_t flat) const;  // position in input_fields_
  Tape::Id knowledge_from(Tape& t, Tape::Id rows,
                          const std::vector<std::array<uint32_t, 3>>& triples);

  FeatureSchema schema_;
  EncoderConfig cfg_;
  std::vector<uint16_t> input_fields_;
  std::vector<uint32_t> vocab_sizes_;  // per input field
  size_t n_user_in_ = 0, n_item_in_ = 0, n_ctx_in_ = 0;
  std::vector<std::array<uint32_t, 3>> triples_;
  std::vector<double> loss_history_;

  std::vector<Param> embeddings_;  // one table per input field
  Param wq_, wk_, wv_, wo_;
  Param ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  Param ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  Param know_w1_, know_b1_, know_w2_, know_b2_;
  Param head_w_, head_b_;
};

// Trains on old-block samples with BCE; deterministic per config.seed.
EncoderModel train_encoder(const std::vector<Sample>& old_data, const FeatureSchema& schema,
                           const Vocabulary& vocab, const EncoderConfig& config);

}  // namespace d2k
