#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "kbase.hpp"
#include "tensor.hpp"
#include "utilize.hpp"

namespace d2k {

enum class InjectMode { Plain, Concat, TowerLR, TowerMLP };

struct BackboneConfig {
  size_t d = 16;
  std::vector<size_t> hidden = {64, 32};
  bool fm = false;
  InjectMode mode = InjectMode::Plain;
  AdaptMode adaptation = AdaptMode::None;
  size_t adapt_layers = 1;
  size_t d_adp = 0;  // separate-table width; 0 means d (sep) or d/4 (small)
  size_t tower_hidden = 32;
  double lr = 1e-3;
  size_t batch = 256;
  size_t epochs = 10;
  double plateau_tol = 1e-4;
  uint64_t seed = 1;
};

// Embedding-MLP click model with an optional pairwise-interaction term.
// Knowledge enters either as extra input columns of the deep component
// (Concat) or through a separate additive tower on the logit (TowerLR /
// TowerMLP); Plain ignores the knowledge base entirely. The pairwise term
// only ever sees the field embeddings.
class BackboneModel {
 public:
  BackboneModel(const FeatureSchema& schema, const Vocabulary& vocab, size_t nq, size_t dk,
                const BackboneConfig& config);

  const BackboneConfig& config() const { return cfg_; }
  const FeatureSchema& schema() const { return schema_; }
  size_t nq() const { return nq_; }
  size_t dk() const { return dk_; }

  // Stable order: field embeddings, adaptation tables, w_pro, MLP layers,
  // tower. Checkpoints and the optimizer both rely on it.
  std::vector<Param*> params();
  size_t param_count();
  std::vector<double>& loss_history() { return loss_history_; }

  // Probability column for the batch; kflat is the flattened retrieval matrix
  // and may be empty in plain mode.
  Tape::Id forward_node(Tape& t, const std::vector<Sample>& samples,
                        const std::vector<uint32_t>& idx, const Tensor2& kflat);

  // kb may be null in plain mode and is required otherwise.
  std::vector<double> predict(const std::vector<Sample>& samples, const KnowledgeBase* kb);
  double predict_one(const Sample& x, const KnowledgeBase* kb);

  void save(const std::string& path) const;
  static BackboneModel load(const std::string& path, const FeatureSchema& schema);

 private:
  BackboneModel(const FeatureSchema& schema, const std::vector<uint32_t>& vocab_sizes, size_t nq,
                size_t dk, const BackboneConfig& config);
  void build_params(const std::vector<uint32_t>& vocab_sizes);
  void init_params();
  size_t deep_input_width() const;
  size_t adapt_source_width() const;

  FeatureSchema schema_;
  BackboneConfig cfg_;
  size_t nq_ = 0, dk_ = 0;
  std::vector<uint32_t> vocab_sizes_;
  std::vector<Param> embeddings_;      // one table per field, width d
  std::vector<Param> adp_embeddings_;  // sep/small adaptation source tables
  AdaptationUnit unit_;
  std::vector<Param> mlp_w_, mlp_b_;  // hidden layers then the logit layer
  Param tower_w1_, tower_b1_, tower_w2_, tower_b2_;
  std::vector<double> loss_history_;
};

// Trains on train_data with binary cross entropy; the base is frozen and its
// retrieval rows are computed once up front. Tower and adaptation parameters
// train jointly with the backbone.
BackboneModel train_rec(const std::vector<Sample>& train_data, const KnowledgeBase* kb,
                        const FeatureSchema& schema, const Vocabulary& vocab,
                        const BackboneConfig& config);

}  // namespace d2k
