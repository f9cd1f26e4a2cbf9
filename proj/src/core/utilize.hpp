#pragma once

#include <cstdint>
#include <vector>

#include "dataset.hpp"
#include "kbase.hpp"
#include "tensor.hpp"

namespace d2k {

// One ternary query: a kb field triple with the sample's value lists.
struct QueryTerm {
  uint16_t uf = 0, vf = 0, cf = 0;
  std::vector<uint32_t> uv, vv, cv;
};

// All F_u x F_v x F_c kb-field combinations in fixed nested (i, j, k) order.
std::vector<QueryTerm> gen_queries(const Sample& x, const FeatureSchema& schema);

struct RetrievedKnowledge {
  Tensor2 z;                 // N_q x d_k
  std::vector<uint8_t> hit;  // 1 iff every split lookup of the query hit
  double hit_rate = 0.0;     // fraction of split lookups that hit
};

// Exact-match retrieval; a query touching multi-value features averages the
// split lookups, misses contribute zeros.
RetrievedKnowledge retrieve(const Sample& x, const KnowledgeBase& kb,
                            const FeatureSchema& schema);

// Flattened batch retrieval for training/eval: row per sample, N_q*d_k wide.
struct RetrievedBatch {
  Tensor2 flat;       // n x (N_q * d_k)
  double hit_rate = 0.0;  // over all split lookups in the batch
};
RetrievedBatch retrieve_batch(const std::vector<Sample>& samples, const KnowledgeBase& kb,
                              const FeatureSchema& schema);

// Conditioning source for the per-sample transform: Share reads the model's
// own field embeddings (training updates them through both roles), Sep and
// Small train separate tables of width d_adp and d/4.
enum class AdaptMode { None, Share, Sep, Small };

// Sample-conditioned per-query MLP: the sample embedding is projected to the
// weights and biases of `layers` tanh layers of width dk, which are applied
// to each knowledge vector independently. w_pro has layers*dk*(dk+1) rows and
// in_width columns; layer l's weight matrix is its dk*dk slice reshaped
// row-major, followed by its dk bias entries.
class AdaptationUnit {
 public:
  AdaptationUnit() = default;
  AdaptationUnit(size_t layers, size_t dk, size_t in_width, uint64_t seed);

  size_t layers() const { return layers_; }
  size_t dk() const { return dk_; }
  size_t in_width() const { return in_width_; }
  Param& w_pro() { return w_pro_; }

  // x_src: B x in_width, z_flat: B x (nq*dk) -> adapted B x (nq*dk).
  Tape::Id apply(Tape& t, Tape::Id x_src, Tape::Id z_flat, size_t nq);

  // Single-sample convenience without gradients.
  std::vector<double> adapt(const std::vector<double>& x_embedding,
                            const std::vector<double>& z);

 private:
  size_t layers_ = 0, dk_ = 0, in_width_ = 0;
  Param w_pro_;
};

// Batched embedding lookups, one node per schema field (multi-value fields
// average their rows). Tables are indexed by flat field position.
std::vector<Tape::Id> gather_field_nodes(Tape& t, std::vector<Param>& tables,
                                         const FeatureSchema& schema,
                                         const std::vector<Sample>& samples,
                                         const std::vector<uint32_t>& idx);

// Copies rows idx[lo..hi) of m into a fresh matrix.
Tensor2 rows_subset(const Tensor2& m, const std::vector<uint32_t>& idx, size_t lo, size_t hi);

// Plain concatenation injection: embedding first, knowledge vectors after it
// in query order.
std::vector<double> inject_concat(const std::vector<double>& x_embedding,
                                  const RetrievedKnowledge& knowledge);

struct LinearTower {
  std::vector<double> w;  // N_q * d_k
  double b = 0.0;
};

// sigmoid(backbone_logit + w . concat(knowledge) + b)
double inject_tower(double backbone_logit, const RetrievedKnowledge& knowledge,
                    const LinearTower& tower);

// Knowledge-only predictor: a linear head over the concatenated (optionally
// adapted) knowledge vectors, no backbone.
struct DirectConfig {
  bool adapted = false;
  size_t adapt_layers = 1;
  size_t d = 16;  // adaptation embedding width
  double lr = 1e-3;
  size_t batch = 256;
  size_t epochs = 10;
  double plateau_tol = 1e-4;
  uint64_t seed = 1;
};

class DirectModel {
 public:
  DirectModel(const FeatureSchema& schema, const Vocabulary& vocab, size_t nq, size_t dk,
              const DirectConfig& config);

  const DirectConfig& config() const { return cfg_; }
  std::vector<Param*> params();
  std::vector<double>& loss_history() { return loss_history_; }

  // Knowledge rows are precomputed flat retrieval rows (n x nq*dk).
  Tape::Id forward_node(Tape& t, const std::vector<Sample>& samples,
                        const std::vector<uint32_t>& idx, const Tensor2& kflat);
  std::vector<double> predict(const std::vector<Sample>& samples, const KnowledgeBase& kb);

 private:
  FeatureSchema schema_;
  DirectConfig cfg_;
  size_t nq_ = 0, dk_ = 0;
  std::vector<Param> embeddings_;  // adaptation source; empty unless adapted
  AdaptationUnit unit_;
  Param head_w_, head_b_;
  std::vector<double> loss_history_;
};

DirectModel train_direct(const std::vector<Sample>& train_data, const KnowledgeBase& kb,
                         const FeatureSchema& schema, const Vocabulary& vocab,
                         const DirectConfig& config);

}  // namespace d2k
