#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "encoder.hpp"
#include "kbase.hpp"
#include "synthetic.hpp"
#include "utilize.hpp"

namespace d2k {

// Continual-training protocols compared on a common time split. The fixed_*
// and incremental/random_coreset rows retrain the backbone from raw data; the
// d2k_* rows freeze old data into a knowledge base and inject it; direct_only
// predicts from retrieved knowledge alone.
enum class Method {
  FixedR,
  FixedA,
  Incremental,
  RandomCoreset,
  D2kBase,
  D2kAdpShare,
  D2kAdpSep,
  D2kAdpSmall,
  DirectOnly,
  DirectOnlyAdp,
};

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct ExperimentConfig {
  GenConfig gen;
  uint64_t data_seed = 101;
  size_t p1 = 4, p2 = 5, gap = 0;
  std::vector<Method> methods = {Method::FixedR, Method::D2kBase, Method::D2kAdpShare};
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  EncoderConfig encoder;
  BackboneConfig backbone;   // mode/adaptation overridden per method
  DirectConfig direct;       // adapted flag overridden per method
  InjectMode injection = InjectMode::Concat;
  double coreset_frac = 0.10;
  size_t incr_max_epochs = 10;
  double incr_tol = 1e-4;
  std::vector<std::string> kb_subset;  // overrides the schema's subset if set
};

struct CellResult {
  std::string method;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double auc = 0.0;
  double logloss = 0.0;
  double hit_rate = 0.0;       // test-time retrieval hit rate, d2k/direct rows
  double train_seconds = 0.0;  // backbone or direct-head training
  double encoder_seconds = 0.0;
  double kb_build_seconds = 0.0;
  uint64_t kb_entries = 0;
  uint64_t kb_bytes = 0;
};

struct MethodSummary {
  std::string method;
  size_t cells = 0;  // successful cells aggregated
  double auc_mean = 0.0, auc_std = 0.0;
  double logloss_mean = 0.0, logloss_std = 0.0;
};

struct ExperimentReport {
  std::vector<CellResult> cells;
  std::vector<MethodSummary> summaries;
  size_t n_old = 0, n_train = 0, n_test = 0;

  bool all_ok() const;
  const MethodSummary* summary(const std::string& method) const;
  std::string table() const;  // aligned human-readable summary
  std::string jsonl() const;  // one JSON record per cell, then per summary
};

ExperimentReport run_experiment(const ExperimentConfig& config);

// Block-by-block plain training: each block trains until its epoch-over-epoch
// loss improvement falls below tol (checked from the second epoch on) or
// max_epochs is hit. Optimizer state carries across blocks.
BackboneModel train_incremental(const std::vector<std::vector<Sample>>& blocks,
                                const FeatureSchema& schema, const Vocabulary& vocab,
                                BackboneConfig config, size_t max_epochs, double tol);

// Sample-std (n-1) mean/deviation pair; std is 0 for a single value.
std::pair<double, double> mean_std(const std::vector<double>& xs);

struct BenchResult {
  double ms_per_batch = 0.0;  // median over timed batches
  double ms_per_sample = 0.0;
  size_t batch_size = 0;
  size_t batches = 0;
  uint64_t kb_entries = 0;
  uint64_t kb_bytes = 0;
};

// Times retrieve_batch against a frozen base: one warm-up batch is discarded
// and at least 20 batches are timed (cycling through the dataset as needed).
BenchResult bench_retrieval(const KnowledgeBase& kb, const std::vector<Sample>& samples,
                            const FeatureSchema& schema, size_t batch = 1024);

}  // namespace d2k
