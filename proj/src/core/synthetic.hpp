#pragma once

#include <cstdint>

#include "dataset.hpp"

namespace d2k {

// Synthetic clickstream with latent ternary effects. Field layout is fixed:
// user side uid, ugroup, uhist (multi); item side iid, icat, ibrand; context
// side hour. Group/category/brand are deterministic functions of the id, and
// uhist draws from a small per-user preference pool, so coarse and fine
// feature crosses both carry signal.
//
// Every (user value, item value, context value) triple has a latent effect
// theta drawn Normal(0, sigma^2) from a counter-based stream. A sample's
// click probability is sigmoid(bias + sum of theta over all its expanded
// triples), with multi-value fields contributing one triple per element.
// drift_rate resamples that fraction of effects at each window boundary.
struct GenConfig {
  uint32_t n_users = 200;
  uint32_t n_items = 200;
  uint32_t n_ctx = 8;
  uint32_t n_groups = 10;
  uint32_t n_cats = 10;
  uint32_t n_brands = 15;
  uint32_t hist_pool = 5;
  uint32_t hist_min = 1;
  uint32_t hist_max = 4;
  uint64_t n_samples = 100000;
  uint32_t windows = 6;
  int64_t window_seconds = 86400;
  double sigma = 0.4;
  double bias = -1.0;
  double drift_rate = 0.0;
};

struct SyntheticData {
  FeatureSchema schema;
  Vocabulary vocab;
  std::vector<Sample> samples;
};

SyntheticData gen_synthetic(const GenConfig& cfg, uint64_t seed);

// Ground-truth latent effect for a triple at a given window; value arguments
// are vocabulary IDs as stored in generated samples. This mirrors exactly the
// stream the generator consumes and serves as the oracle for rate checks.
double synthetic_theta(const GenConfig& cfg, uint64_t seed, uint32_t window, uint16_t uf,
                       uint16_t vf, uint16_t cf, uint32_t uv, uint32_t vv, uint32_t cv);

// Ground-truth click probability of a sample at a window.
double synthetic_prob(const GenConfig& cfg, uint64_t seed, const FeatureSchema& schema,
                      const Sample& sample, uint32_t window);

// TSV dump (uf, vf, cf, uv, vv, cv, window, theta) of every distinct
// triple-window pair occurring in the samples.
std::string theta_table_tsv(const GenConfig& cfg, uint64_t seed, const FeatureSchema& schema,
                            const std::vector<Sample>& samples);

}  // namespace d2k
