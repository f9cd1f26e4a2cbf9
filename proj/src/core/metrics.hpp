#pragma once

#include <cstdint>
#include <span>

namespace d2k {

struct MetricPair {
  double auc = 0.0;
  double logloss = 0.0;
};

// Mann-Whitney rank AUC; ties between a positive and a negative score count
// one half. Needs at least one label of each class.
double auc(std::span<const double> scores, std::span<const uint8_t> labels);

// Mean negative log likelihood with the same probability clamp training uses.
double logloss(std::span<const double> scores, std::span<const uint8_t> labels);

MetricPair evaluate(std::span<const double> scores, std::span<const uint8_t> labels);

}  // namespace d2k
