#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace d2k {

namespace {

void check_inputs(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size())
    throw MetricError("scores and labels differ in length: " + std::to_string(scores.size()) +
                      " vs " + std::to_string(labels.size()));
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i]))
      throw MetricError("non-finite score at index " + std::to_string(i));
    if (labels[i] > 1) throw MetricError("label out of {0,1} at index " + std::to_string(i));
  }
}

}  // namespace

double auc(std::span<const double> scores, std::span<const uint8_t> labels) {
  check_inputs(scores, labels);
  size_t n = scores.size();
  size_t npos = 0;
  for (uint8_t l : labels) npos += l;
  size_t nneg = n - npos;
  if (npos == 0 || nneg == 0)
    throw MetricError("auc needs both classes; got " + std::to_string(npos) + " positives of " +
                      std::to_string(n));
  std::vector<uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](uint32_t a, uint32_t b) { return scores[a] < scores[b]; });
  // Average ranks within tied score groups, then the Mann-Whitney statistic.
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (size_t k = i; k < j; ++k)
      if (labels[idx[k]]) pos_rank_sum += avg_rank;
    i = j;
  }
  double u = pos_rank_sum - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double logloss(std::span<const double> scores, std::span<const uint8_t> labels) {
  check_inputs(scores, labels);
  if (scores.empty()) throw MetricError("logloss of empty input");
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    double p = std::clamp(scores[i], Tape::kProbEps, 1.0 - Tape::kProbEps);
    total += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(scores.size());
}

MetricPair evaluate(std::span<const double> scores, std::span<const uint8_t> labels) {
  return {auc(scores, labels), logloss(scores, labels)};
}

}  // namespace d2k
