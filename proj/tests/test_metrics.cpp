#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/common.hpp"
#include "core/metrics.hpp"

using namespace d2k;

namespace {

// Brute-force pairwise AUC: every (positive, negative) pair scores 1, 0.5 on
// ties, 0 otherwise.
double auc_pairwise(const std::vector<double>& s, const std::vector<uint8_t>& y) {
  double wins = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      if (s[i] > s[j])
        wins += 1.0;
      else if (s[i] == s[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("auc on perfectly ranked scores") {
  std::vector<double> s{0.9, 0.8, 0.3};
  std::vector<uint8_t> y{1, 0, 0};
  CHECK(auc(s, y) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("auc with all scores equal is one half") {
  std::vector<double> s{0.4, 0.4, 0.4, 0.4};
  std::vector<uint8_t> y{1, 0, 1, 0};
  CHECK(auc(s, y) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auc when the positive splits the negatives") {
  std::vector<double> s{0.9, 0.8, 0.3};
  std::vector<uint8_t> y{0, 1, 0};
  CHECK(auc(s, y) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auc rejects single-class input") {
  std::vector<double> s{0.1, 0.2};
  std::vector<uint8_t> ones{1, 1}, zeros{0, 0};
  CHECK_THROWS_AS(auc(s, ones), MetricError);
  CHECK_THROWS_AS(auc(s, zeros), MetricError);
  CHECK_THROWS_AS(auc({}, {}), MetricError);
}

TEST_CASE("auc rejects malformed input") {
  std::vector<double> s{0.1, 0.2};
  std::vector<uint8_t> y{1};
  CHECK_THROWS_AS(auc(s, y), MetricError);
  std::vector<double> bad{0.1, std::nan("")};
  std::vector<uint8_t> y2{1, 0};
  CHECK_THROWS_AS(auc(bad, y2), MetricError);
  std::vector<uint8_t> y3{1, 2};
  CHECK_THROWS_AS(auc(s, y3), MetricError);
}

TEST_CASE("rank auc matches the pairwise oracle on randomized inputs with ties") {
  Rng r(20240817);
  for (int trial = 0; trial < 200; ++trial) {
    size_t n = 2 + r.below(60);
    std::vector<double> s(n);
    std::vector<uint8_t> y(n);
    bool discrete = trial % 2 == 0;  // force heavy ties on half the trials
    for (size_t i = 0; i < n; ++i) {
      s[i] = discrete ? 0.1 * static_cast<double>(r.below(5)) : r.uniform();
      y[i] = static_cast<uint8_t>(r.below(2));
    }
    y[0] = 1;  // guarantee both classes
    y[1] = 0;
    CAPTURE(trial);
    CHECK(auc(s, y) == doctest::Approx(auc_pairwise(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("auc is invariant to monotone score transforms") {
  Rng r(7);
  std::vector<double> s(40);
  std::vector<uint8_t> y(40);
  for (size_t i = 0; i < s.size(); ++i) {
    s[i] = r.uniform();
    y[i] = static_cast<uint8_t>(r.below(2));
  }
  y[0] = 1;
  y[1] = 0;
  std::vector<double> t(s.size());
  for (size_t i = 0; i < s.size(); ++i) t[i] = 2.0 * s[i] - 0.3;
  CHECK(auc(s, y) == doctest::Approx(auc(t, y)).epsilon(1e-15));
}

TEST_CASE("logloss hand values") {
  std::vector<double> half{0.5};
  std::vector<uint8_t> one{1};
  CHECK(logloss(half, one) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  std::vector<double> confident{0.999999, 0.000001};
  std::vector<uint8_t> y{1, 0};
  CHECK(logloss(confident, y) < 1e-5);

  std::vector<double> pair{0.9, 0.2};
  std::vector<uint8_t> y2{1, 0};
  CHECK(logloss(pair, y2) == doctest::Approx(0.164252033486018).epsilon(1e-12));
}

TEST_CASE("logloss clamps scores outside the open interval") {
  std::vector<double> s{1.0};
  std::vector<uint8_t> y{1};
  CHECK(logloss(s, y) == doctest::Approx(1.000000049473647e-07).epsilon(1e-9));
  std::vector<double> s2{0.0};
  CHECK(logloss(s2, y) == doctest::Approx(-std::log(1e-7)).epsilon(1e-12));
}

TEST_CASE("logloss rejects empty input") {
  CHECK_THROWS_AS(logloss({}, {}), MetricError);
}

TEST_CASE("evaluate bundles both metrics") {
  std::vector<double> s{0.9, 0.8, 0.3};
  std::vector<uint8_t> y{1, 0, 0};
  MetricPair m = evaluate(s, y);
  CHECK(m.auc == doctest::Approx(1.0));
  CHECK(m.logloss == doctest::Approx(logloss(s, y)));
}
