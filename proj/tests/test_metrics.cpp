#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/metrics.hpp"

using namespace mpoxvlm;

namespace {

// Independent O(n^2) pairwise oracle: P(score_pos > score_neg) + 0.5 ties.
double auroc_pairwise_oracle(const PredictionSet& preds) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (const auto& p : preds.items) {
    if (!p.label) continue;
    for (const auto& n : preds.items) {
      if (n.label) continue;
      ++pairs;
      if (p.score > n.score) wins += 1.0;
      else if (p.score == n.score) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

PredictionSet random_set(Rng& rng, int n) {
  PredictionSet s;
  bool has_pos = false, has_neg = false;
  for (int i = 0; i < n; ++i) {
    Prediction p;
    p.id = i;
    p.label = rng.bernoulli(0.4);
    // Quantized scores inject plenty of ties.
    p.score = std::round(rng.uniform() * 8.0) / 8.0;
    p.predicted = p.score > 0.5;
    (p.label ? has_pos : has_neg) = true;
    s.items.push_back(p);
  }
  if (!has_pos) s.items[0].label = true;
  if (!has_neg) s.items[1].label = false;
  return s;
}

}  // namespace

TEST_CASE("confusion counts partition the set") {
  PredictionSet s;
  // labels [1,1,0,0], preds [1,0,0,1]
  s.items = {{0, true, true, 0.9}, {1, true, false, 0.2}, {2, false, false, 0.1},
             {3, false, true, 0.8}};
  Confusion c = confusion(s);
  CHECK(c.tp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 1);
  CHECK(c.fp == 1);
  CHECK(c.total() == 4);
}

TEST_CASE("all-correct positives give zero fp and fn") {
  PredictionSet s;
  s.items = {{0, true, true, 0.9}, {1, true, true, 0.8}};
  Confusion c = confusion(s);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
  CHECK(accuracy(c) == 1.0);
}

TEST_CASE("metric formulas match hand-computed values") {
  Confusion c;
  c.tp = 2;
  c.fp = 1;
  c.fn = 3;
  c.tn = 0;
  REQUIRE(precision(c).has_value());
  REQUIRE(recall(c).has_value());
  CHECK_THAT(*precision(c), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
  CHECK_THAT(*recall(c), Catch::Matchers::WithinAbs(0.4, 1e-15));
  CHECK_THAT(*f1(c), Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("f1 is the harmonic mean of precision and recall") {
  // P = 0.5, R = 1.0 -> F1 = 2/3
  Confusion c;
  c.tp = 2;
  c.fp = 2;
  c.fn = 0;
  c.tn = 1;
  CHECK_THAT(*f1(c), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
}

TEST_CASE("undefined denominators propagate as markers, not zeros") {
  Confusion c;
  c.tn = 5;
  c.fn = 2;  // no positive predictions: TP+FP = 0
  CHECK_FALSE(precision(c).has_value());
  CHECK(recall(c).has_value());
  CHECK_FALSE(f1(c).has_value());

  Confusion c2;
  c2.tn = 5;
  c2.fp = 1;  // no actual positives: TP+FN = 0
  CHECK_FALSE(recall(c2).has_value());
  CHECK_FALSE(f1(c2).has_value());
}

TEST_CASE("auroc separates and ties as specified") {
  PredictionSet perfect;
  perfect.items = {{0, true, true, 0.9},
                   {1, true, true, 0.8},
                   {2, false, false, 0.7},
                   {3, false, false, 0.1}};
  CHECK(auroc(perfect) == 1.0);

  PredictionSet flat;
  for (int i = 0; i < 6; ++i) flat.items.push_back({i, i % 2 == 0, false, 0.5});
  CHECK(auroc(flat) == 0.5);
}

TEST_CASE("auroc rejects single-class input") {
  PredictionSet s;
  s.items = {{0, true, true, 0.9}, {1, true, true, 0.8}};
  CHECK_THROWS_AS(auroc(s), ValidationError);
}

TEST_CASE("auroc equals the pairwise oracle on random sets with ties") {
  Rng rng(20240901);
  for (int rep = 0; rep < 100; ++rep) {
    int n = 2 + static_cast<int>(rng.randint(0, 198));
    PredictionSet s = random_set(rng, n);
    CHECK_THAT(auroc(s), Catch::Matchers::WithinAbs(auroc_pairwise_oracle(s), 1e-12));
  }
}

TEST_CASE("auroc is invariant under strictly monotone score transforms") {
  Rng rng(7);
  PredictionSet s = random_set(rng, 120);
  double base = auroc(s);

  PredictionSet cubed = s;
  for (auto& p : cubed.items) p.score = p.score * p.score * p.score;
  CHECK_THAT(auroc(cubed), Catch::Matchers::WithinAbs(base, 1e-12));

  PredictionSet logistic = s;
  for (auto& p : logistic.items) p.score = 1.0 / (1.0 + std::exp(-4.0 * (p.score - 0.5)));
  CHECK_THAT(auroc(logistic), Catch::Matchers::WithinAbs(base, 1e-12));
}

TEST_CASE("metrics are invariant to sample order") {
  Rng rng(99);
  PredictionSet s = random_set(rng, 60);
  PredictionSet shuffled = s;
  std::reverse(shuffled.items.begin(), shuffled.items.end());
  CHECK(auroc(s) == auroc(shuffled));
  Confusion a = confusion(s), b = confusion(shuffled);
  CHECK(a.tp == b.tp);
  CHECK(a.fp == b.fp);
  CHECK(a.tn == b.tn);
  CHECK(a.fn == b.fn);
}

TEST_CASE("accuracy equals (TP+TN)/N") {
  Rng rng(3);
  PredictionSet s = random_set(rng, 50);
  Confusion c = confusion(s);
  CHECK(accuracy(c) == static_cast<double>(c.tp + c.tn) / 50.0);
}

TEST_CASE("seed aggregation: mean and sample std") {
  std::vector<std::optional<double>> vals = {0.8, 0.9, 1.0};
  MetricSummary s = summarize(vals);
  REQUIRE(s.mean.has_value());
  CHECK_THAT(*s.mean, Catch::Matchers::WithinAbs(0.9, 1e-15));
  CHECK_THAT(*s.stddev, Catch::Matchers::WithinAbs(0.1, 1e-12));
}

TEST_CASE("single-seed std is zero and flagged") {
  MetricSummary s = summarize({0.75});
  REQUIRE(s.mean.has_value());
  CHECK(*s.stddev == 0.0);
  CHECK(s.single_seed);
}

TEST_CASE("undefined seed value makes the summary undefined") {
  MetricSummary s = summarize({0.8, std::nullopt, 0.9});
  CHECK_FALSE(s.mean.has_value());
}

TEST_CASE("duplicate ids and out-of-range scores are rejected") {
  PredictionSet dup;
  dup.items = {{0, true, true, 0.5}, {0, false, false, 0.4}};
  CHECK_THROWS_AS(dup.validate(), ValidationError);

  PredictionSet bad;
  bad.items = {{0, true, true, 1.5}};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
