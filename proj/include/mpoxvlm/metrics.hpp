#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpoxvlm/common.hpp"

namespace mpoxvlm {

// One scored, labeled prediction. `score` is the mpox probability in [0,1].
struct Prediction {
  std::int64_t id = 0;
  bool label = false;
  bool predicted = false;
  double score = 0.0;
};

struct PredictionSet {
  std::vector<Prediction> items;

  void validate() const {
    require(!items.empty(), "prediction set is empty");
    std::vector<std::int64_t> ids;
    ids.reserve(items.size());
    for (const auto& p : items) {
      require(p.score >= 0.0 && p.score <= 1.0,
              "prediction score outside [0,1] for id " + std::to_string(p.id));
      ids.push_back(p.id);
    }
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(),
            "duplicate prediction ids");
  }
};

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

inline Confusion confusion(const PredictionSet& preds) {
  preds.validate();
  Confusion c;
  for (const auto& p : preds.items) {
    if (p.label && p.predicted) ++c.tp;
    else if (!p.label && p.predicted) ++c.fp;
    else if (!p.label && !p.predicted) ++c.tn;
    else ++c.fn;
  }
  return c;
}

// Denominator-zero cases propagate as empty optionals rather than silent 0s.
inline double accuracy(const Confusion& c) {
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

inline std::optional<double> precision(const Confusion& c) {
  if (c.tp + c.fp == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

inline std::optional<double> recall(const Confusion& c) {
  if (c.tp + c.fn == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline std::optional<double> f1(const Confusion& c) {
  auto p = precision(c);
  auto r = recall(c);
  if (!p || !r) return std::nullopt;
  if (*p + *r == 0.0) return std::nullopt;
  return 2.0 * (*p) * (*r) / (*p + *r);
}

// Rank-based AUROC: P(score_pos > score_neg) + 0.5 * P(tie), computed from
// average ranks in O(n log n).
inline double auroc(const PredictionSet& preds) {
  preds.validate();
  std::int64_t n_pos = 0, n_neg = 0;
  for (const auto& p : preds.items) (p.label ? n_pos : n_neg)++;
  require(n_pos > 0 && n_neg > 0, "auroc needs at least one positive and one negative");

  std::vector<size_t> order(preds.items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return preds.items[a].score < preds.items[b].score;
  });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() &&
           preds.items[order[j]].score == preds.items[order[i]].score) {
      ++j;
    }
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t t = i; t < j; ++t) {
      if (preds.items[order[t]].label) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Per-seed metric values of one evaluation run.
struct SeedMetrics {
  std::uint64_t seed = 0;
  Confusion conf;
  double accuracy_v = 0.0;
  std::optional<double> precision_v, recall_v, f1_v;
  double auroc_v = 0.0;
  // Samples where the greedy answer and the score threshold rule disagree.
  std::int64_t score_answer_disagreements = 0;
};

struct MetricSummary {
  std::optional<double> mean, stddev;  // empty when any seed is undefined
  bool single_seed = false;
};

inline MetricSummary summarize(const std::vector<std::optional<double>>& vals) {
  MetricSummary s;
  s.single_seed = vals.size() == 1;
  for (const auto& v : vals) {
    if (!v) return s;  // undefined propagates
  }
  double mean = 0.0;
  for (const auto& v : vals) mean += *v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  if (vals.size() > 1) {
    for (const auto& v : vals) var += (*v - mean) * (*v - mean);
    var /= static_cast<double>(vals.size() - 1);  // sample std over seeds
  }
  s.mean = mean;
  s.stddev = std::sqrt(var);
  return s;
}

struct MetricsReport {
  std::string config_descriptor;
  std::string split;
  std::vector<SeedMetrics> per_seed;

  MetricSummary accuracy_s, precision_s, recall_s, f1_s, auroc_s;

  void summarize_all() {
    auto collect = [&](auto getter) {
      std::vector<std::optional<double>> vals;
      vals.reserve(per_seed.size());
      for (const auto& sm : per_seed) vals.push_back(getter(sm));
      return summarize(vals);
    };
    accuracy_s = collect([](const SeedMetrics& m) { return std::optional<double>(m.accuracy_v); });
    precision_s = collect([](const SeedMetrics& m) { return m.precision_v; });
    recall_s = collect([](const SeedMetrics& m) { return m.recall_v; });
    f1_s = collect([](const SeedMetrics& m) { return m.f1_v; });
    auroc_s = collect([](const SeedMetrics& m) { return std::optional<double>(m.auroc_v); });
  }
};

inline SeedMetrics seed_metrics(std::uint64_t seed, const PredictionSet& preds) {
  SeedMetrics m;
  m.seed = seed;
  m.conf = confusion(preds);
  m.accuracy_v = accuracy(m.conf);
  m.precision_v = precision(m.conf);
  m.recall_v = recall(m.conf);
  m.f1_v = f1(m.conf);
  m.auroc_v = auroc(preds);
  return m;
}

}  // namespace mpoxvlm
