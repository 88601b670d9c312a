#pragma once

// Five-class confusion matrices and the evaluation metric suite: accuracy,
// per-class F-beta, macro F1 and fold aggregation.
//
// F-beta conventions for degenerate classes: a class with tp = 0 but some
// fp or fn scores 0; a class that never occurs as label or prediction scores
// 1 and is excluded from the macro averages ("occupied classes" rule).

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinjoint/types.hpp"

namespace kinjoint {

struct ConfusionMatrix {
  // counts[t][p]: samples with true class t predicted as p.
  std::array<std::array<std::int64_t, kNumClasses>, kNumClasses> counts{};

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& row : counts)
      for (std::int64_t v : row) n += v;
    return n;
  }

  std::int64_t label_count(int c) const {
    std::int64_t n = 0;
    for (int p = 0; p < kNumClasses; ++p) n += counts[c][p];
    return n;
  }

  std::int64_t prediction_count(int c) const {
    std::int64_t n = 0;
    for (int t = 0; t < kNumClasses; ++t) n += counts[t][c];
    return n;
  }

  bool occupied(int c) const {
    return label_count(c) > 0 || prediction_count(c) > 0;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    for (int t = 0; t < kNumClasses; ++t)
      for (int p = 0; p < kNumClasses; ++p) counts[t][p] += other.counts[t][p];
    return *this;
  }
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::array<double, kNumClasses> per_class_f_beta{};
  double f_beta_mean_positive = 0.0;  // mean over the four kin classes
  double f_beta_all = 0.0;            // mean over all five classes
  double beta = 10.0;
  ConfusionMatrix cm;
};

inline ConfusionMatrix confusion(const std::vector<int>& preds,
                                 const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw std::runtime_error("confusion: " + std::to_string(preds.size()) +
                             " predictions vs " + std::to_string(labels.size()) +
                             " labels");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_class_label(preds[i]);
    check_class_label(labels[i]);
    cm.counts[labels[i]][preds[i]] += 1;
  }
  return cm;
}

// F-beta of one class: (1 + b^2) P R / (b^2 P + R).
inline double f_beta(const ConfusionMatrix& cm, int cls, double beta) {
  check_class_label(cls);
  if (beta <= 0.0) throw std::runtime_error("f_beta: beta must be positive");
  const double tp = static_cast<double>(cm.counts[cls][cls]);
  const double fp = static_cast<double>(cm.prediction_count(cls)) - tp;
  const double fn = static_cast<double>(cm.label_count(cls)) - tp;
  if (tp == 0.0) return (fp + fn) > 0.0 ? 0.0 : 1.0;
  const double precision = tp / (tp + fp);
  const double recall = tp / (tp + fn);
  const double b2 = beta * beta;
  return (1.0 + b2) * precision * recall / (b2 * precision + recall);
}

// Full metric suite for one confusion matrix. Macro averages run over the
// occupied classes only.
inline MetricsReport report(const ConfusionMatrix& cm, double beta = 10.0) {
  const std::int64_t total = cm.total();
  if (total == 0) throw std::runtime_error("report: confusion matrix is empty");
  MetricsReport rep;
  rep.beta = beta;
  rep.cm = cm;
  std::int64_t diag = 0;
  for (int c = 0; c < kNumClasses; ++c) diag += cm.counts[c][c];
  rep.accuracy = static_cast<double>(diag) / static_cast<double>(total);

  double f1_sum = 0.0, fb_all_sum = 0.0, fb_pos_sum = 0.0;
  int occupied_all = 0, occupied_pos = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    rep.per_class_f_beta[c] = f_beta(cm, c, beta);
    if (!cm.occupied(c)) continue;
    f1_sum += f_beta(cm, c, 1.0);
    fb_all_sum += rep.per_class_f_beta[c];
    ++occupied_all;
    if (c >= 1) {
      fb_pos_sum += rep.per_class_f_beta[c];
      ++occupied_pos;
    }
  }
  rep.macro_f1 = occupied_all ? f1_sum / occupied_all : 0.0;
  rep.f_beta_all = occupied_all ? fb_all_sum / occupied_all : 0.0;
  rep.f_beta_mean_positive = occupied_pos ? fb_pos_sum / occupied_pos : 0.0;
  return rep;
}

// Unweighted mean of each metric across folds; confusion counts are summed
// for reference.
inline MetricsReport aggregate_folds(const std::vector<MetricsReport>& folds) {
  if (folds.empty())
    throw std::runtime_error("aggregate_folds: no fold reports");
  MetricsReport agg;
  agg.beta = folds[0].beta;
  const double inv = 1.0 / static_cast<double>(folds.size());
  for (const MetricsReport& r : folds) {
    agg.accuracy += r.accuracy * inv;
    agg.macro_f1 += r.macro_f1 * inv;
    agg.f_beta_mean_positive += r.f_beta_mean_positive * inv;
    agg.f_beta_all += r.f_beta_all * inv;
    for (int c = 0; c < kNumClasses; ++c)
      agg.per_class_f_beta[c] += r.per_class_f_beta[c] * inv;
    agg.cm += r.cm;
  }
  return agg;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["accuracy"] = rep.accuracy;
  j["macro_f1"] = rep.macro_f1;
  j["beta"] = rep.beta;
  j["f_beta_all"] = rep.f_beta_all;
  j["f_beta_mean_positive"] = rep.f_beta_mean_positive;
  j["per_class_f_beta"] = rep.per_class_f_beta;
  std::vector<std::vector<std::int64_t>> counts;
  for (const auto& row : rep.cm.counts)
    counts.emplace_back(row.begin(), row.end());
  j["confusion"] = counts;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport rep;
  rep.accuracy = j.at("accuracy").get<double>();
  rep.macro_f1 = j.at("macro_f1").get<double>();
  rep.beta = j.at("beta").get<double>();
  rep.f_beta_all = j.at("f_beta_all").get<double>();
  rep.f_beta_mean_positive = j.at("f_beta_mean_positive").get<double>();
  const auto& pc = j.at("per_class_f_beta");
  for (int c = 0; c < kNumClasses; ++c) rep.per_class_f_beta[c] = pc.at(c);
  const auto& counts = j.at("confusion");
  for (int t = 0; t < kNumClasses; ++t)
    for (int p = 0; p < kNumClasses; ++p)
      rep.cm.counts[t][p] = counts.at(t).at(p).get<std::int64_t>();
  return rep;
}

// CSV of the raw counts, rows = true class.
inline std::string confusion_to_csv(const ConfusionMatrix& cm,
                                    bool positives_only = false) {
  static constexpr std::array<const char*, 5> cls{"neg", "fd", "fs", "md", "ms"};
  std::string out = "true\\pred";
  for (int p = 0; p < kNumClasses; ++p) {
    out += ',';
    out += cls[p];
  }
  out += '\n';
  for (int t = positives_only ? 1 : 0; t < kNumClasses; ++t) {
    out += cls[t];
    for (int p = 0; p < kNumClasses; ++p)
      out += ',' + std::to_string(cm.counts[t][p]);
    out += '\n';
  }
  return out;
}

}  // namespace kinjoint
