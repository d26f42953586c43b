#pragma once

// Threshold-free and thresholded classification metrics. AUC is the
// Mann-Whitney statistic with mid-rank tie handling; undefined ratios are
// surfaced as missing values, never coerced to 0.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hybridroi/common.hpp"

namespace hybridroi {

struct ConfusionCounts {
  int64_t tp{0}, fp{0}, tn{0}, fn{0};
  int64_t n() const { return tp + fp + tn + fn; }
};

struct MetricsReport {
  double auc{0.0};
  std::optional<double> accuracy, sensitivity, specificity, f1;
  double threshold{0.5};
  ConfusionCounts confusion;
  int64_t n_pos{0}, n_neg{0};
};

// AUC = (sum of positive ranks - n_pos*(n_pos+1)/2) / (n_pos * n_neg),
// ranks averaged over ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check(scores.size() == labels.size(), "roc_auc: size mismatch");
  const size_t n = scores.size();
  int64_t n_pos = 0;
  for (int y : labels) {
    check(y == 0 || y == 1, "roc_auc: labels must be binary");
    n_pos += y;
  }
  const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("roc_auc: undefined, both classes must be present");

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // mid-rank of the tie block [i, j], 1-based ranks
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += mid_rank;
    i = j + 1;
  }
  const double n_pos_d = static_cast<double>(n_pos);
  return (rank_sum_pos - n_pos_d * (n_pos_d + 1.0) / 2.0) /
         (n_pos_d * static_cast<double>(n_neg));
}

// prediction = score >= threshold (ties predicted positive)
inline ConfusionCounts confusion(const std::vector<double>& scores,
                                 const std::vector<int>& labels, double threshold = 0.5) {
  check(scores.size() == labels.size(), "confusion: size mismatch");
  ConfusionCounts c;
  for (size_t i = 0; i < scores.size(); ++i) {
    check(labels[i] == 0 || labels[i] == 1, "confusion: labels must be binary");
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      pred ? ++c.tp : ++c.fn;
    else
      pred ? ++c.fp : ++c.tn;
  }
  return c;
}

struct DerivedMetrics {
  std::optional<double> sensitivity, specificity, accuracy, f1;
};

inline DerivedMetrics derived_metrics(const ConfusionCounts& c) {
  DerivedMetrics m;
  if (c.tp + c.fn > 0)
    m.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0)
    m.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  if (c.n() > 0) m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.n());
  if (2 * c.tp + c.fp + c.fn > 0)
    m.f1 = 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  return m;
}

inline MetricsReport build_report(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double threshold) {
  MetricsReport r;
  r.threshold = threshold;
  r.auc = roc_auc(scores, labels);
  r.confusion = confusion(scores, labels, threshold);
  auto d = derived_metrics(r.confusion);
  r.sensitivity = d.sensitivity;
  r.specificity = d.specificity;
  r.accuracy = d.accuracy;
  r.f1 = d.f1;
  r.n_pos = r.confusion.tp + r.confusion.fn;
  r.n_neg = r.confusion.tn + r.confusion.fp;
  return r;
}

// flat key-value text, 4 decimal places; undefined metrics spelled out
inline std::string report_text(const MetricsReport& r) {
  char buf[64];
  std::string out;
  auto emit = [&](const char* key, const std::optional<double>& v) {
    if (v) {
      std::snprintf(buf, sizeof(buf), "%s = %.4f\n", key, *v);
      out += buf;
    } else {
      out += std::string(key) + " = undefined\n";
    }
  };
  emit("auc", r.auc);
  emit("accuracy", r.accuracy);
  emit("sensitivity", r.sensitivity);
  emit("specificity", r.specificity);
  emit("f1", r.f1);
  emit("threshold", r.threshold);
  std::snprintf(buf, sizeof(buf), "tp = %lld\nfp = %lld\ntn = %lld\nfn = %lld\n",
                static_cast<long long>(r.confusion.tp), static_cast<long long>(r.confusion.fp),
                static_cast<long long>(r.confusion.tn), static_cast<long long>(r.confusion.fn));
  out += buf;
  std::snprintf(buf, sizeof(buf), "n_pos = %lld\nn_neg = %lld\n",
                static_cast<long long>(r.n_pos), static_cast<long long>(r.n_neg));
  out += buf;
  return out;
}

inline nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v)
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  j["auc"] = r.auc;
  put("accuracy", r.accuracy);
  put("sensitivity", r.sensitivity);
  put("specificity", r.specificity);
  put("f1", r.f1);
  j["threshold"] = r.threshold;
  j["tp"] = r.confusion.tp;
  j["fp"] = r.confusion.fp;
  j["tn"] = r.confusion.tn;
  j["fn"] = r.confusion.fn;
  j["n_pos"] = r.n_pos;
  j["n_neg"] = r.n_neg;
  return j;
}

inline void write_report(const MetricsReport& r, const std::string& path_prefix) {
  {
    std::ofstream out(path_prefix + ".txt", std::ios::binary);
    if (!out) throw IoError("write_report: cannot write " + path_prefix + ".txt");
    out << report_text(r);
  }
  {
    std::ofstream out(path_prefix + ".json", std::ios::binary);
    if (!out) throw IoError("write_report: cannot write " + path_prefix + ".json");
    out << report_json(r).dump(2) << "\n";
  }
}

}  // namespace hybridroi
