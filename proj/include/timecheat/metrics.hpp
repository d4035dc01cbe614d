#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "timecheat/data.hpp"
#include "timecheat/errors.hpp"

namespace timecheat::metrics {

struct MetricsReport {
  std::map<std::string, double> values;
  std::size_t samples = 0;
  Task task = Task::classification;

  double at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("metric '" + name + "' not in report");
    return it->second;
  }
  bool contains(const std::string& name) const { return values.count(name) != 0; }

  nlohmann::json to_json() const {
    nlohmann::json j = values;
    return {{"task", to_string(task)}, {"samples", samples}, {"metrics", j}};
  }

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Computed from mid-ranks.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l != 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("auroc: undefined with a single class present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps mid-ranks integral.
  double rank_sum2 = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid2 = static_cast<double>(i + 1 + j);  // 2 * average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum2 += mid2;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  const double u2 = rank_sum2 - p * (p + 1.0);
  return u2 / (2.0 * p * q);
}

/// Average precision: sum over recall steps of the precision reached there,
/// scanning scores in descending order with tied scores handled as one step.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auprc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l != 0;
  if (pos == 0) throw MetricError("auprc: undefined without positive labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i, group_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] != 0) ++group_pos;
      ++j;
    }
    tp += group_pos;
    fp += (j - i) - group_pos;
    if (group_pos > 0) {
      ap += static_cast<double>(tp) / static_cast<double>(tp + fp) * static_cast<double>(group_pos) /
            static_cast<double>(pos);
    }
    i = j;
  }
  return ap;
}

struct ClassificationSuite {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Accuracy plus macro-averaged precision, recall and F1. Undefined per-class
/// ratios count as 0; classes missing from both inputs trigger a warning.
inline ClassificationSuite classification_suite(std::span<const std::size_t> predicted,
                                                std::span<const std::size_t> truth, std::size_t classes = 0) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("classification_suite: length mismatch");
  ClassificationSuite s;
  if (truth.empty()) return s;
  for (std::size_t i = 0; i < truth.size(); ++i) classes = std::max({classes, predicted[i] + 1, truth[i] + 1});
  std::vector<std::vector<std::size_t>> cm(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++cm[truth[i]][predicted[i]];
    correct += predicted[i] == truth[i];
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t tp = cm[k][k], pred_k = 0, true_k = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      pred_k += cm[j][k];
      true_k += cm[k][j];
    }
    if (pred_k == 0 && true_k == 0) {
      diag::warn("classification_suite: class " + std::to_string(k) + " absent from predictions and labels");
      continue;
    }
    const double p = pred_k ? static_cast<double>(tp) / static_cast<double>(pred_k) : 0.0;
    const double r = true_k ? static_cast<double>(tp) / static_cast<double>(true_k) : 0.0;
    s.precision += p;
    s.recall += r;
    s.f1 += (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  const double kd = static_cast<double>(classes);
  s.precision /= kd;
  s.recall /= kd;
  s.f1 /= kd;
  return s;
}

/// Masked mean squared error reported in raw units.
inline double mse_report(std::span<const double> pred, std::span<const double> target, std::span<const double> mask) {
  if (pred.size() != target.size() || pred.size() != mask.size()) {
    throw std::invalid_argument("mse_report: length mismatch");
  }
  double s = 0.0, m = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const double r = pred[i] - target[i];
    s += mask[i] * r * r;
    m += mask[i];
  }
  if (m == 0.0) {
    diag::warn("mse_report: no valid targets");
    return 0.0;
  }
  return s / m;
}

}  // namespace timecheat::metrics
