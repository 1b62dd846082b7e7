// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stmae {

/// Mann-Whitney AUROC; tied scores count one half. Throws when only one class is present.
double auroc(std::span<const double> scores, std::span<const int> labels);

double mae(std::span<const double> preds, std::span<const double> targets);

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Threshold probabilities at 0.5 and score against labels.
double accuracy_from_probs(std::span<const double> probs, std::span<const int> labels);

struct MetricReport {
  std::string task;  // "classify" or "regress"
  std::optional<double> auroc;
  std::optional<double> accuracy;
  std::optional<double> mae;
  int n = 0;
  int fold = -1;  // -1 = aggregate over folds
};

/// Mean and sample standard deviation of each metric present in all reports.
std::pair<MetricReport, MetricReport> aggregate(std::span<const MetricReport> folds);

}  // namespace stmae
