// SPDX-License-Identifier: Apache-2.0
#include "stmae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stmae/common.hpp"

namespace stmae {

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ConfigError("auroc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks (1-based) over tie groups, doubled to stay integral.
  double rank_sum_pos2 = 0.0;
  long n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double doubled_rank = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos2 += doubled_rank;
    i = j;
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw ConfigError("auroc: labels must be 0 or 1");
    n_pos += y;
  }
  const long n_neg = static_cast<long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ConfigError("auroc: both classes must be present");
  const double u2 = rank_sum_pos2 - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double mae(std::span<const double> preds, std::span<const double> targets) {
  if (preds.size() != targets.size()) throw ConfigError("mae: length mismatch");
  if (preds.empty()) throw ConfigError("mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ConfigError("accuracy: length mismatch");
  if (preds.empty()) throw ConfigError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double accuracy_from_probs(std::span<const double> probs, std::span<const int> labels) {
  std::vector<int> preds(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) preds[i] = probs[i] >= 0.5 ? 1 : 0;
  return accuracy(preds, labels);
}

std::pair<MetricReport, MetricReport> aggregate(std::span<const MetricReport> folds) {
  if (folds.empty()) throw ConfigError("aggregate: no fold reports");
  MetricReport mean, sd;
  mean.task = sd.task = folds.front().task;
  auto combine = [&](auto member) {
    std::vector<double> v;
    for (const auto& f : folds)
      if ((f.*member).has_value()) v.push_back(*(f.*member));
    if (v.size() != folds.size()) return;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    mean.*member = m;
    sd.*member = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  combine(&MetricReport::auroc);
  combine(&MetricReport::accuracy);
  combine(&MetricReport::mae);
  for (const auto& f : folds) mean.n += f.n;
  sd.n = mean.n;
  return {mean, sd};
}

}  // namespace stmae
