#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmsk {

struct MetricsReport {
  double acc = 0, bacc = 0, kappa = 0, macro_f1 = 0, auroc = 0;
  std::vector<std::vector<int64_t>> confusion;  // [true class][predicted]
  std::vector<int64_t> support;                 // per true class
  std::vector<std::string> notes;               // e.g. excluded absent classes
  std::string to_text() const;
};

std::vector<std::vector<int64_t>> confusion_matrix(
    const std::vector<int>& labels, const std::vector<int>& preds,
    int num_classes);

double accuracy(const std::vector<std::vector<int64_t>>& conf);
// Mean per-class recall; classes with no support are excluded.
double balanced_accuracy(const std::vector<std::vector<int64_t>>& conf,
                         std::vector<std::string>* notes = nullptr);
// Cohen's kappa with marginal-product expected agreement.
double cohen_kappa(const std::vector<std::vector<int64_t>>& conf);
// Macro F1; classes absent from both labels and predictions are excluded.
double macro_f1(const std::vector<std::vector<int64_t>>& conf,
                std::vector<std::string>* notes = nullptr);
// Macro one-vs-rest AUROC from per-sample scores [n][num_classes], using the
// rank-statistic estimator with midranks for ties. Classes without both a
// positive and a negative sample are excluded.
double auroc_ovr_macro(const std::vector<int>& labels,
                       const std::vector<std::vector<double>>& scores,
                       int num_classes,
                       std::vector<std::string>* notes = nullptr);

// Full report; pass empty scores to skip AUROC (reported as -1 with a note).
MetricsReport compute_metrics(const std::vector<int>& labels,
                              const std::vector<int>& preds,
                              const std::vector<std::vector<double>>& scores,
                              int num_classes);

}  // namespace cmsk
