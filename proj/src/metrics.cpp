#include "cmsk/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "cmsk/tensor.hpp"  // for check()

namespace cmsk {

std::vector<std::vector<int64_t>> confusion_matrix(
    const std::vector<int>& labels, const std::vector<int>& preds,
    int num_classes) {
  check(labels.size() == preds.size(),
        "metrics: labels and predictions differ in length");
  check(num_classes >= 2, "metrics: need at least two classes");
  std::vector<std::vector<int64_t>> conf(
      size_t(num_classes), std::vector<int64_t>(size_t(num_classes), 0));
  for (size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < num_classes &&
              preds[i] >= 0 && preds[i] < num_classes,
          "metrics: class index out of range at sample " + std::to_string(i));
    ++conf[size_t(labels[i])][size_t(preds[i])];
  }
  return conf;
}

static int64_t total_of(const std::vector<std::vector<int64_t>>& conf) {
  int64_t t = 0;
  for (auto& row : conf) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

double accuracy(const std::vector<std::vector<int64_t>>& conf) {
  int64_t total = total_of(conf), diag = 0;
  for (size_t c = 0; c < conf.size(); ++c) diag += conf[c][c];
  check(total > 0, "metrics: empty confusion matrix");
  return double(diag) / double(total);
}

double balanced_accuracy(const std::vector<std::vector<int64_t>>& conf,
                         std::vector<std::string>* notes) {
  double sum = 0;
  int present = 0;
  for (size_t c = 0; c < conf.size(); ++c) {
    int64_t support = std::accumulate(conf[c].begin(), conf[c].end(), int64_t(0));
    if (support == 0) {
      if (notes)
        notes->push_back("class " + std::to_string(c) +
                         " has no support; excluded from BACC");
      continue;
    }
    sum += double(conf[c][c]) / double(support);
    ++present;
  }
  check(present > 0, "metrics: no class has support");
  return sum / present;
}

double cohen_kappa(const std::vector<std::vector<int64_t>>& conf) {
  int64_t total = total_of(conf);
  check(total > 0, "metrics: empty confusion matrix");
  double po = accuracy(conf), pe = 0;
  for (size_t c = 0; c < conf.size(); ++c) {
    int64_t row = std::accumulate(conf[c].begin(), conf[c].end(), int64_t(0));
    int64_t col = 0;
    for (size_t r = 0; r < conf.size(); ++r) col += conf[r][c];
    pe += (double(row) / total) * (double(col) / total);
  }
  if (pe == 1.0) return 0.0;  // degenerate all-one-class agreement
  return (po - pe) / (1.0 - pe);
}

double macro_f1(const std::vector<std::vector<int64_t>>& conf,
                std::vector<std::string>* notes) {
  double sum = 0;
  int counted = 0;
  for (size_t c = 0; c < conf.size(); ++c) {
    int64_t tp = conf[c][c];
    int64_t row = std::accumulate(conf[c].begin(), conf[c].end(), int64_t(0));
    int64_t col = 0;
    for (size_t r = 0; r < conf.size(); ++r) col += conf[r][c];
    if (row == 0 && col == 0) {
      if (notes)
        notes->push_back("class " + std::to_string(c) +
                         " absent from labels and predictions; excluded "
                         "from macro F1");
      continue;
    }
    double denom = double(row + col);
    sum += denom == 0 ? 0.0 : 2.0 * double(tp) / denom;
    ++counted;
  }
  check(counted > 0, "metrics: no class present");
  return sum / counted;
}

double auroc_ovr_macro(const std::vector<int>& labels,
                       const std::vector<std::vector<double>>& scores,
                       int num_classes, std::vector<std::string>* notes) {
  check(labels.size() == scores.size(),
        "metrics: labels and scores differ in length");
  size_t n = labels.size();
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    int64_t pos = 0;
    for (int l : labels) pos += (l == c);
    int64_t neg = int64_t(n) - pos;
    if (pos == 0 || neg == 0) {
      if (notes)
        notes->push_back("class " + std::to_string(c) +
                         " lacks positives or negatives; excluded from AUROC");
      continue;
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return scores[a][size_t(c)] < scores[b][size_t(c)];
    });
    // midranks over tied score groups
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && scores[order[j + 1]][size_t(c)] ==
                              scores[order[i]][size_t(c)])
        ++j;
      double mid = 0.5 * double(i + j) + 1.0;  // 1-based midrank
      for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
      i = j + 1;
    }
    double pos_ranks = 0;
    for (size_t s = 0; s < n; ++s)
      if (labels[s] == c) pos_ranks += rank[s];
    double u = pos_ranks - double(pos) * double(pos + 1) / 2.0;
    sum += u / (double(pos) * double(neg));
    ++counted;
  }
  check(counted > 0, "metrics: AUROC undefined for every class");
  return sum / counted;
}

MetricsReport compute_metrics(const std::vector<int>& labels,
                              const std::vector<int>& preds,
                              const std::vector<std::vector<double>>& scores,
                              int num_classes) {
  MetricsReport r;
  r.confusion = confusion_matrix(labels, preds, num_classes);
  for (auto& row : r.confusion)
    r.support.push_back(
        std::accumulate(row.begin(), row.end(), int64_t(0)));
  r.acc = accuracy(r.confusion);
  r.bacc = balanced_accuracy(r.confusion, &r.notes);
  r.kappa = cohen_kappa(r.confusion);
  r.macro_f1 = macro_f1(r.confusion, &r.notes);
  if (scores.empty()) {
    r.auroc = -1.0;
    r.notes.push_back("no scores provided; AUROC not computed");
  } else {
    r.auroc = auroc_ovr_macro(labels, scores, num_classes, &r.notes);
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "ACC " << acc << "\nBACC " << bacc << "\nKAPPA " << kappa
     << "\nF1 " << macro_f1 << "\nAUROC " << auroc << "\n";
  os << "confusion";
  for (auto& row : confusion) {
    os << "\n";
    for (size_t c = 0; c < row.size(); ++c) os << (c ? " " : "") << row[c];
  }
  os << "\nsupport";
  for (int64_t s : support) os << " " << s;
  os << "\n";
  for (auto& n : notes) os << "note: " << n << "\n";
  return os.str();
}

}  // namespace cmsk
