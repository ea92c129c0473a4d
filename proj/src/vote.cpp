#include "cmsk/vote.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cmsk/tensor.hpp"  // for check()

namespace cmsk {

void VoteParams::validate() const {
  check(alpha >= 0 && beta >= 0 && gamma >= 0,
        "vote params: alpha, beta, gamma must be nonnegative");
  check(alpha + beta + gamma > 0, "vote params: all weights are zero");
}

static void check_probs(const std::vector<double>& p, const char* what) {
  double s = 0;
  for (double v : p) {
    check(v >= 0, std::string(what) + " probabilities must be nonnegative");
    s += v;
  }
  check(std::fabs(s - 1.0) < 1e-6,
        std::string(what) + " probabilities must sum to 1");
}

LinearSvm svm_train(const std::vector<std::vector<double>>& features,
                    const std::vector<int>& labels, int num_classes,
                    double lambda, int epochs, uint64_t seed,
                    double* train_acc) {
  check(!features.empty() && features.size() == labels.size(),
        "svm: features and labels must be nonempty and equal length");
  check(num_classes >= 2, "svm: need at least two classes");
  check(lambda >= 0 && epochs >= 1, "svm: invalid lambda or epochs");
  size_t n = features.size(), dim = features[0].size();
  int distinct = 0;
  for (int c = 0; c < num_classes; ++c)
    distinct += std::count(labels.begin(), labels.end(), c) > 0;
  check(distinct >= 2, "svm: training data contains a single class");
  for (auto& f : features)
    check(f.size() == dim, "svm: inconsistent feature lengths");

  LinearSvm svm;
  svm.feature_dim = int64_t(dim);
  svm.num_classes = num_classes;
  svm.lambda = lambda;
  svm.w.assign(size_t(num_classes), std::vector<double>(dim, 0.0));
  svm.b.assign(size_t(num_classes), 0.0);

  Rng rng(seed);
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double lr = 0.1 / (1.0 + epoch);
    rng.shuffle(order);
    for (int64_t idx : order) {
      const auto& x = features[size_t(idx)];
      for (int c = 0; c < num_classes; ++c) {
        auto& wc = svm.w[size_t(c)];
        double y = labels[size_t(idx)] == c ? 1.0 : -1.0;
        double margin =
            y * (std::inner_product(wc.begin(), wc.end(), x.begin(),
                                    svm.b[size_t(c)]));
        double decay = 1.0 - lr * lambda;
        for (double& v : wc) v *= decay;
        if (margin < 1.0) {
          for (size_t d = 0; d < dim; ++d) wc[d] += lr * y * x[d];
          svm.b[size_t(c)] += lr * y;
        }
      }
    }
  }
  if (train_acc) {
    double hits = 0;
    for (size_t i = 0; i < n; ++i) {
      auto m = svm_margins(svm, features[i]);
      hits += int(std::max_element(m.begin(), m.end()) - m.begin()) ==
              labels[i];
    }
    *train_acc = hits / double(n);
  }
  return svm;
}

std::vector<double> svm_margins(const LinearSvm& svm,
                                const std::vector<double>& feature) {
  check(int64_t(feature.size()) == svm.feature_dim,
        "svm: feature length " + std::to_string(feature.size()) +
            " does not match model dimension " +
            std::to_string(svm.feature_dim));
  std::vector<double> m(size_t(svm.num_classes));
  for (int c = 0; c < svm.num_classes; ++c)
    m[size_t(c)] =
        std::inner_product(svm.w[size_t(c)].begin(), svm.w[size_t(c)].end(),
                           feature.begin(), svm.b[size_t(c)]);
  return m;
}

std::vector<double> svm_predict_probs(const LinearSvm& svm,
                                      const std::vector<double>& feature) {
  std::vector<double> m = svm_margins(svm, feature);
  double mx = *std::max_element(m.begin(), m.end()), z = 0;
  for (double& v : m) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : m) v /= z;
  return m;
}

void svm_save(const LinearSvm& svm, const std::string& path) {
  std::ofstream os(path);
  check(bool(os), "cannot open svm path for writing: " + path);
  os.precision(17);
  os << "CMSK-SVM 1\n" << svm.feature_dim << " " << svm.num_classes << " "
     << svm.lambda << "\n";
  for (int c = 0; c < svm.num_classes; ++c) {
    os << svm.b[size_t(c)];
    for (double v : svm.w[size_t(c)]) os << " " << v;
    os << "\n";
  }
  check(bool(os), "failed writing svm model: " + path);
}

LinearSvm svm_load(const std::string& path) {
  std::ifstream is(path);
  check(bool(is), "cannot open svm model file: " + path);
  std::string magic;
  int version = 0;
  is >> magic >> version;
  check(magic == "CMSK-SVM", "not an svm model file: " + path);
  check(version == 1, "unsupported svm model version " +
                          std::to_string(version));
  LinearSvm svm;
  is >> svm.feature_dim >> svm.num_classes >> svm.lambda;
  check(bool(is) && svm.feature_dim > 0 && svm.num_classes >= 2,
        "corrupt svm model file: " + path);
  svm.w.assign(size_t(svm.num_classes),
               std::vector<double>(size_t(svm.feature_dim)));
  svm.b.assign(size_t(svm.num_classes), 0.0);
  for (int c = 0; c < svm.num_classes; ++c) {
    is >> svm.b[size_t(c)];
    for (double& v : svm.w[size_t(c)]) is >> v;
  }
  check(bool(is), "truncated svm model file: " + path);
  return svm;
}

double patch_weight(const std::vector<double>& tissue_probs,
                    const VoteParams& params) {
  check(tissue_probs.size() == 3, "patch weight: need 3 tissue probabilities");
  check_probs(tissue_probs, "tissue");
  params.validate();
  int dominant = int(std::max_element(tissue_probs.begin(),
                                      tissue_probs.end()) -
                     tissue_probs.begin());
  if (dominant == kTissueNeuropil || dominant == kTissueStroma)
    return params.alpha * tissue_probs[0] + params.beta * tissue_probs[1];
  return params.gamma;
}

static int argmax_with_tie(const std::vector<double>& v, bool* tie) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[size_t(best)]) best = int(i);
  if (tie) {
    *tie = false;
    for (size_t i = 0; i < v.size(); ++i)
      if (int(i) != best && v[i] == v[size_t(best)]) *tie = true;
  }
  return best;
}

static void check_records(const std::vector<PatchRecord>& records) {
  check(!records.empty(), "vote: no patch records");
  for (const PatchRecord& r : records) {
    check(r.slide_id == records[0].slide_id,
          "vote: records mix slides " + records[0].slide_id + " and " +
              r.slide_id);
    check(r.class_probs.size() == records[0].class_probs.size(),
          "vote: records disagree on class count");
    check_probs(r.class_probs, "class");
  }
}

SlideVerdict soft_vote(const std::vector<PatchRecord>& records,
                       const VoteParams& params) {
  check_records(records);
  SlideVerdict v;
  v.slide_id = records[0].slide_id;
  double total = 0;
  for (const PatchRecord& r : records) {
    v.weights.push_back(patch_weight(r.tissue_probs, params));
    total += v.weights.back();
  }
  std::vector<double> weights = v.weights;
  if (total == 0) {
    v.uniform_fallback = true;
    weights.assign(records.size(), 1.0);
    total = double(records.size());
  }
  size_t nc = records[0].class_probs.size();
  v.probs.assign(nc, 0.0);
  for (size_t i = 0; i < records.size(); ++i)
    for (size_t c = 0; c < nc; ++c)
      v.probs[c] += weights[i] * records[i].class_probs[c];
  for (double& p : v.probs) p /= total;
  v.label = argmax_with_tie(v.probs, &v.tie);
  return v;
}

SlideVerdict hard_vote(const std::vector<PatchRecord>& records) {
  check_records(records);
  SlideVerdict v;
  v.slide_id = records[0].slide_id;
  size_t nc = records[0].class_probs.size();
  std::vector<double> counts(nc, 0.0);
  for (const PatchRecord& r : records) {
    counts[size_t(argmax_with_tie(r.class_probs, nullptr))] += 1.0;
    v.weights.push_back(1.0);
  }
  v.probs = counts;
  for (double& p : v.probs) p /= double(records.size());
  v.label = argmax_with_tie(v.probs, &v.tie);
  return v;
}

std::string patch_record_line(const PatchRecord& rec) {
  std::ostringstream os;
  os.precision(17);
  os << rec.slide_id << " " << rec.x << " " << rec.y;
  for (double p : rec.class_probs) os << " " << p;
  os << " |";
  for (double p : rec.tissue_probs) os << " " << p;
  return os.str();
}

PatchRecord parse_patch_record(const std::string& line) {
  std::istringstream is(line);
  PatchRecord rec;
  check(bool(is >> rec.slide_id >> rec.x >> rec.y),
        "malformed patch record: " + line);
  std::string tok;
  bool in_tissue = false;
  while (is >> tok) {
    if (tok == "|") {
      in_tissue = true;
      continue;
    }
    try {
      (in_tissue ? rec.tissue_probs : rec.class_probs)
          .push_back(std::stod(tok));
    } catch (const std::logic_error&) {
      check(false, "malformed patch record: " + line);
    }
  }
  check(!rec.class_probs.empty() && rec.tissue_probs.size() == 3,
        "malformed patch record: " + line);
  return rec;
}

}  // namespace cmsk
