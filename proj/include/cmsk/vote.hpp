#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmsk/rng.hpp"

namespace cmsk {

// Tissue classes predicted per patch: index 0 = neuropil, 1 = stroma
// (the two diagnosis-relevant components), 2 = other.
constexpr int kTissueNeuropil = 0, kTissueStroma = 1, kTissueOther = 2;

struct PatchRecord {
  std::string slide_id;
  int64_t x = 0, y = 0;
  std::vector<double> class_probs;   // length = number of slide classes
  std::vector<double> tissue_probs;  // length 3: (P1, P2, P3)
};

struct VoteParams {
  double alpha = 1.0, beta = 8.0, gamma = 1.0;
  void validate() const;
};

struct SlideVerdict {
  std::string slide_id;
  std::vector<double> probs;     // normalized score vector
  int label = 0;                 // argmax of probs
  std::vector<double> weights;   // per-patch weight audit trail
  bool tie = false;              // argmax tie, broken by lowest index
  bool uniform_fallback = false; // all weights were zero; used uniform
};

// One-vs-rest linear SVM over patch feature vectors.
struct LinearSvm {
  int64_t feature_dim = 0;
  int num_classes = 0;
  double lambda = 1e-3;
  std::vector<std::vector<double>> w;  // [class][feature]
  std::vector<double> b;               // [class]
};

LinearSvm svm_train(const std::vector<std::vector<double>>& features,
                    const std::vector<int>& labels, int num_classes,
                    double lambda, int epochs, uint64_t seed,
                    double* train_acc = nullptr);
std::vector<double> svm_margins(const LinearSvm& svm,
                                const std::vector<double>& feature);
// Softmax over the class margins.
std::vector<double> svm_predict_probs(const LinearSvm& svm,
                                      const std::vector<double>& feature);

void svm_save(const LinearSvm& svm, const std::string& path);
LinearSvm svm_load(const std::string& path);

// alpha*P1 + beta*P2 when the dominant tissue is neuropil or stroma,
// otherwise gamma.
double patch_weight(const std::vector<double>& tissue_probs,
                    const VoteParams& params);

SlideVerdict soft_vote(const std::vector<PatchRecord>& records,
                       const VoteParams& params);
SlideVerdict hard_vote(const std::vector<PatchRecord>& records);

// Line format: slide_id x y class_probs... | tissue_probs (3 reals).
std::string patch_record_line(const PatchRecord& rec);
PatchRecord parse_patch_record(const std::string& line);

}  // namespace cmsk
