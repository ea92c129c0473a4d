#pragma once

#include <optional>
#include <string>

#include "cmsk/cmsa.hpp"
#include "cmsk/swin.hpp"

namespace cmsk {

struct ModelConfig {
  std::string variant = "custom";
  BackboneConfig backbone;
  CmsaConfig cmsa;
  int64_t num_classes = 5;
  int64_t head_hidden = 64;
  bool use_cmsa = true;  // false: classify from the stage-4 features only

  // mini | micro | tiny (224x224 presets) or toy (a small 64x64 config for
  // fast experiments and tests)
  static ModelConfig preset(const std::string& name);
  int64_t feature_dim() const;
  void validate() const;
};

struct Model {
  ModelConfig cfg;
  Backbone backbone;
  std::optional<CmsaModule> cmsa;
  KanLayer head1, head2;

  Model(const ModelConfig& cfg, Rng& rng);
  // Pre-head pooled feature vector [feature_dim].
  Tensor features(const Tensor& image, bool training);
  Tensor forward(const Tensor& image, bool training);  // logits [num_classes]
  void named_params(NamedParams& out) const;
  // Non-trained state (batchnorm running averages) that checkpoints carry.
  std::vector<std::pair<std::string, std::vector<double>*>> named_buffers();
  int64_t param_count() const;
};

// Binary checkpoint: magic "CMSK", format version, config echo, then named
// entries (f32 parameters, f64 buffers), all little-endian.
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace cmsk
