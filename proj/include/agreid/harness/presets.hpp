#pragma once

// Ablation presets as deltas on a model configuration.

#include "agreid/core.hpp"

namespace agreid::harness {

class UnknownPreset : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline const std::vector<std::string>& preset_tags() {
  static const std::vector<std::string> tags{"A", "B", "C", "no_view_token", "gt_attributes", "pseudo_attr"};
  return tags;
}

/// A: image encoder only. B: adds the attribute classifiers (retrieval still
/// on F_v^L). C: full model. The rest modify C.
inline ModelConfig ablation_preset(const std::string& tag, ModelConfig cfg = {}) {
  if (tag == "A") {
    cfg.use_pacg = false;
    cfg.use_cpt = false;
  } else if (tag == "B") {
    cfg.use_pacg = true;
    cfg.use_cpt = false;
  } else if (tag == "C") {
  } else if (tag == "no_view_token") {
    cfg.use_view_token = false;
  } else if (tag == "gt_attributes") {
    cfg.gt_attributes = true;
  } else if (tag == "pseudo_attr") {
    cfg.attribute_mode = AttributeMode::pseudo;
    cfg.use_pacg = false;
  } else {
    throw UnknownPreset("unknown preset '" + tag + "'");
  }
  return cfg;
}

}  // namespace agreid::harness
