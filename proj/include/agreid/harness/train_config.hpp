#pragma once

#include "agreid/core.hpp"

namespace agreid::harness {

struct Augmentation {
  bool flip = true;
  int pad = 10;  // pixels; 0 disables pad-and-crop
  bool erase = true;
};

struct TrainConfig {
  int epochs = 120;
  double base_lr = 3.5e-4;
  double backbone_lr = 5e-6;  // FULL_FT only
  int warmup_epochs = 10;
  double warmup_start_factor = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int P = 16;
  int K_inst = 8;
  Augmentation augment;
  std::uint64_t seed = 0;
  std::string preset = "C";
  int checkpoint_every = 10;  // epochs; 0 writes only the final checkpoint

  int batch_size() const { return P * K_inst; }
};

inline std::vector<std::string> validate(const TrainConfig& c) {
  std::vector<std::string> e;
  if (c.epochs < 1) e.push_back("epochs < 1");
  if (c.warmup_epochs < 0 || c.warmup_epochs >= c.epochs) e.push_back("warmup_epochs must lie in [0, epochs)");
  if (c.P < 2) e.push_back("P < 2");
  if (c.K_inst < 2) e.push_back("K_inst < 2");
  if (c.base_lr <= 0 || c.backbone_lr < 0) e.push_back("learning rates must be positive");
  if (c.augment.pad < 0) e.push_back("pad < 0");
  return e;
}

inline Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"backbone_lr", c.backbone_lr},
          {"warmup_epochs", c.warmup_epochs},
          {"warmup_start_factor", c.warmup_start_factor},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"P", c.P},
          {"K_inst", c.K_inst},
          {"augment", {{"flip", c.augment.flip}, {"pad", c.augment.pad}, {"erase", c.augment.erase}}},
          {"seed", c.seed},
          {"preset", c.preset},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  try {
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("base_lr", c.base_lr);
    get("backbone_lr", c.backbone_lr);
    get("warmup_epochs", c.warmup_epochs);
    get("warmup_start_factor", c.warmup_start_factor);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("P", c.P);
    get("K_inst", c.K_inst);
    get("seed", c.seed);
    get("preset", c.preset);
    get("checkpoint_every", c.checkpoint_every);
    if (j.contains("augment")) {
      const Json& a = j["augment"];
      if (a.contains("flip")) c.augment.flip = a["flip"].get<bool>();
      if (a.contains("pad")) c.augment.pad = a["pad"].get<int>();
      if (a.contains("erase")) c.augment.erase = a["erase"].get<bool>();
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return c;
}

}  // namespace agreid::harness
