#pragma once

// Adam without weight decay.

#include "agreid/aie.hpp"
#include "agreid/harness/train_config.hpp"

#include <map>

namespace agreid::harness {

struct AdamState {
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
  std::int64_t t = 0;
};

inline void adam_step(const std::vector<aie::ParamGroup>& groups, double lr, const TrainConfig& cfg, AdamState& state) {
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& g : groups) {
    const double step_lr = lr * g.lr_scale;
    for (const Parameter* p : g.params) {
      const Matrix& grad = p->var.grad();
      auto mit = state.m.try_emplace(p->name, Matrix::Zero(grad.rows(), grad.cols())).first;
      auto vit = state.v.try_emplace(p->name, Matrix::Zero(grad.rows(), grad.cols())).first;
      Matrix& m = mit->second;
      Matrix& v = vit->second;
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
      Matrix& w = p->var.node()->value;
      w.array() -= step_lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
    }
  }
}

}  // namespace agreid::harness
