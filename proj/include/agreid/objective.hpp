#pragma once

// Training losses: label-smoothed identity cross-entropy and batch-hard
// triplet on both the visual and the text branch, plus one smoothed
// cross-entropy per attribute category.

#include "agreid/nn.hpp"

#include <numeric>

namespace agreid::objective {

using ad::Var;

class LabelOutOfRange : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

using ad::DegenerateBatch;

inline nn::Layout layout(const ModelConfig& cfg, int num_identities) {
  nn::Layout l;
  nn::append(l, nn::linear_layout("reid.aie.classifier", cfg.C_v, num_identities, Tag::head, false));
  nn::append(l, nn::linear_layout("reid.cpt.classifier", cfg.C, num_identities, Tag::head, false));
  return l;
}

inline Var id_loss(const Var& logits, const std::vector<int>& labels, double eps) {
  if (eps < 0 || eps >= 1) throw std::invalid_argument("label smoothing must lie in [0,1)");
  for (int y : labels)
    if (y < 0 || y >= logits.cols()) throw LabelOutOfRange("label " + std::to_string(y) + " out of range");
  return ad::smoothed_cross_entropy(logits, labels, eps);
}

inline Var triplet_loss(const Var& features, const std::vector<int>& labels, double margin) {
  return ad::batch_hard_triplet(features, labels, margin);
}

inline Var attribute_loss(const Var& logits, const std::vector<int>& labels, double eps, AttributeMode mode) {
  if (mode == AttributeMode::pseudo) throw std::logic_error("attribute loss requested in PSEUDO attribute mode");
  return id_loss(logits, labels, eps);
}

struct LossBreakdown {
  double l_id_aie = 0;
  double l_tri_aie = 0;
  double l_id_cpt = 0;
  double l_tri_cpt = 0;
  std::vector<double> l_attr;
  double total = 0;
};

/// total = lambda1*(id_aie + id_cpt) + lambda2*(tri_aie + tri_cpt) + sum(attr).
/// The attribute sum is dropped in PSEUDO mode.
inline LossBreakdown total_loss(double l_id_aie, double l_tri_aie, double l_id_cpt, double l_tri_cpt,
                                std::vector<double> l_attr, double lambda1, double lambda2,
                                AttributeMode mode = AttributeMode::supervised) {
  LossBreakdown b{l_id_aie, l_tri_aie, l_id_cpt, l_tri_cpt, std::move(l_attr), 0};
  if (mode == AttributeMode::pseudo) b.l_attr.clear();
  const double attr = std::accumulate(b.l_attr.begin(), b.l_attr.end(), 0.0);
  b.total = lambda1 * (l_id_aie + l_id_cpt) + lambda2 * (l_tri_aie + l_tri_cpt) + attr;
  return b;
}

/// Tape-side composition: the branch terms that exist, in the same algebra.
struct LossTerms {
  Var id_aie, tri_aie, id_cpt, tri_cpt;
  std::vector<Var> attr;
};

inline std::pair<Var, LossBreakdown> compose(const LossTerms& terms, double lambda1, double lambda2) {
  auto value = [](const Var& v) { return v ? v.item() : 0.0; };
  std::vector<double> attr;
  for (const auto& a : terms.attr) attr.push_back(a.item());
  LossBreakdown b = total_loss(value(terms.id_aie), value(terms.tri_aie), value(terms.id_cpt), value(terms.tri_cpt),
                               std::move(attr), lambda1, lambda2);
  std::vector<Var> parts;
  for (const Var& id : {terms.id_aie, terms.id_cpt})
    if (id) parts.push_back(ad::scale(id, lambda1));
  for (const Var& tri : {terms.tri_aie, terms.tri_cpt})
    if (tri) parts.push_back(ad::scale(tri, lambda2));
  for (const auto& a : terms.attr) parts.push_back(a);
  if (parts.empty()) throw std::logic_error("no loss terms");
  Var total = parts.front();
  for (size_t i = 1; i < parts.size(); ++i) total = ad::add(total, parts[i]);
  return {total, b};
}

inline Json to_json(const LossBreakdown& b) {
  return {{"l_id_aie", b.l_id_aie}, {"l_tri_aie", b.l_tri_aie}, {"l_id_cpt", b.l_id_cpt},
          {"l_tri_cpt", b.l_tri_cpt}, {"l_attr", b.l_attr}, {"total", b.total}};
}

}  // namespace agreid::objective
