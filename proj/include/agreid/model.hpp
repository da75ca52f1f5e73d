#pragma once

// Full model: image encoder, attribute classifier group, prompt template and
// text encoder, identity heads, and the per-batch loss.

#include "agreid/cpt.hpp"
#include "agreid/evalkit.hpp"
#include "agreid/objective.hpp"

#include <optional>

namespace agreid {

using ad::Index;
using ad::Var;

inline nn::Layout model_layout(const ModelConfig& cfg, const AttributeSchema& schema, const ViewRegistry& views,
                               int num_identities) {
  nn::Layout l = aie::layout(cfg);
  nn::append(l, pacg::layout(cfg, schema));
  nn::append(l, cpt::layout(cfg, schema, views));
  nn::append(l, objective::layout(cfg, num_identities));
  return l;
}

struct Model {
  ModelConfig cfg;
  AttributeSchema schema;
  ViewRegistry views;
  int num_identities = 0;
  ParameterStore params;
};

inline void check_model_config(const ModelConfig& cfg, const AttributeSchema& schema) {
  auto errors = validate_config(cfg);
  if (schema.size() != cfg.T) errors.push_back("schema has " + std::to_string(schema.size()) + " categories but T=" + std::to_string(cfg.T));
  if (cfg.use_cpt && cfg.attribute_mode == AttributeMode::supervised && !cfg.use_pacg && !cfg.gt_attributes)
    errors.push_back("text branch in SUPERVISED mode needs PACG tokens or ground-truth attributes");
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += " [" + e + "]";
    throw ConfigError(msg);
  }
}

inline Model make_model(const ModelConfig& cfg, const AttributeSchema& schema, const ViewRegistry& views,
                        int num_identities, std::uint64_t seed) {
  check_model_config(cfg, schema);
  if (num_identities < 2) throw ConfigError("need at least 2 training identities");
  Model m{cfg, schema, views, num_identities, nn::materialize(model_layout(cfg, schema, views, num_identities), seed)};
  m.params.set_mode(cfg.mode);
  m.params.meta.config_hash = config_hash(cfg);
  return m;
}

struct ForwardResult {
  aie::EncodedBatch enc;
  std::optional<pacg::Output> pacg;
  Var text_feature;  // null when the text branch is disabled
};

/// `attributes` is required only when ground-truth attribute sentences are in use.
inline ForwardResult forward(const Model& m, const std::vector<const Image*>& images, const std::vector<int>& views,
                             const std::vector<std::vector<int>>* attributes = nullptr) {
  const ModelConfig& cfg = m.cfg;
  ForwardResult r;
  r.enc = aie::encode(m.params, cfg, images);
  const bool supervised = cfg.attribute_mode == AttributeMode::supervised;
  if (cfg.use_pacg && supervised) r.pacg = pacg::forward(m.params, cfg, m.schema, r.enc);
  if (cfg.use_cpt) {
    Var rows;
    if (!supervised) {
      rows = cpt::pseudo_attribute_rows(m.params, r.enc.attribute_prompts);
    } else if (cfg.gt_attributes) {
      if (!attributes) throw DataError("ground-truth attribute sentences need attribute labels");
      rows = cpt::gt_attribute_rows(m.params, m.schema, *attributes);
    } else {
      rows = r.pacg->tokens;
    }
    const Var sentences = cpt::build_sentences(m.params, cfg, m.views, views, rows);
    r.text_feature = cpt::encode_text(m.params, cfg, sentences, r.enc.batch).feature;
  }
  return r;
}

/// Loss for one batch; `labels` are contiguous training identity indices.
inline std::pair<Var, objective::LossBreakdown> batch_loss(const Model& m, const ForwardResult& f,
                                                          const std::vector<int>& labels,
                                                          const std::vector<std::vector<int>>* attributes) {
  const ModelConfig& cfg = m.cfg;
  objective::LossTerms terms;
  const Var cls = f.enc.class_feature;
  terms.id_aie = objective::id_loss(ad::matmul(cls, m.params.var("reid.aie.classifier.W")), labels, cfg.label_smoothing);
  terms.tri_aie = objective::triplet_loss(cls, labels, cfg.triplet_margin);
  if (f.text_feature) {
    terms.id_cpt = objective::id_loss(ad::matmul(f.text_feature, m.params.var("reid.cpt.classifier.W")), labels,
                                      cfg.label_smoothing);
    terms.tri_cpt = objective::triplet_loss(f.text_feature, labels, cfg.triplet_margin);
  }
  if (f.pacg) {
    if (!attributes) throw DataError("attribute labels required in SUPERVISED mode");
    for (int t = 0; t < cfg.T; ++t) {
      std::vector<int> lt;
      for (const auto& a : *attributes) lt.push_back(a[static_cast<size_t>(t)]);
      terms.attr.push_back(objective::attribute_loss(f.pacg->logits[static_cast<size_t>(t)], lt, cfg.label_smoothing,
                                                     cfg.attribute_mode));
    }
  }
  return objective::compose(terms, cfg.lambda1, cfg.lambda2);
}

// ---------------------------------------------------------------------------
// Inference

struct Embeddings {
  Matrix visual;     // [N, C_v]
  Matrix text;       // [N, C] or empty
  Matrix retrieval;  // [N, D]
  std::vector<std::vector<int>> attribute_predictions;  // empty without PACG
  Matrix attribute_tokens;                              // [N*T, C_t] or empty
};

inline Embeddings embed_samples(const Model& m, const std::vector<PersonSample>& samples, Index chunk = 64) {
  ad::NoGradGuard guard;
  Embeddings e;
  const Index n = static_cast<Index>(samples.size());
  e.visual.resize(n, m.cfg.C_v);
  if (m.cfg.use_cpt) e.text.resize(n, m.cfg.C);
  const bool with_pacg = m.cfg.use_pacg && m.cfg.attribute_mode == AttributeMode::supervised;
  if (with_pacg) e.attribute_tokens.resize(n * m.cfg.T, m.cfg.C_t);
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    std::vector<const Image*> images;
    std::vector<int> views;
    std::vector<std::vector<int>> attrs;
    for (Index i = start; i < start + count; ++i) {
      const auto& s = samples[static_cast<size_t>(i)];
      images.push_back(&s.image);
      views.push_back(s.view_id);
      if (s.attributes) attrs.push_back(*s.attributes);
    }
    const bool have_attrs = static_cast<Index>(attrs.size()) == count;
    const auto f = forward(m, images, views, have_attrs ? &attrs : nullptr);
    e.visual.middleRows(start, count) = f.enc.class_feature.value();
    if (f.text_feature) e.text.middleRows(start, count) = f.text_feature.value();
    if (f.pacg) {
      for (auto& p : pacg::predict(*f.pacg)) e.attribute_predictions.push_back(std::move(p));
      e.attribute_tokens.middleRows(start * m.cfg.T, count * m.cfg.T) = f.pacg->tokens.value();
    }
  }
  e.retrieval.resize(n, m.cfg.C_v + (m.cfg.use_cpt ? m.cfg.C : 0));
  for (Index i = 0; i < n; ++i) {
    if (m.cfg.use_cpt) e.retrieval.row(i) = cpt::retrieval_feature(e.visual.row(i), e.text.row(i));
    else e.retrieval.row(i) = cpt::normalized(e.visual.row(i));
  }
  return e;
}

}  // namespace agreid
