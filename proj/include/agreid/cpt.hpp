#pragma once

// Coupled prompt template: the sentence
//   <BOS> a [view] view photo of a [M_1..M_K] [A_1..A_T] person <EOS>
// is embedded slot by slot and encoded by a causal text transformer; the EOS
// output, projected to C, is the text feature F_d.

#include "agreid/pacg.hpp"

namespace agreid::cpt {

using ad::Index;
using ad::Var;

// ---------------------------------------------------------------------------
// Vocabulary and layout

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  explicit Vocabulary(const ViewRegistry& views) {
    words_ = {"<BOS>", "<EOS>", "a", "view", "photo", "of", "person"};
    view_base_ = static_cast<int>(words_.size());
    for (const auto& v : views.views()) words_.push_back(v.word);
  }

  int size() const { return static_cast<int>(words_.size()); }
  int id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); ++i)
      if (words_[i] == word) return static_cast<int>(i);
    throw std::out_of_range("word not in vocabulary: " + word);
  }
  int view_token(int view_id) const { return view_base_ + view_id; }
  int view_count() const { return size() - view_base_; }
  const std::string& word(int id) const { return words_.at(static_cast<size_t>(id)); }

  Json to_json() const {
    Json j = Json::object();
    for (size_t i = 0; i < words_.size(); ++i) j[words_[i]] = static_cast<int>(i);
    return j;
  }

 private:
  std::vector<std::string> words_;
  int view_base_ = 0;
};

enum class SlotKind { control, literal, view, shared, attribute };

struct Slot {
  SlotKind kind;
  int index;  // word id for control/literal, k for shared, t for attribute
};

/// Slot count is kTemplateLiterals + kTemplateControls + 1 + K + T, minus the
/// view slot when it is disabled.
inline std::vector<Slot> sentence_layout(const ModelConfig& cfg, const Vocabulary& vocab) {
  std::vector<Slot> s;
  s.push_back({SlotKind::control, Vocabulary::kBos});
  s.push_back({SlotKind::literal, vocab.id("a")});
  if (cfg.use_view_token) s.push_back({SlotKind::view, -1});
  for (const char* w : {"view", "photo", "of", "a"}) s.push_back({SlotKind::literal, vocab.id(w)});
  for (int k = 0; k < cfg.K; ++k) s.push_back({SlotKind::shared, k});
  for (int t = 0; t < cfg.T; ++t) s.push_back({SlotKind::attribute, t});
  s.push_back({SlotKind::literal, vocab.id("person")});
  s.push_back({SlotKind::control, Vocabulary::kEos});
  return s;
}

inline std::string render_layout(const std::vector<Slot>& slots, const Vocabulary& vocab, int view_id) {
  std::string out;
  for (const auto& s : slots) {
    std::string w;
    switch (s.kind) {
      case SlotKind::control:
      case SlotKind::literal: w = vocab.word(s.index); break;
      case SlotKind::view: w = vocab.word(vocab.view_token(view_id)); break;
      case SlotKind::shared: w = "[M" + std::to_string(s.index + 1) + "]"; break;
      case SlotKind::attribute: w = "[A" + std::to_string(s.index + 1) + "]"; break;
    }
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

inline nn::Layout layout(const ModelConfig& cfg, const AttributeSchema& schema, const ViewRegistry& views) {
  const Index ct = cfg.C_t;
  const Vocabulary vocab(views);
  nn::Layout l;
  l.push_back({"cpt.word_embedding", Tag::text_backbone, vocab.size(), ct, nn::Init::embedding});
  l.push_back({"cpt.pos", Tag::text_backbone, cfg.context_len, ct, nn::Init::embedding});
  for (int i = 0; i < cfg.L_t; ++i) nn::append(l, nn::block_layout("cpt.block." + std::to_string(i), ct, Tag::text_backbone));
  nn::append(l, nn::layer_norm_layout("cpt.ln_final", ct, Tag::text_backbone));
  nn::append(l, nn::linear_layout("cpt.text_projection", ct, cfg.C, Tag::text_backbone, false));
  l.push_back({"cpt.shared", Tag::text_prompt, cfg.K, ct, nn::Init::embedding});
  l.push_back({"cpt.gt_attribute_table", Tag::text_prompt, schema.total_subcategories(), ct, nn::Init::embedding});
  nn::append(l, nn::linear_layout("cpt.pseudo", cfg.C_v, ct, Tag::head));
  return l;
}

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

// ---------------------------------------------------------------------------
// Sentence assembly

/// Embeds B sentences: [B*S, C_t]. `attribute_rows` holds B*T rows in C_t,
/// image-major.
inline Var build_sentences(const ParameterStore& ps, const ModelConfig& cfg, const ViewRegistry& views,
                           const std::vector<int>& view_ids, const Var& attribute_rows) {
  const Vocabulary vocab(views);
  const auto slots = sentence_layout(cfg, vocab);
  const Index b = static_cast<Index>(view_ids.size());
  const Index T = cfg.T;
  if (attribute_rows.rows() != b * T || attribute_rows.cols() != cfg.C_t)
    throw ShapeMismatch("attribute rows must be [B*T, C_t]");
  for (int v : view_ids)
    if (!views.valid(v)) throw UnknownView("unknown view id " + std::to_string(v));

  const Index words = vocab.size();
  const Index shared_base = words;
  const Index attr_base = words + cfg.K;
  std::vector<Index> order;
  order.reserve(static_cast<size_t>(b) * slots.size());
  for (Index i = 0; i < b; ++i)
    for (const auto& s : slots) {
      switch (s.kind) {
        case SlotKind::control:
        case SlotKind::literal: order.push_back(s.index); break;
        case SlotKind::view: order.push_back(vocab.view_token(view_ids[static_cast<size_t>(i)])); break;
        case SlotKind::shared: order.push_back(shared_base + s.index); break;
        case SlotKind::attribute: order.push_back(attr_base + i * T + s.index); break;
      }
    }
  return ad::gather_rows(ad::concat_rows({ps.var("cpt.word_embedding"), ps.var("cpt.shared"), attribute_rows}),
                         std::move(order));
}

/// Attribute rows for the pseudo-attribute mode: raw final-layer prompts
/// [B*T, C_v] through a learned linear map into C_t.
inline Var pseudo_attribute_rows(const ParameterStore& ps, const Var& prompts) {
  return nn::apply_linear(ps, "cpt.pseudo", prompts);
}

/// Attribute rows looked up from ground-truth labels: [B*T, C_t].
inline Var gt_attribute_rows(const ParameterStore& ps, const AttributeSchema& schema,
                             const std::vector<std::vector<int>>& labels) {
  std::vector<Index> order;
  for (const auto& l : labels) {
    if (!schema.valid_labels(l)) throw AttributeOutOfRange("attribute label out of range");
    for (int t = 0; t < schema.size(); ++t) order.push_back(schema.offset(t) + l[static_cast<size_t>(t)]);
  }
  return ad::gather_rows(ps.var("cpt.gt_attribute_table"), std::move(order));
}

// ---------------------------------------------------------------------------
// Text encoder

struct TextOutput {
  Var hidden;   // [B*S, C_t] after the final layer norm
  Var feature;  // F_d, [B, C]
};

inline TextOutput encode_text(const ParameterStore& ps, const ModelConfig& cfg, const Var& sentences, Index batch) {
  if (batch <= 0 || sentences.rows() % batch != 0) throw ShapeMismatch("sentence rows not divisible by batch");
  const Index s = sentences.rows() / batch;
  if (s > cfg.context_len)
    throw ContextOverflow("sentence length " + std::to_string(s) + " exceeds context_len " + std::to_string(cfg.context_len));
  Var x = ad::add_tiled(sentences, ad::slice_rows(ps.var("cpt.pos"), 0, s));
  for (int i = 0; i < cfg.L_t; ++i) x = nn::block_forward(ps, "cpt.block." + std::to_string(i), x, batch, cfg.text_heads(), true);
  TextOutput out;
  out.hidden = nn::apply_layer_norm(ps, "cpt.ln_final", x);
  std::vector<Index> eos;
  for (Index i = 0; i < batch; ++i) eos.push_back(i * s + s - 1);
  out.feature = nn::apply_linear(ps, "cpt.text_projection", ad::gather_rows(out.hidden, std::move(eos)));
  if (!nn::all_finite(out.feature)) throw NonFiniteActivation("non-finite activation in text encoder");
  return out;
}

// ---------------------------------------------------------------------------
// Single-sentence helpers

/// Embedded sentence for one sample. In PSEUDO mode `attrs` is [T, C_v];
/// otherwise [T, C_t].
inline Matrix build_sentence(int view_id, const ParameterStore& ps, const ModelConfig& cfg, const ViewRegistry& views,
                             const Matrix& attrs) {
  ad::NoGradGuard guard;
  if (attrs.rows() != cfg.T) throw ShapeMismatch("attribute tokens must have T rows");
  Var rows = ad::constant(attrs);
  if (cfg.attribute_mode == AttributeMode::pseudo) {
    if (attrs.cols() != cfg.C_v) throw ShapeMismatch("pseudo attribute rows must be C_v wide");
    rows = pseudo_attribute_rows(ps, rows);
  }
  return build_sentences(ps, cfg, views, {view_id}, rows).value();
}

inline Matrix gt_attribute_sentence(int view_id, const ParameterStore& ps, const ModelConfig& cfg,
                                    const ViewRegistry& views, const AttributeSchema& schema,
                                    const std::vector<int>& labels) {
  ad::NoGradGuard guard;
  return build_sentences(ps, cfg, views, {view_id}, gt_attribute_rows(ps, schema, {labels})).value();
}

inline Eigen::RowVectorXd encode_text(const Matrix& sentence, const ParameterStore& ps, const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  return encode_text(ps, cfg, ad::constant(sentence), 1).feature.value().row(0);
}

// ---------------------------------------------------------------------------
// Retrieval feature

inline Eigen::RowVectorXd normalized(const Eigen::RowVectorXd& v) {
  const double n = v.norm();
  return n > 0 ? Eigen::RowVectorXd(v / n) : v;
}

/// [F_v^L, F_d] with each half L2-normalized and then the whole normalized.
/// A zero half stays zero.
inline Eigen::RowVectorXd retrieval_feature(const Eigen::RowVectorXd& visual, const Eigen::RowVectorXd& text) {
  Eigen::RowVectorXd out(visual.size() + text.size());
  out << normalized(visual), normalized(text);
  return normalized(out);
}

}  // namespace agreid::cpt
