#pragma once

// Prompted attribute classifier group. For attribute t the feature
// F_a^t = [F_v^L, P~_t] is refined by a residual FFN after adding a
// cross-attention term computed from the other attribute prompts, then
// classified by a per-attribute linear head. A shared MLP maps F_a^t to a
// continuous text token.

#include "agreid/aie.hpp"

namespace agreid::pacg {

using ad::Index;
using ad::Var;

inline nn::Layout layout(const ModelConfig& cfg, const AttributeSchema& schema) {
  const Index cv = cfg.C_v;
  nn::Layout l;
  for (const char* proj : {"pacg.q", "pacg.k", "pacg.v", "pacg.o"}) nn::append(l, nn::linear_layout(proj, cv, cv, Tag::head));
  nn::append(l, nn::linear_layout("pacg.project_up", cv, 2 * cv, Tag::head));
  nn::append(l, nn::linear_layout("pacg.phi.fc1", 2 * cv, 4 * cv, Tag::head));
  nn::append(l, nn::linear_layout("pacg.phi.fc2", 4 * cv, 2 * cv, Tag::head, false));
  for (int t = 0; t < schema.size(); ++t)
    nn::append(l, nn::linear_layout("pacg.head." + std::to_string(t), 2 * cv, schema.arity(t), Tag::head));
  nn::append(l, nn::linear_layout("pacg.psi.fc1", 2 * cv, 2 * cv, Tag::head));
  nn::append(l, nn::linear_layout("pacg.psi.fc2", 2 * cv, cfg.C_t, Tag::head));
  return l;
}

class IndexOutOfRange : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// [B*T, 2*C_v] rows b*T + t = [class_feature_b, prompt_{b,t}].
inline Var attribute_features(const Var& class_feature, const Var& prompts, Index T) {
  const Index b = class_feature.rows();
  std::vector<Index> rep;
  rep.reserve(static_cast<size_t>(b * T));
  for (Index i = 0; i < b; ++i)
    for (Index t = 0; t < T; ++t) rep.push_back(i);
  return ad::concat_cols(ad::gather_rows(class_feature, std::move(rep)), prompts);
}

/// Multi-head cross attention with `queries` [G*Q, C_v] against a single
/// key/value per group derived from `keys` [G, C_v]; the Q attended outputs of
/// each group are mean-pooled and passed through the output projection:
/// result [G, C_v].
inline Var cross_attend(const ParameterStore& ps, const ModelConfig& cfg, const Var& keys, const Var& queries,
                        std::vector<Matrix>* record = nullptr) {
  const Index g = keys.rows();
  if (g == 0 || queries.rows() % g != 0) throw ShapeMismatch("cross_attend: queries not divisible into groups");
  const Var q = nn::apply_linear(ps, "pacg.q", queries);
  const Var k = nn::apply_linear(ps, "pacg.k", keys);
  const Var v = nn::apply_linear(ps, "pacg.v", keys);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.C_v));
  const Var a = ad::attention(q, k, v, {g, cfg.heads, false, scale}, record);
  return nn::apply_linear(ps, "pacg.o", ad::group_mean_rows(a, queries.rows() / g));
}

struct Output {
  std::vector<Var> logits;  // per category, [B, |subcategories(t)|]
  Var tokens;               // [B*T, C_t], image-major
  Var features;             // F_a, [B*T, 2*C_v]
};

struct Options {
  std::vector<Matrix>* attention_record = nullptr;
};

inline Output forward(const ParameterStore& ps, const ModelConfig& cfg, const AttributeSchema& schema,
                      const aie::EncodedBatch& enc, const Options& opts = {}) {
  const Index T = cfg.T;
  const Index b = enc.batch;
  if (schema.size() != T) throw ShapeMismatch("schema size differs from model T");
  if (enc.attribute_prompts.rows() != b * T) throw ShapeMismatch("attribute prompt rows != B*T");
  const Var fa = attribute_features(enc.class_feature, enc.attribute_prompts, T);

  Var x = fa;
  if (T >= 2) {
    std::vector<Index> others;
    std::vector<Index> key_rows;
    others.reserve(static_cast<size_t>(b * T * (T - 1)));
    for (Index i = 0; i < b; ++i)
      for (Index t = 0; t < T; ++t) {
        key_rows.push_back(i);
        for (Index s = 0; s < T; ++s)
          if (s != t) others.push_back(i * T + s);
      }
    const Var keys = ad::gather_rows(enc.class_feature, std::move(key_rows));
    const Var queries = ad::gather_rows(enc.attribute_prompts, std::move(others));
    const Var r = nn::apply_linear(ps, "pacg.project_up", cross_attend(ps, cfg, keys, queries, opts.attention_record));
    x = ad::add(r, fa);
  }
  // residual FFN, weights shared over attributes
  const Var hidden = ad::gelu(nn::apply_linear(ps, "pacg.phi.fc1", x));
  const Var o = ad::add(x, nn::apply_linear(ps, "pacg.phi.fc2", hidden));

  Output out;
  out.features = fa;
  for (Index t = 0; t < T; ++t) {
    std::vector<Index> rows;
    for (Index i = 0; i < b; ++i) rows.push_back(i * T + t);
    out.logits.push_back(nn::apply_linear(ps, "pacg.head." + std::to_string(t), ad::gather_rows(o, std::move(rows))));
  }
  out.tokens = nn::apply_linear(ps, "pacg.psi.fc2", ad::gelu(nn::apply_linear(ps, "pacg.psi.fc1", fa)));
  return out;
}

// ---------------------------------------------------------------------------
// Single-image helpers

inline aie::EncodedBatch as_batch(const aie::EncodedImage& enc) {
  return {ad::constant(Matrix(enc.class_feature)), ad::constant(enc.attribute_prompts), 1};
}

inline Eigen::RowVectorXd attribute_feature(const aie::EncodedImage& enc, int t) {
  if (t < 0 || t >= enc.attribute_prompts.rows()) throw IndexOutOfRange("attribute index " + std::to_string(t));
  Eigen::RowVectorXd out(enc.class_feature.size() * 2);
  out << enc.class_feature, enc.attribute_prompts.row(t);
  return out;
}

/// Cross attention of the prompts `others` [T-1, C_v] against one class feature.
inline Eigen::RowVectorXd cross_attend(const Eigen::RowVectorXd& class_feature, const Matrix& others,
                                       const ParameterStore& ps, const ModelConfig& cfg) {
  if (others.rows() == 0) throw ShapeMismatch("cross_attend: degenerate T=1, no other prompts");
  ad::NoGradGuard guard;
  return cross_attend(ps, cfg, ad::constant(Matrix(class_feature)), ad::constant(others)).value().row(0);
}

inline Eigen::RowVectorXd classify_attribute(const aie::EncodedImage& enc, int t, const ParameterStore& ps,
                                             const ModelConfig& cfg, const AttributeSchema& schema) {
  if (t < 0 || t >= cfg.T) throw IndexOutOfRange("attribute index " + std::to_string(t));
  ad::NoGradGuard guard;
  return forward(ps, cfg, schema, as_batch(enc)).logits[static_cast<size_t>(t)].value().row(0);
}

inline Matrix attribute_tokens(const aie::EncodedImage& enc, const ParameterStore& ps, const ModelConfig& cfg,
                               const AttributeSchema& schema) {
  ad::NoGradGuard guard;
  return forward(ps, cfg, schema, as_batch(enc)).tokens.value();
}

/// Argmax per category with ties going to the lower index: [B, T].
inline std::vector<std::vector<int>> predict(const Output& out) {
  const Index b = out.logits.empty() ? 0 : out.logits.front().rows();
  std::vector<std::vector<int>> pred(static_cast<size_t>(b), std::vector<int>(out.logits.size()));
  for (size_t t = 0; t < out.logits.size(); ++t)
    for (Index i = 0; i < b; ++i) {
      Index best = 0;
      const auto& row = out.logits[t].value().row(i);
      for (Index j = 1; j < row.size(); ++j)
        if (row(j) > row(best)) best = j;
      pred[static_cast<size_t>(i)][t] = static_cast<int>(best);
    }
  return pred;
}

}  // namespace agreid::pacg
