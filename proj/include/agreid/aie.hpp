#pragma once

// Attribute-aware image encoder: a pre-norm patch transformer where every
// layer receives T_hat fresh learnable prompt rows. The first T rows of the
// final layer's prompt outputs are the attribute prompts.

#include "agreid/nn.hpp"

namespace agreid::aie {

using ad::Index;
using ad::Var;

struct PatchEmbedding {
  Matrix tokens;       // [N, C_v], positional embedding included
  Matrix class_token;  // [1, C_v], positional embedding included
};

struct EncodedImage {
  Eigen::RowVectorXd class_feature;  // F_v^L, [C_v]
  Matrix attribute_prompts;          // [T, C_v]
};

/// Batched encoder output kept on the tape.
struct EncodedBatch {
  Var class_feature;      // [B, C_v]
  Var attribute_prompts;  // [B*T, C_v], image-major rows (b*T + t)
  Index batch = 0;
};

inline nn::Layout layout(const ModelConfig& cfg) {
  const Index cv = cfg.C_v;
  const Index patch_dim = static_cast<Index>(cfg.patch_size) * cfg.patch_size * 3;
  nn::Layout l;
  nn::append(l, nn::linear_layout("aie.patch", patch_dim, cv, Tag::backbone));
  l.push_back({"aie.cls", Tag::backbone, 1, cv, nn::Init::embedding});
  l.push_back({"aie.pos", Tag::backbone, cfg.num_patches() + 1, cv, nn::Init::embedding});
  nn::append(l, nn::layer_norm_layout("aie.ln_pre", cv, Tag::backbone));
  for (int i = 0; i < cfg.L; ++i) {
    nn::append(l, nn::block_layout("aie.block." + std::to_string(i), cv, Tag::backbone));
    l.push_back({"aie.prompts." + std::to_string(i), Tag::prompt, cfg.T_hat, cv, nn::Init::embedding});
  }
  nn::append(l, nn::layer_norm_layout("aie.ln_post", cv, Tag::backbone));
  return l;
}

inline void check_image(const Image& img, const ModelConfig& cfg) {
  if (img.height != cfg.image_height || img.width != cfg.image_width)
    throw ShapeMismatch("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + ", expected " +
                        std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
}

/// Non-overlapping patches flattened in (row, col, channel) order, patches in
/// raster order: [B*N, p*p*3].
inline Matrix patchify(const std::vector<const Image*>& images, const ModelConfig& cfg) {
  const int p = cfg.patch_size;
  const int gh = cfg.image_height / p;
  const int gw = cfg.image_width / p;
  const Index n = static_cast<Index>(gh) * gw;
  Matrix out(static_cast<Index>(images.size()) * n, static_cast<Index>(p) * p * 3);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    check_image(img, cfg);
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px) {
        const Index row = static_cast<Index>(b) * n + py * gw + px;
        Index col = 0;
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            for (int c = 0; c < 3; ++c) out(row, col++) = img.at(py * p + y, px * p + x, c);
      }
  }
  return out;
}

/// F^0 for a batch: per image [class, patch_1..patch_N] + positions, [B*(N+1), C_v].
inline Var embed(const ParameterStore& ps, const ModelConfig& cfg, const std::vector<const Image*>& images) {
  const Index b = static_cast<Index>(images.size());
  const Index n = cfg.num_patches();
  const Var tokens = nn::apply_linear(ps, "aie.patch", ad::constant(patchify(images, cfg)));
  std::vector<Index> order;
  order.reserve(static_cast<size_t>(b * (n + 1)));
  for (Index i = 0; i < b; ++i) {
    order.push_back(b * n);  // class row appended after all patch rows
    for (Index j = 0; j < n; ++j) order.push_back(i * n + j);
  }
  const Var seq = ad::gather_rows(ad::concat_rows({tokens, ps.var("aie.cls")}), std::move(order));
  return ad::add_tiled(seq, ps.var("aie.pos"));
}

inline PatchEmbedding patch_embed(const Image& image, const ParameterStore& ps, const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  const Var e = embed(ps, cfg, {&image});
  return {e.value().bottomRows(e.rows() - 1), e.value().topRows(1)};
}

struct EncodeOptions {
  /// Attention probability matrices of every layer, appended in layer order.
  std::vector<Matrix>* attention_record = nullptr;
};

inline EncodedBatch encode(const ParameterStore& ps, const ModelConfig& cfg, const std::vector<const Image*>& images,
                           const EncodeOptions& opts = {}) {
  const Index b = static_cast<Index>(images.size());
  if (b == 0) throw ShapeMismatch("empty image batch");
  const Index n1 = cfg.num_patches() + 1;
  const Index th = cfg.T_hat;
  const Index s = n1 + th;

  Var x = nn::apply_layer_norm(ps, "aie.ln_pre", embed(ps, cfg, images));
  Var y;
  for (int i = 0; i < cfg.L; ++i) {
    // [F^i, P^i] per image; fresh prompts every layer
    std::vector<Index> order;
    order.reserve(static_cast<size_t>(b * s));
    for (Index img = 0; img < b; ++img) {
      for (Index j = 0; j < n1; ++j) order.push_back(img * n1 + j);
      for (Index j = 0; j < th; ++j) order.push_back(b * n1 + j);
    }
    const Var seq = ad::gather_rows(ad::concat_rows({x, ps.var("aie.prompts." + std::to_string(i))}), std::move(order));
    y = nn::block_forward(ps, "aie.block." + std::to_string(i), seq, b, cfg.heads, false, opts.attention_record);
    if (i + 1 < cfg.L) {
      std::vector<Index> keep;
      keep.reserve(static_cast<size_t>(b * n1));
      for (Index img = 0; img < b; ++img)
        for (Index j = 0; j < n1; ++j) keep.push_back(img * s + j);
      x = ad::gather_rows(y, std::move(keep));
    }
  }

  std::vector<Index> cls_rows;
  std::vector<Index> prompt_rows;
  for (Index img = 0; img < b; ++img) {
    cls_rows.push_back(img * s);
    for (Index t = 0; t < cfg.T; ++t) prompt_rows.push_back(img * s + n1 + t);
  }
  EncodedBatch out;
  out.batch = b;
  out.class_feature = nn::apply_layer_norm(ps, "aie.ln_post", ad::gather_rows(y, std::move(cls_rows)));
  out.attribute_prompts = nn::apply_layer_norm(ps, "aie.ln_post", ad::gather_rows(y, std::move(prompt_rows)));
  if (!nn::all_finite(out.class_feature) || !nn::all_finite(out.attribute_prompts))
    throw NonFiniteActivation("non-finite activation in image encoder");
  return out;
}

inline std::vector<EncodedImage> unpack(const EncodedBatch& batch, int T) {
  std::vector<EncodedImage> out;
  for (Index b = 0; b < batch.batch; ++b)
    out.push_back({batch.class_feature.value().row(b), batch.attribute_prompts.value().middleRows(b * T, T)});
  return out;
}

/// Value-level encoding without recording a tape.
inline std::vector<EncodedImage> encode_image(const std::vector<const Image*>& images, const ParameterStore& ps,
                                              const ModelConfig& cfg) {
  ad::NoGradGuard guard;
  return unpack(encode(ps, cfg, images), cfg.T);
}

// ---------------------------------------------------------------------------
// Trainable subsets

struct ParamGroup {
  std::string name;  // "backbone" or "rest"
  double lr_scale = 1.0;
  std::vector<const Parameter*> params;
};

/// PROMPT_TUNE: one group of {prompt, head, text_prompt}. FULL_FT: all arrays,
/// split into a backbone group (image and text towers) scaled by
/// backbone_lr / base_lr and the rest.
inline std::vector<ParamGroup> trainable_parameters(const ParameterStore& ps, TuneMode mode,
                                                    double backbone_lr_scale = 5e-6 / 3.5e-4) {
  if (mode == TuneMode::prompt_tune) {
    ParamGroup g{"rest", 1.0, {}};
    for (const auto& p : ps.params())
      if (is_trainable(p.tag, mode)) g.params.push_back(&p);
    return {g};
  }
  ParamGroup backbone{"backbone", backbone_lr_scale, {}};
  ParamGroup rest{"rest", 1.0, {}};
  for (const auto& p : ps.params())
    (p.tag == Tag::backbone || p.tag == Tag::text_backbone ? backbone : rest).params.push_back(&p);
  return {backbone, rest};
}

inline std::size_t trainable_count(const nn::Layout& layout, TuneMode mode) {
  std::size_t n = 0;
  for (const auto& p : layout)
    if (is_trainable(p.tag, mode)) n += static_cast<std::size_t>(p.rows * p.cols);
  return n;
}

}  // namespace agreid::aie
