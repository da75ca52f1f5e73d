#pragma once

// Parameter layouts and the pre-norm transformer block shared by the image
// and text towers.

#include "agreid/core.hpp"

#include <random>

namespace agreid::nn {

using ad::Index;
using ad::Var;

enum class Init { fan_in, embedding, ones, zeros };

struct ParamSpec {
  std::string name;
  Tag tag;
  Index rows;
  Index cols;
  Init init;
};

using Layout = std::vector<ParamSpec>;

inline void append(Layout& into, const Layout& from) { into.insert(into.end(), from.begin(), from.end()); }

inline std::size_t element_count(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& p : layout) n += static_cast<std::size_t>(p.rows * p.cols);
  return n;
}

/// Each array draws from its own stream keyed by (seed, name), so adding or
/// removing unrelated arrays leaves the rest bit-identical.
inline ParameterStore materialize(const Layout& layout, std::uint64_t seed) {
  ParameterStore store;
  for (const auto& p : layout) {
    Matrix m(p.rows, p.cols);
    std::mt19937_64 rng(derive_seed(seed, p.name));
    switch (p.init) {
      case Init::ones: m.setOnes(); break;
      case Init::zeros: m.setZero(); break;
      case Init::fan_in:
      case Init::embedding: {
        const double sd = p.init == Init::fan_in ? 1.0 / std::sqrt(static_cast<double>(std::max<Index>(p.rows, 1))) : 0.5;
        std::normal_distribution<double> dist(0.0, sd);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
        break;
      }
    }
    store.add(p.name, p.tag, std::move(m));
  }
  store.meta.seed = seed;
  return store;
}

inline Layout linear_layout(const std::string& name, Index in, Index out, Tag tag, bool bias = true) {
  Layout l{{name + ".W", tag, in, out, Init::fan_in}};
  if (bias) l.push_back({name + ".b", tag, 1, out, Init::zeros});
  return l;
}

inline Layout layer_norm_layout(const std::string& name, Index width, Tag tag) {
  return {{name + ".g", tag, 1, width, Init::ones}, {name + ".b", tag, 1, width, Init::zeros}};
}

inline Var apply_linear(const ParameterStore& ps, const std::string& name, const Var& x) {
  const std::string b = name + ".b";
  if (ps.contains(b)) return ad::linear(x, ps.var(name + ".W"), ps.var(b));
  return ad::matmul(x, ps.var(name + ".W"));
}

inline Var apply_layer_norm(const ParameterStore& ps, const std::string& name, const Var& x) {
  return ad::layer_norm(x, ps.var(name + ".g"), ps.var(name + ".b"));
}

inline Layout block_layout(const std::string& prefix, Index width, Tag tag) {
  Layout l;
  append(l, layer_norm_layout(prefix + ".ln1", width, tag));
  for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.o"})
    append(l, linear_layout(prefix + proj, width, width, tag));
  append(l, layer_norm_layout(prefix + ".ln2", width, tag));
  append(l, linear_layout(prefix + ".mlp.fc1", width, 4 * width, tag));
  append(l, linear_layout(prefix + ".mlp.fc2", 4 * width, width, tag));
  return l;
}

/// x + attn(ln1(x)), then + mlp(ln2(.)). `groups` independent sequences are
/// stacked along the rows of x.
inline Var block_forward(const ParameterStore& ps, const std::string& prefix, const Var& x, Index groups, Index heads,
                         bool causal, std::vector<Matrix>* record = nullptr) {
  const Var h = apply_layer_norm(ps, prefix + ".ln1", x);
  const Var q = apply_linear(ps, prefix + ".attn.q", h);
  const Var k = apply_linear(ps, prefix + ".attn.k", h);
  const Var v = apply_linear(ps, prefix + ".attn.v", h);
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols() / heads));
  const Var a = ad::attention(q, k, v, {groups, heads, causal, scale}, record);
  const Var x1 = ad::add(x, apply_linear(ps, prefix + ".attn.o", a));
  const Var h2 = apply_layer_norm(ps, prefix + ".ln2", x1);
  const Var m = apply_linear(ps, prefix + ".mlp.fc2", ad::gelu(apply_linear(ps, prefix + ".mlp.fc1", h2)));
  return ad::add(x1, m);
}

inline bool all_finite(const Var& v) { return v.value().allFinite(); }

}  // namespace agreid::nn
