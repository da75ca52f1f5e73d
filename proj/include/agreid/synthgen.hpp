#pragma once

// Deterministic synthetic aerial-ground person dataset. Attributes are painted
// into fixed body regions so they are recoverable from pixels; each identity
// also carries a procedural stripe texture that does not survive the aerial
// projection well.

#include "agreid/core.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

namespace agreid::synth {

struct GenSpec {
  int n_identities = 40;
  int images_per_id_per_view = 4;
  AttributeSchema schema = default_schema();
  ViewRegistry views = default_views();
  int image_height = 64;
  int image_width = 32;
  double noise_std = 0.03;
  bool attrs_determine_identity = false;
  std::uint64_t seed = 0;
};

struct IdentitySpec {
  int identity = 0;
  std::vector<int> attributes;
  std::uint64_t texture_seed = 0;
};

class TooManyIdentities : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline double attribute_space_size(const AttributeSchema& schema) {
  double n = 1.0;
  for (int t = 0; t < schema.size(); ++t) n *= schema.arity(t);
  return n;
}

inline void validate(const GenSpec& spec) {
  if (spec.n_identities < 2) throw ConfigError("n_identities must be >= 2");
  if (spec.images_per_id_per_view < 1) throw ConfigError("images_per_id_per_view must be >= 1");
  if (spec.image_height < 8 || spec.image_width < 8) throw ConfigError("image too small");
  if (spec.noise_std < 0) throw ConfigError("noise_std must be >= 0");
  if (spec.views.size() < 1) throw ConfigError("at least one view required");
  if (spec.attrs_determine_identity && spec.n_identities > attribute_space_size(spec.schema))
    throw TooManyIdentities("cannot assign " + std::to_string(spec.n_identities) +
                            " distinct attribute vectors from a space of " +
                            std::to_string(static_cast<long long>(attribute_space_size(spec.schema))));
}

inline std::vector<IdentitySpec> assign_identities(const GenSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(derive_seed(spec.seed, "identities"));
  const int T = spec.schema.size();
  auto random_vector = [&] {
    std::vector<int> a(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) a[static_cast<size_t>(t)] = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.schema.arity(t)));
    return a;
  };

  std::vector<std::vector<int>> vectors;
  if (!spec.attrs_determine_identity) {
    for (int i = 0; i < spec.n_identities; ++i) vectors.push_back(random_vector());
  } else if (attribute_space_size(spec.schema) <= 1e6) {
    // enumerate the whole space, then take a seeded permutation prefix
    std::vector<std::vector<int>> all{{}};
    for (int t = 0; t < T; ++t) {
      std::vector<std::vector<int>> next;
      for (const auto& prefix : all)
        for (int s = 0; s < spec.schema.arity(t); ++s) {
          auto v = prefix;
          v.push_back(s);
          next.push_back(std::move(v));
        }
      all = std::move(next);
    }
    for (size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng() % i]);
    vectors.assign(all.begin(), all.begin() + spec.n_identities);
  } else {
    std::set<std::vector<int>> seen;
    while (static_cast<int>(vectors.size()) < spec.n_identities) {
      auto v = random_vector();
      if (seen.insert(v).second) vectors.push_back(std::move(v));
    }
  }

  std::vector<IdentitySpec> out;
  std::set<std::uint64_t> textures;
  for (int i = 0; i < spec.n_identities; ++i) {
    std::uint64_t ts = derive_seed(spec.seed, "texture", i);
    while (!textures.insert(ts).second) ts = splitmix64(ts);
    out.push_back({i, std::move(vectors[static_cast<size_t>(i)]), ts});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

using Rgb = std::array<double, 3>;

// Fixed palettes, indexed by subcategory. Categories beyond these five fall
// back to a generic hue wheel painted as a small chest badge.
inline const std::vector<Rgb>& upper_palette() {
  static const std::vector<Rgb> p{{0.85, 0.15, 0.15}, {0.15, 0.70, 0.20}, {0.15, 0.25, 0.85}, {0.90, 0.85, 0.15}};
  return p;
}
inline const std::vector<Rgb>& lower_palette() {
  static const std::vector<Rgb> p{{0.08, 0.08, 0.08}, {0.95, 0.95, 0.95}, {0.15, 0.20, 0.60}, {0.55, 0.33, 0.10}};
  return p;
}
inline const std::vector<Rgb>& hair_palette() {
  static const std::vector<Rgb> p{{0.08, 0.06, 0.05}, {0.90, 0.80, 0.45}, {0.70, 0.25, 0.10}};
  return p;
}
inline constexpr Rgb kSkin{0.85, 0.68, 0.55};
inline constexpr Rgb kBag{0.55, 0.10, 0.60};

inline Rgb hue(int index, int count) {
  const double h = 6.0 * index / std::max(count, 1);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  const int seg = static_cast<int>(h) % 6;
  static constexpr std::array<std::array<int, 3>, 6> order{{{0, 1, 2}, {1, 0, 2}, {2, 0, 1}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}}};
  Rgb c{0.15, 0.15, 0.15};
  const auto& o = order[static_cast<size_t>(seg)];
  c[static_cast<size_t>(o[0])] = 0.9;
  c[static_cast<size_t>(o[1])] = 0.15 + 0.75 * x;
  return c;
}

inline Rgb pick(const std::vector<Rgb>& palette, int index, int count) {
  if (count <= static_cast<int>(palette.size())) return palette[static_cast<size_t>(index)];
  return hue(index, count);
}

struct Texture {
  double freq = 3.0;
  double angle = 0.0;
  double phase = 0.0;
  double amplitude = 0.12;
  Rgb weights{};

  explicit Texture(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    freq = 2.0 + 4.0 * u(rng);
    angle = 3.14159265358979 * u(rng);
    phase = 6.28318530717959 * u(rng);
    for (auto& w : weights) w = 2.0 * u(rng) - 1.0;
  }

  /// Local figure coordinates in [0,1]^2.
  double value(double fx, double fy) const {
    const double s = std::cos(angle) * fx * 2.0 + std::sin(angle) * fy * 4.0;
    return amplitude * std::sin(6.28318530717959 * freq * s / 2.0 + phase);
  }
};

/// Vertical layout of body regions as fractions of the figure box.
struct Layout {
  double hair_end, face_end, torso_begin, torso_end, legs_end;
};

inline void paint_figure(Image& img, const IdentitySpec& id, const AttributeSchema& schema, int top, int height,
                         const Layout& lay) {
  const int W = img.width;
  const int T = schema.size();
  auto attr = [&](int t) { return t < T ? id.attributes[static_cast<size_t>(t)] : 0; };
  const Rgb upper = pick(upper_palette(), attr(0), T > 0 ? schema.arity(0) : 1);
  const Rgb lower = T > 1 ? pick(lower_palette(), attr(1), schema.arity(1)) : Rgb{0.3, 0.3, 0.3};
  const Rgb hair = T > 2 ? pick(hair_palette(), attr(2), schema.arity(2)) : Rgb{0.1, 0.1, 0.1};
  // build: interpolate body width between slim and broad
  const double build = T > 3 ? static_cast<double>(attr(3)) / (schema.arity(3) - 1) : 0.0;
  const bool bag = T > 4 && attr(4) > 0;
  const Texture tex(id.texture_seed);

  const double torso_half = W * (0.22 + 0.13 * build);
  const double leg_half = W * (0.17 + 0.08 * build);
  const double head_half = W * 0.16;
  const double cx = W / 2.0;

  for (int y = top; y < top + height && y < img.height; ++y) {
    if (y < 0) continue;
    const double fy = (y - top + 0.5) / height;
    for (int x = 0; x < W; ++x) {
      const double dx = std::abs(x + 0.5 - cx);
      const double fx = (x + 0.5) / W;
      Rgb c{};
      bool hit = false;
      bool textured = false;
      if ((fy < lay.hair_end && dx < head_half) || (fy < lay.face_end && dx >= head_half && dx < head_half + W * 0.06)) {
        c = hair;
        hit = true;
      } else if (fy < lay.face_end && dx < head_half) {
        c = kSkin;
        hit = true;
      } else if (fy >= lay.torso_begin && fy < lay.torso_end && dx < torso_half) {
        c = upper;
        hit = textured = true;
      } else if (fy >= lay.torso_begin && fy < lay.torso_end && bag && dx >= torso_half && dx < torso_half + W * 0.12) {
        // shoulder straps and side pouches on both sides
        c = kBag;
        hit = true;
      } else if (fy >= lay.torso_end && fy < lay.legs_end && dx < leg_half) {
        c = lower;
        hit = textured = true;
      }
      if (!hit) continue;
      if (textured) {
        const double v = tex.value(fx, fy);
        for (int ch = 0; ch < 3; ++ch) c[static_cast<size_t>(ch)] += v * tex.weights[static_cast<size_t>(ch)];
      }
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<size_t>(ch)];
    }
  }
  // categories beyond the five body regions: one badge square each on the chest
  for (int t = 5; t < T; ++t) {
    const Rgb badge = hue(attr(t), schema.arity(t));
    const int by = top + static_cast<int>(height * (lay.torso_begin + 0.05 + 0.06 * ((t - 5) / 3)));
    const int bx = static_cast<int>(cx - torso_half * 0.8 + ((t - 5) % 3) * torso_half * 0.55);
    const int bs = std::max(2, static_cast<int>(height * 0.04));
    for (int y = by; y < by + bs && y < img.height; ++y)
      for (int x = bx; x < bx + bs && x < W; ++x)
        if (y >= 0 && x >= 0)
          for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = badge[static_cast<size_t>(ch)];
  }
}

inline Image background(int H, int W, ViewKind kind) {
  Image img(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double fy = static_cast<double>(y) / H;
      Rgb c = kind == ViewKind::aerial ? Rgb{0.35 + 0.05 * std::sin(x * 0.7), 0.40, 0.32}
                                       : Rgb{0.55 + 0.1 * fy, 0.58 + 0.05 * fy, 0.60 - 0.1 * fy};
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<size_t>(ch)];
    }
  return img;
}

/// 2x box downsample followed by nearest upsample.
inline void blur2x(Image& img) {
  for (int y = 0; y + 1 < img.height; y += 2)
    for (int x = 0; x + 1 < img.width; x += 2)
      for (int ch = 0; ch < 3; ++ch) {
        const double m = 0.25 * (img.at(y, x, ch) + img.at(y + 1, x, ch) + img.at(y, x + 1, ch) + img.at(y + 1, x + 1, ch));
        img.at(y, x, ch) = img.at(y + 1, x, ch) = img.at(y, x + 1, ch) = img.at(y + 1, x + 1, ch) = m;
      }
}

}  // namespace detail

/// Renders one image of an identity under a view. `instance_seed` drives
/// only the additive noise layer.
inline Image render_person(const IdentitySpec& id, const GenSpec& spec, int view_id, std::uint64_t instance_seed) {
  const ViewEntry& view = spec.views.at(view_id);
  const int H = spec.image_height;
  const int W = spec.image_width;
  Image img = detail::background(H, W, view.kind);

  switch (view.kind) {
    case ViewKind::aerial: {
      // top-down squash to 42% of the height; the head occupies a larger share
      const int h = static_cast<int>(H * 0.42);
      detail::paint_figure(img, id, spec.schema, (H - h) / 2, h, {0.22, 0.30, 0.31, 0.70, 1.0});
      detail::blur2x(img);
      break;
    }
    case ViewKind::wearable: {
      // close range: only the upper 60% of the figure is in frame
      const int full = static_cast<int>((H - 4) / 0.6);
      detail::paint_figure(img, id, spec.schema, 2, full, {0.06, 0.16, 0.17, 0.52, 0.95});
      break;
    }
    case ViewKind::ground:
      detail::paint_figure(img, id, spec.schema, 2, H - 4, {0.06, 0.16, 0.17, 0.52, 0.95});
      break;
  }

  if (spec.noise_std > 0) {
    std::mt19937_64 rng(instance_seed);
    // Gaussian, clipped at three standard deviations
    std::normal_distribution<double> noise(0.0, 1.0);
    for (auto& v : img.data) v += spec.noise_std * std::clamp(noise(rng), -3.0, 3.0);
  }
  for (auto& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// Dataset

struct Protocol {
  std::string name;  // e.g. "A2G"
  std::vector<int> query_views;
  std::vector<int> gallery_views;
};

/// Heterogeneous protocols available for a registry: A2G/G2A, plus A2W/W2A
/// when a wearable view exists.
inline std::vector<Protocol> protocols_for(const ViewRegistry& views) {
  std::vector<Protocol> out;
  const auto a = views.of_kind(ViewKind::aerial);
  const auto g = views.of_kind(ViewKind::ground);
  const auto w = views.of_kind(ViewKind::wearable);
  if (!a.empty() && !g.empty()) {
    out.push_back({"A2G", a, g});
    out.push_back({"G2A", g, a});
  }
  if (!a.empty() && !w.empty()) {
    out.push_back({"A2W", a, w});
    out.push_back({"W2A", w, a});
  }
  return out;
}

struct ProtocolSplit {
  Protocol protocol;
  std::vector<PersonSample> query;
  std::vector<PersonSample> gallery;
};

struct Dataset {
  std::vector<PersonSample> train;
  std::vector<ProtocolSplit> protocols;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
};

inline std::string image_name(int identity, int view, int k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/%04d_v%d_%02d.png", identity, view, k);
  return buf;
}

inline Dataset generate_dataset(const GenSpec& spec) {
  const auto ids = assign_identities(spec);
  std::vector<int> order(ids.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 rng(derive_seed(spec.seed, "split"));
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const size_t n_train = order.size() / 2;

  Dataset ds;
  ds.train_ids.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  ds.test_ids.assign(order.begin() + static_cast<long>(n_train), order.end());
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());

  auto render_all = [&](int identity) {
    std::vector<PersonSample> out;
    const auto& id = ids[static_cast<size_t>(identity)];
    for (int v = 0; v < spec.views.size(); ++v)
      for (int k = 0; k < spec.images_per_id_per_view; ++k) {
        PersonSample s;
        s.image = render_person(id, spec, v, derive_seed(id.texture_seed, "instance", v, k));
        s.image_path = image_name(identity, v, k);
        s.identity = identity;
        s.view_id = v;
        s.camera_id = v * 2 + (k % 2);
        s.attributes = id.attributes;
        out.push_back(std::move(s));
      }
    return out;
  };

  for (int identity : ds.train_ids)
    for (auto& s : render_all(identity)) ds.train.push_back(std::move(s));

  std::vector<PersonSample> test;
  for (int identity : ds.test_ids)
    for (auto& s : render_all(identity)) test.push_back(std::move(s));
  for (const auto& p : protocols_for(spec.views)) {
    ProtocolSplit split{p, {}, {}};
    for (const auto& s : test) {
      if (std::find(p.query_views.begin(), p.query_views.end(), s.view_id) != p.query_views.end()) split.query.push_back(s);
      if (std::find(p.gallery_views.begin(), p.gallery_views.end(), s.view_id) != p.gallery_views.end())
        split.gallery.push_back(s);
    }
    ds.protocols.push_back(std::move(split));
  }
  return ds;
}

inline Json to_json(const GenSpec& s) {
  return {{"n_identities", s.n_identities},
          {"images_per_id_per_view", s.images_per_id_per_view},
          {"schema", agreid::to_json(s.schema)},
          {"views", agreid::to_json(s.views)},
          {"image_size", {s.image_height, s.image_width}},
          {"noise_std", s.noise_std},
          {"attrs_determine_identity", s.attrs_determine_identity},
          {"seed", s.seed}};
}

inline GenSpec genspec_from_json(const Json& j) {
  GenSpec s;
  try {
    if (j.contains("n_identities")) s.n_identities = j["n_identities"].get<int>();
    if (j.contains("images_per_id_per_view")) s.images_per_id_per_view = j["images_per_id_per_view"].get<int>();
    if (j.contains("schema")) s.schema = schema_from_json(j["schema"]);
    if (j.contains("views")) s.views = views_from_json(j["views"]);
    if (j.contains("image_size")) {
      s.image_height = j["image_size"].at(0).get<int>();
      s.image_width = j["image_size"].at(1).get<int>();
    }
    if (j.contains("noise_std")) s.noise_std = j["noise_std"].get<double>();
    if (j.contains("attrs_determine_identity")) s.attrs_determine_identity = j["attrs_determine_identity"].get<bool>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad generator spec: ") + e.what());
  }
  validate(s);
  return s;
}

/// Writes images/, train.jsonl, query_<P>.jsonl, gallery_<P>.jsonl and
/// genspec-echo.json under `dir`.
inline void write_dataset(const Dataset& ds, const GenSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  auto write_images = [&](const std::vector<PersonSample>& samples) {
    for (const auto& s : samples) write_png(dir / s.image_path, s.image);
  };
  write_images(ds.train);
  write_manifest(dir / "train.jsonl", ds.train);
  for (const auto& p : ds.protocols) {
    write_images(p.query);
    write_images(p.gallery);
    write_manifest(dir / ("query_" + p.protocol.name + ".jsonl"), p.query);
    write_manifest(dir / ("gallery_" + p.protocol.name + ".jsonl"), p.gallery);
  }
  std::ofstream echo(dir / "genspec-echo.json", std::ios::binary);
  echo << to_json(spec).dump(2) << '\n';
}

}  // namespace agreid::synth
