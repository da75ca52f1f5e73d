#pragma once

// Shared schemas, configuration, parameter storage and dataset manifest I/O.

#include "agreid/autograd.hpp"
#include "agreid/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace agreid {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;
using ad::Matrix;

// ---------------------------------------------------------------------------
// Errors. The CLI maps these families onto exit codes 2, 3 and 4.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, long line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

class MalformedRecord : public DataError {
 public:
  using DataError::DataError;
};
class UnknownView : public DataError {
 public:
  using DataError::DataError;
};
class AttributeOutOfRange : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a forward pass produces NaN or Inf.
class NonFiniteActivation : public NumericError {
 public:
  using NumericError::NumericError;
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {
inline std::uint64_t seed_key(const std::string& s) { return fnv1a(s); }
inline std::uint64_t seed_key(const char* s) { return fnv1a(s); }
template <class I>
  requires std::is_integral_v<I>
std::uint64_t seed_key(I v) {
  return static_cast<std::uint64_t>(v);
}
}  // namespace detail

/// Child seed for a hierarchical seeding scheme (parent -> child keys).
/// Keys may be integers or strings.
template <class... Keys>
std::uint64_t derive_seed(std::uint64_t parent, const Keys&... keys) {
  std::uint64_t s = splitmix64(parent);
  ((s = splitmix64(s ^ splitmix64(detail::seed_key(keys) + 0x632BE59BD9B4E019ull))), ...);
  return s;
}

// ---------------------------------------------------------------------------
// Attribute schema and view registry

struct AttributeCategory {
  std::string name;
  std::vector<std::string> subcategories;
};

class AttributeSchema {
 public:
  AttributeSchema() = default;
  explicit AttributeSchema(std::vector<AttributeCategory> categories) : categories_(std::move(categories)) {
    validate();
  }

  int size() const { return static_cast<int>(categories_.size()); }
  int arity(int t) const { return static_cast<int>(categories_.at(static_cast<size_t>(t)).subcategories.size()); }
  const AttributeCategory& category(int t) const { return categories_.at(static_cast<size_t>(t)); }
  const std::vector<AttributeCategory>& categories() const { return categories_; }

  /// Row offset of category t in a table holding one row per (category, subcategory).
  int offset(int t) const {
    int off = 0;
    for (int i = 0; i < t; ++i) off += arity(i);
    return off;
  }
  int total_subcategories() const { return offset(size()); }

  int find(const std::string& name) const {
    for (int t = 0; t < size(); ++t)
      if (categories_[static_cast<size_t>(t)].name == name) return t;
    return -1;
  }

  bool valid_labels(const std::vector<int>& labels) const {
    if (static_cast<int>(labels.size()) != size()) return false;
    for (int t = 0; t < size(); ++t)
      if (labels[static_cast<size_t>(t)] < 0 || labels[static_cast<size_t>(t)] >= arity(t)) return false;
    return true;
  }

  bool operator==(const AttributeSchema&) const = default;

 private:
  void validate() const {
    if (categories_.empty()) throw ConfigError("attribute schema needs at least one category");
    for (size_t i = 0; i < categories_.size(); ++i) {
      if (categories_[i].subcategories.size() < 2)
        throw ConfigError("category '" + categories_[i].name + "' needs at least 2 subcategories");
      for (size_t j = 0; j < i; ++j)
        if (categories_[j].name == categories_[i].name)
          throw ConfigError("duplicate category name '" + categories_[i].name + "'");
    }
  }

  std::vector<AttributeCategory> categories_;
};

inline bool operator==(const AttributeCategory& a, const AttributeCategory& b) {
  return a.name == b.name && a.subcategories == b.subcategories;
}

enum class ViewKind { ground, aerial, wearable };

struct ViewEntry {
  int id = 0;
  std::string word;
  ViewKind kind = ViewKind::ground;
  bool operator==(const ViewEntry&) const = default;
};

inline ViewKind infer_view_kind(const std::string& word) {
  if (word == "UAV" || word == "aerial" || word == "drone") return ViewKind::aerial;
  if (word == "wearable") return ViewKind::wearable;
  return ViewKind::ground;
}

class ViewRegistry {
 public:
  ViewRegistry() = default;
  explicit ViewRegistry(std::vector<ViewEntry> views) : views_(std::move(views)) {
    for (size_t i = 0; i < views_.size(); ++i) {
      if (views_[i].id != static_cast<int>(i)) throw ConfigError("view ids must be contiguous from 0");
      if (views_[i].word.empty()) throw ConfigError("view word must be non-empty");
      for (size_t j = 0; j < i; ++j)
        if (views_[j].word == views_[i].word) throw ConfigError("duplicate view word '" + views_[i].word + "'");
    }
  }

  int size() const { return static_cast<int>(views_.size()); }
  bool valid(int id) const { return id >= 0 && id < size(); }
  const ViewEntry& at(int id) const {
    if (!valid(id)) throw UnknownView("unknown view id " + std::to_string(id));
    return views_[static_cast<size_t>(id)];
  }
  int find_word(const std::string& word) const {
    for (const auto& v : views_)
      if (v.word == word) return v.id;
    return -1;
  }
  std::vector<int> of_kind(ViewKind kind) const {
    std::vector<int> out;
    for (const auto& v : views_)
      if (v.kind == kind) out.push_back(v.id);
    return out;
  }
  const std::vector<ViewEntry>& views() const { return views_; }
  bool operator==(const ViewRegistry&) const = default;

 private:
  std::vector<ViewEntry> views_;
};

/// Five categories whose values the synthetic renderer paints into fixed body
/// regions.
inline AttributeSchema default_schema() {
  return AttributeSchema({{"upper_color", {"red", "green", "blue", "yellow"}},
                          {"lower_color", {"black", "white", "navy", "brown"}},
                          {"hair", {"dark", "blond", "red"}},
                          {"build", {"slim", "broad"}},
                          {"backpack", {"no", "yes"}}});
}

inline ViewRegistry default_views() {
  return ViewRegistry({{0, "CCTV", ViewKind::ground}, {1, "UAV", ViewKind::aerial}});
}

inline Json to_json(const AttributeSchema& s) {
  Json cats = Json::array();
  for (const auto& c : s.categories()) cats.push_back({{"name", c.name}, {"subcategories", c.subcategories}});
  return {{"categories", cats}};
}

inline AttributeSchema schema_from_json(const Json& j) {
  std::vector<AttributeCategory> cats;
  for (const auto& c : j.at("categories"))
    cats.push_back({c.at("name").get<std::string>(), c.at("subcategories").get<std::vector<std::string>>()});
  return AttributeSchema(std::move(cats));
}

inline std::string to_string(ViewKind k) {
  switch (k) {
    case ViewKind::aerial: return "aerial";
    case ViewKind::wearable: return "wearable";
    default: return "ground";
  }
}

inline Json to_json(const ViewRegistry& r) {
  Json arr = Json::array();
  for (const auto& v : r.views()) arr.push_back({{"id", v.id}, {"word", v.word}, {"kind", to_string(v.kind)}});
  return arr;
}

inline ViewRegistry views_from_json(const Json& j) {
  std::vector<ViewEntry> out;
  for (const auto& v : j) {
    ViewEntry e;
    e.id = v.at("id").get<int>();
    e.word = v.at("word").get<std::string>();
    if (v.contains("kind")) {
      const auto k = v.at("kind").get<std::string>();
      e.kind = k == "aerial" ? ViewKind::aerial : k == "wearable" ? ViewKind::wearable : ViewKind::ground;
    } else {
      e.kind = infer_view_kind(e.word);
    }
    out.push_back(std::move(e));
  }
  return ViewRegistry(std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset atom

struct PersonSample {
  Image image;
  std::string image_path;  // as written in the manifest
  int identity = 0;
  int view_id = 0;
  int camera_id = 0;
  std::optional<std::vector<int>> attributes;
};

// ---------------------------------------------------------------------------
// Model configuration

enum class TuneMode { prompt_tune, full_ft };
enum class AttributeMode { supervised, pseudo };
enum class Metric { cosine, euclidean };

/// Fixed words in the sentence layout: "a", "view", "photo", "of", "a", "person".
inline constexpr int kTemplateLiterals = 6;
/// BOS and EOS.
inline constexpr int kTemplateControls = 2;

struct ModelConfig {
  int image_height = 64;
  int image_width = 32;
  int patch_size = 8;
  int C_v = 32;
  int C = 32;
  int L = 3;
  int heads = 4;
  int T = 5;
  int T_hat = 9;
  int K = 8;
  int C_t = 32;
  int L_t = 2;
  int context_len = 40;
  TuneMode mode = TuneMode::prompt_tune;
  AttributeMode attribute_mode = AttributeMode::supervised;
  double label_smoothing = 0.1;
  double triplet_margin = 0.3;
  double lambda1 = 0.25;
  double lambda2 = 1.0;
  Metric metric = Metric::cosine;
  // Branch switches used by the ablation presets.
  bool use_pacg = true;
  bool use_cpt = true;
  bool use_view_token = true;
  bool gt_attributes = false;

  int num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
  int sentence_length() const {
    return kTemplateLiterals + kTemplateControls + (use_view_token ? 1 : 0) + K + T;
  }
  /// Text-tower head count: the largest divisor of C_t not above `heads`
  /// (768/12 image heads pair with 512/8 text heads at full scale).
  int text_heads() const {
    int h = std::max(1, std::min(heads, C_t));
    while (h > 1 && C_t % h != 0) --h;
    return h;
  }
};

/// CLIP-Base-16 scale with the 15-attribute label space.
inline ModelConfig paper_scale_config() {
  ModelConfig c;
  c.image_height = 256;
  c.image_width = 128;
  c.patch_size = 16;
  c.C_v = 768;
  c.C = 512;
  c.L = 12;
  c.heads = 12;
  c.T = 15;
  c.T_hat = 19;
  c.K = 8;
  c.C_t = 512;
  c.L_t = 12;
  c.context_len = 77;
  return c;
}

/// Every violated invariant, in a stable order. Empty means ok.
inline std::vector<std::string> validate_config(const ModelConfig& c) {
  std::vector<std::string> errors;
  if (c.patch_size <= 0) {
    errors.push_back("patch_size must be positive");
  } else {
    if (c.image_height <= 0 || c.image_height % c.patch_size != 0) errors.push_back("H not divisible by patch");
    if (c.image_width <= 0 || c.image_width % c.patch_size != 0) errors.push_back("W not divisible by patch");
  }
  if (c.T < 1) errors.push_back("T < 1");
  if (c.T_hat < c.T) errors.push_back("T_hat < T");
  if (c.K < 0) errors.push_back("K < 0");
  if (c.L < 1) errors.push_back("L < 1");
  if (c.L_t < 1) errors.push_back("L_t < 1");
  if (c.C_v < 1 || c.C < 1 || c.C_t < 1) errors.push_back("widths must be positive");
  if (c.heads < 1) {
    errors.push_back("heads < 1");
  } else {
    if (c.C_v % c.heads != 0) errors.push_back("C_v not divisible by heads");
  }
  if (c.context_len < kTemplateLiterals + 1 + c.K + c.T + kTemplateControls)
    errors.push_back("context_len too small for sentence template");
  if (c.lambda1 < 0) errors.push_back("lambda1 < 0");
  if (c.lambda2 < 0) errors.push_back("lambda2 < 0");
  if (c.label_smoothing < 0 || c.label_smoothing >= 1) errors.push_back("label_smoothing outside [0,1)");
  if (c.triplet_margin < 0) errors.push_back("triplet_margin < 0");
  if (c.gt_attributes && c.attribute_mode == AttributeMode::pseudo)
    errors.push_back("gt_attributes requires SUPERVISED attribute_mode");
  return errors;
}

inline Json to_json(const ModelConfig& c) {
  return {{"image_size", {c.image_height, c.image_width}},
          {"patch_size", c.patch_size},
          {"C_v", c.C_v},
          {"C", c.C},
          {"L", c.L},
          {"heads", c.heads},
          {"T", c.T},
          {"T_hat", c.T_hat},
          {"K", c.K},
          {"C_t", c.C_t},
          {"L_t", c.L_t},
          {"context_len", c.context_len},
          {"mode", c.mode == TuneMode::prompt_tune ? "PROMPT_TUNE" : "FULL_FT"},
          {"attribute_mode", c.attribute_mode == AttributeMode::supervised ? "SUPERVISED" : "PSEUDO"},
          {"label_smoothing", c.label_smoothing},
          {"triplet_margin", c.triplet_margin},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"metric", c.metric == Metric::cosine ? "cosine" : "euclidean"},
          {"use_pacg", c.use_pacg},
          {"use_cpt", c.use_cpt},
          {"use_view_token", c.use_view_token},
          {"gt_attributes", c.gt_attributes}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  static const std::vector<std::string> known = {
      "image_size", "patch_size",      "C_v",            "C",       "L",       "heads",  "T",
      "T_hat",      "K",               "C_t",            "L_t",     "context_len", "mode", "attribute_mode",
      "label_smoothing", "triplet_margin", "lambda1",    "lambda2", "metric",  "use_pacg", "use_cpt",
      "use_view_token",  "gt_attributes"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown model field '" + key + "'");
  try {
    if (j.contains("image_size")) {
      c.image_height = j["image_size"].at(0).get<int>();
      c.image_width = j["image_size"].at(1).get<int>();
    }
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
    };
    get("patch_size", c.patch_size);
    get("C_v", c.C_v);
    get("C", c.C);
    get("L", c.L);
    get("heads", c.heads);
    get("T", c.T);
    get("T_hat", c.T_hat);
    get("K", c.K);
    get("C_t", c.C_t);
    get("L_t", c.L_t);
    get("context_len", c.context_len);
    get("label_smoothing", c.label_smoothing);
    get("triplet_margin", c.triplet_margin);
    get("lambda1", c.lambda1);
    get("lambda2", c.lambda2);
    get("use_pacg", c.use_pacg);
    get("use_cpt", c.use_cpt);
    get("use_view_token", c.use_view_token);
    get("gt_attributes", c.gt_attributes);
    if (j.contains("mode")) {
      const auto m = j["mode"].get<std::string>();
      if (m == "PROMPT_TUNE") c.mode = TuneMode::prompt_tune;
      else if (m == "FULL_FT") c.mode = TuneMode::full_ft;
      else throw ConfigError("unknown mode '" + m + "'");
    }
    if (j.contains("attribute_mode")) {
      const auto m = j["attribute_mode"].get<std::string>();
      if (m == "SUPERVISED") c.attribute_mode = AttributeMode::supervised;
      else if (m == "PSEUDO") c.attribute_mode = AttributeMode::pseudo;
      else throw ConfigError("unknown attribute_mode '" + m + "'");
    }
    if (j.contains("metric")) {
      const auto m = j["metric"].get<std::string>();
      if (m == "cosine") c.metric = Metric::cosine;
      else if (m == "euclidean") c.metric = Metric::euclidean;
      else throw ConfigError("unknown metric '" + m + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return c;
}

inline std::string config_hash(const ModelConfig& c) {
  std::ostringstream os;
  os << std::hex << fnv1a(to_json(c).dump());
  return os.str();
}

/// Applies "--a.b.c value" style overrides to a JSON document. The value is
/// parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(Json& doc, const std::string& dotted, const std::string& raw) {
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;
  }
  Json* at = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override path");
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!at->is_object()) throw ConfigError("override path '" + dotted + "' crosses a non-object");
    at = &(*at)[parts[i]];
    if (at->is_null()) *at = Json::object();
  }
  (*at)[parts.back()] = value;
}

// ---------------------------------------------------------------------------
// Parameter storage

enum class Tag { backbone, prompt, head, text_backbone, text_prompt };

inline std::string to_string(Tag t) {
  switch (t) {
    case Tag::backbone: return "backbone";
    case Tag::prompt: return "prompt";
    case Tag::head: return "head";
    case Tag::text_backbone: return "text_backbone";
    case Tag::text_prompt: return "text_prompt";
  }
  return "?";
}

inline Tag tag_from_string(const std::string& s) {
  if (s == "backbone") return Tag::backbone;
  if (s == "prompt") return Tag::prompt;
  if (s == "head") return Tag::head;
  if (s == "text_backbone") return Tag::text_backbone;
  if (s == "text_prompt") return Tag::text_prompt;
  throw ConfigError("unknown parameter tag '" + s + "'");
}

/// Trainability is decided by tag alone.
inline bool is_trainable(Tag t, TuneMode mode) {
  if (mode == TuneMode::full_ft) return true;
  return t == Tag::prompt || t == Tag::head || t == Tag::text_prompt;
}

struct Parameter {
  std::string name;
  Tag tag;
  ad::Var var;
};

/// Named arrays with trainability tags. Copies are deep.
class ParameterStore {
 public:
  struct Metadata {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
  };

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) : meta(other.meta), index_(other.index_) {
    params_.reserve(other.params_.size());
    for (const auto& p : other.params_)
      params_.push_back({p.name, p.tag, ad::leaf(p.var.value(), p.var.requires_grad())});
  }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this != &other) {
      ParameterStore tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Metadata meta;

  void add(const std::string& name, Tag tag, Matrix init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back({name, tag, ad::leaf(std::move(init), true)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }
  ad::Var var(const std::string& name) const { return at(name).var; }
  Matrix& value(const std::string& name) { return at(name).var.mutable_value(); }
  const std::vector<Parameter>& params() const { return params_; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }
  std::size_t element_count(Tag tag) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.tag == tag) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }

  /// Marks exactly the arrays trainable under `mode` as requiring gradients.
  void set_mode(TuneMode mode) {
    for (auto& p : params_) p.var.set_requires_grad(is_trainable(p.tag, mode));
  }
  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Manifest I/O (line-delimited JSON)

inline std::vector<PersonSample> load_manifest(const std::filesystem::path& path, const AttributeSchema& schema,
                                               const ViewRegistry& views, bool load_images = true) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<PersonSample> out;
  std::string text;
  long line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json rec;
    try {
      rec = Json::parse(text);
    } catch (const Json::exception& e) {
      throw MalformedRecord(std::string("invalid JSON: ") + e.what(), line_no);
    }
    PersonSample s;
    try {
      if (!rec.is_object()) throw MalformedRecord("record is not an object", line_no);
      s.image_path = rec.at("image_path").get<std::string>();
      s.identity = rec.at("id").get<int>();
      if (s.identity < 0) throw MalformedRecord("negative id", line_no);
      const Json& v = rec.at("view");
      if (v.is_string()) {
        s.view_id = views.find_word(v.get<std::string>());
        if (s.view_id < 0) throw UnknownView("unknown view '" + v.get<std::string>() + "'", line_no);
      } else {
        s.view_id = v.get<int>();
        if (!views.valid(s.view_id)) throw UnknownView("unknown view id " + std::to_string(s.view_id), line_no);
      }
      s.camera_id = rec.at("camera").get<int>();
      const Json& a = rec.contains("attributes") ? rec["attributes"] : Json();
      if (!a.is_null()) {
        auto labels = a.get<std::vector<int>>();
        if (static_cast<int>(labels.size()) != schema.size())
          throw AttributeOutOfRange("expected " + std::to_string(schema.size()) + " attributes", line_no);
        if (!schema.valid_labels(labels)) throw AttributeOutOfRange("attribute label out of range", line_no);
        s.attributes = std::move(labels);
      }
    } catch (const Json::exception& e) {
      throw MalformedRecord(std::string("bad field: ") + e.what(), line_no);
    }
    if (load_images) {
      try {
        s.image = read_png(base / s.image_path);
      } catch (const ImageIoError& e) {
        throw DataError(e.what(), line_no);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string manifest_line(const PersonSample& s) {
  OrderedJson rec;
  rec["image_path"] = s.image_path;
  rec["id"] = s.identity;
  rec["view"] = s.view_id;
  rec["camera"] = s.camera_id;
  rec["attributes"] = s.attributes ? OrderedJson(*s.attributes) : OrderedJson(nullptr);
  return rec.dump();
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<PersonSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& s : samples) out << manifest_line(s) << '\n';
}

}  // namespace agreid
