#pragma once

// Single-file archive: 8-byte magic, little-endian u64 header length, a JSON
// header, then every array as raw little-endian float64 in header order.
// See checkpoint.md.

#include "agreid/harness/optimizer.hpp"
#include "agreid/harness/train_config.hpp"
#include "agreid/model.hpp"

#include <cstring>
#include <fstream>

namespace agreid::harness {

inline constexpr char kCheckpointMagic[8] = {'A', 'G', 'R', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  Model model;
  TrainConfig train;
  std::vector<int> identity_map;  // training label -> dataset identity
  std::int64_t step = 0;
  Json metrics = Json::object();
  AdamState adam;
};

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated archive");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_array(std::ostream& os, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, m.data() + i, 8);
    write_u64(os, bits);
  }
}

inline Matrix read_array(std::istream& is, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    const std::uint64_t bits = read_u64(is);
    std::memcpy(m.data() + i, &bits, 8);
  }
  return m;
}

}  // namespace detail

struct NamedArray {
  std::string name;
  std::string tag;
  Matrix value;
};

/// Generic archive writer: header fields plus named arrays.
inline void write_archive(const std::filesystem::path& path, Json header, const std::vector<NamedArray>& arrays) {
  Json list = Json::array();
  for (const auto& a : arrays) list.push_back({{"name", a.name}, {"tag", a.tag}, {"rows", a.value.rows()}, {"cols", a.value.cols()}});
  header["arrays"] = list;
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write " + tmp);
    os.write(kCheckpointMagic, 8);
    detail::write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : arrays) detail::write_array(os, a.value);
    if (!os) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::pair<Json, std::vector<NamedArray>> read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open archive " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not an archive: " + path.string());
  const std::uint64_t len = detail::read_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("truncated archive header");
  Json header;
  try {
    header = Json::parse(text);
  } catch (const Json::exception& e) {
    throw DataError(std::string("bad archive header: ") + e.what());
  }
  std::vector<NamedArray> arrays;
  for (const auto& a : header.at("arrays"))
    arrays.push_back({a.at("name").get<std::string>(), a.at("tag").get<std::string>(),
                      detail::read_array(is, a.at("rows").get<Index>(), a.at("cols").get<Index>())});
  return {std::move(header), std::move(arrays)};
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const Model& m = c.model;
  Json header = {{"format", 1},
                 {"model", to_json(m.cfg)},
                 {"train", to_json(c.train)},
                 {"schema", to_json(m.schema)},
                 {"views", to_json(m.views)},
                 {"vocabulary", cpt::Vocabulary(m.views).to_json()},
                 {"num_identities", m.num_identities},
                 {"identity_map", c.identity_map},
                 {"step", c.step},
                 {"metrics", c.metrics},
                 {"config_hash", m.params.meta.config_hash},
                 {"seed", m.params.meta.seed},
                 {"adam_t", c.adam.t}};
  std::vector<NamedArray> arrays;
  for (const auto& p : m.params.params()) arrays.push_back({p.name, to_string(p.tag), p.var.value()});
  for (const auto& [name, mat] : c.adam.m) arrays.push_back({"adam.m." + name, "optimizer", mat});
  for (const auto& [name, mat] : c.adam.v) arrays.push_back({"adam.v." + name, "optimizer", mat});
  write_archive(path, std::move(header), arrays);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto [header, arrays] = read_archive(path);
  Checkpoint c;
  try {
    const ModelConfig cfg = model_config_from_json(header.at("model"));
    c.train = train_config_from_json(header.at("train"));
    c.model = make_model(cfg, schema_from_json(header.at("schema")), views_from_json(header.at("views")),
                         header.at("num_identities").get<int>(), header.at("seed").get<std::uint64_t>());
    c.identity_map = header.at("identity_map").get<std::vector<int>>();
    c.step = header.at("step").get<std::int64_t>();
    c.metrics = header.value("metrics", Json::object());
    c.adam.t = header.value("adam_t", std::int64_t{0});
    if (header.at("config_hash").get<std::string>() != c.model.params.meta.config_hash)
      throw DataError("checkpoint config hash does not match its model config");
  } catch (const Json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  std::size_t seen = 0;
  for (auto& a : arrays) {
    if (a.name.rfind("adam.m.", 0) == 0) {
      c.adam.m[a.name.substr(7)] = std::move(a.value);
    } else if (a.name.rfind("adam.v.", 0) == 0) {
      c.adam.v[a.name.substr(7)] = std::move(a.value);
    } else {
      if (!c.model.params.contains(a.name)) throw DataError("unexpected array " + a.name);
      Matrix& dst = c.model.params.value(a.name);
      if (dst.rows() != a.value.rows() || dst.cols() != a.value.cols()) throw DataError("shape mismatch for " + a.name);
      dst = std::move(a.value);
      ++seen;
    }
  }
  if (seen != c.model.params.params().size()) throw DataError("checkpoint is missing parameter arrays");
  c.model.params.meta.step = c.step;
  return c;
}

/// Copies arrays from a named-array archive into matching parameters.
/// `name_map` maps archive names to parameter names; unmapped names are used
/// as-is. A missing file loads nothing. Returns the number of arrays copied.
inline int load_pretrained(ParameterStore& ps, const std::filesystem::path& path,
                           const std::map<std::string, std::string>& name_map = {}) {
  if (!std::filesystem::exists(path)) return 0;
  auto arrays = read_archive(path).second;
  int copied = 0;
  for (auto& a : arrays) {
    auto it = name_map.find(a.name);
    const std::string& target = it == name_map.end() ? a.name : it->second;
    if (!ps.contains(target)) continue;
    Matrix& dst = ps.value(target);
    if (dst.rows() != a.value.rows() || dst.cols() != a.value.cols())
      throw DataError("pretrained array " + a.name + " has the wrong shape for " + target);
    dst = std::move(a.value);
    ++copied;
  }
  return copied;
}

}  // namespace agreid::harness
