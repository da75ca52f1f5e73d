// Command-line front end: data generation, training, evaluation and export.

#include "agreid/agreid.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace agreid;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::vector<std::string> overrides;
};

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void apply_overrides(Json& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + o);
    apply_override(doc, o.substr(0, eq), o.substr(eq + 1));
  }
}

void claim_output(const fs::path& path, bool force) {
  if (path.empty()) throw ConfigError("--out is required");
  if (fs::exists(path) && !force) throw ConfigError(path.string() + " exists; pass --force to overwrite");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

/// Schema and views of a generated data directory, defaults otherwise.
std::pair<AttributeSchema, ViewRegistry> data_registry(const fs::path& data_dir) {
  const fs::path echo = data_dir / "genspec-echo.json";
  if (!fs::exists(echo)) return {default_schema(), default_views()};
  const auto spec = synth::genspec_from_json(read_json(echo));
  return {spec.schema, spec.views};
}

std::vector<std::string> protocol_names(const fs::path& data_dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(data_dir)) {
    const std::string f = e.path().filename().string();
    if (f.rfind("query_", 0) == 0 && e.path().extension() == ".jsonl") names.push_back(f.substr(6, f.size() - 12));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no query_*.jsonl manifests in " + data_dir.string());
  return names;
}

harness::ProtocolData load_protocol(const fs::path& data_dir, const std::string& name, const Model& m) {
  return {name, load_manifest(data_dir / ("query_" + name + ".jsonl"), m.schema, m.views),
          load_manifest(data_dir / ("gallery_" + name + ".jsonl"), m.schema, m.views)};
}

// ---------------------------------------------------------------------------

int generate_data(const Common& c) {
  Json doc = synth::to_json(synth::GenSpec{});
  if (!c.config.empty()) doc = read_json(c.config);
  apply_overrides(doc, c.overrides);
  if (c.seed) doc["seed"] = *c.seed;
  const auto spec = synth::genspec_from_json(doc);
  const fs::path out = c.out;
  claim_output(out, c.force);
  if (fs::exists(out)) fs::remove_all(out);
  const auto ds = synth::generate_dataset(spec);
  synth::write_dataset(ds, spec, out);
  std::cout << "wrote " << ds.train.size() << " training images and " << ds.protocols.size() << " protocols to "
            << out.string() << '\n';
  return kExitOk;
}

int train(const Common& c, const std::string& data_dir, const std::string& preset, const std::string& resume_from) {
  const fs::path out = c.out;
  auto [schema, views] = data_registry(data_dir);
  const auto data = load_manifest(fs::path(data_dir) / "train.jsonl", schema, views);

  if (!resume_from.empty()) {
    harness::Checkpoint ck = harness::load_checkpoint(resume_from);
    if (!c.config.empty() || !c.overrides.empty()) {
      Json doc = {{"model", to_json(ck.model.cfg)}, {"train", harness::to_json(ck.train)}};
      if (!c.config.empty()) doc.merge_patch(read_json(c.config));
      apply_overrides(doc, c.overrides);
      const ModelConfig expected = model_config_from_json(doc["model"]);
      if (config_hash(expected) != ck.model.params.meta.config_hash)
        throw ConfigError("config hash mismatch: checkpoint was trained with a different model config");
    }
    if (out.empty()) throw ConfigError("--out is required");
    fs::create_directories(out);
    std::cout << "resuming at step " << ck.step << '\n';
    harness::run_training(ck, data, {out, -1, {}, &std::cout});
    std::cout << "checkpoint: " << (out / "checkpoint.agr").string() << '\n';
    return kExitOk;
  }

  Json doc = {{"model", to_json(harness::ablation_preset(preset))}, {"train", harness::to_json(harness::TrainConfig{})}};
  doc["train"]["preset"] = preset;
  if (!c.config.empty()) doc.merge_patch(read_json(c.config));
  apply_overrides(doc, c.overrides);
  if (c.seed) doc["train"]["seed"] = *c.seed;
  const ModelConfig cfg = model_config_from_json(doc["model"]);
  const harness::TrainConfig tc = harness::train_config_from_json(doc["train"]);

  claim_output(out, c.force);
  if (fs::exists(out)) fs::remove_all(out);
  fs::create_directories(out);
  harness::Checkpoint ck = harness::init_training(cfg, tc, schema, views, data);
  const auto report = harness::parameter_report(ck.model);
  std::cout << "trainable parameters: PROMPT_TUNE " << report.prompt_tune << ", FULL_FT " << report.full_ft
            << " (mode " << (cfg.mode == TuneMode::prompt_tune ? "PROMPT_TUNE" : "FULL_FT") << ")\n";
  write_text(out / "config.json", Json{{"model", to_json(cfg)}, {"train", harness::to_json(tc)},
                                       {"parameters", harness::to_json(report)}}.dump(2) + "\n");
  harness::run_training(ck, data, {out, -1, {}, &std::cout});
  std::cout << "checkpoint: " << (out / "checkpoint.agr").string() << '\n';
  return kExitOk;
}

int evaluate(const Common& c, const std::string& checkpoint, const std::string& data_dir,
             std::vector<std::string> protocols, int max_rank) {
  const fs::path out = c.out;
  claim_output(out, c.force);
  const auto ck = harness::load_checkpoint(checkpoint);
  if (protocols.empty()) protocols = protocol_names(data_dir);
  Json report = {{"checkpoint_step", ck.step}, {"config_hash", ck.model.params.meta.config_hash},
                 {"protocols", Json::array()}};
  for (const auto& name : protocols) {
    const auto r = harness::evaluate(ck.model, load_protocol(data_dir, name, ck.model), max_rank);
    report["protocols"].push_back(eval::to_json(r));
    std::cout << name << ": Rank-1 " << (r.cmc.empty() ? 0.0 : r.cmc[0]) << " mAP " << r.mAP << '\n';
  }
  write_text(out, report.dump(2) + "\n");
  return kExitOk;
}

int retrieve(const Common& c, const std::string& checkpoint, const std::string& data_dir, const std::string& protocol,
             int top_k) {
  const fs::path out = c.out;
  claim_output(out, c.force);
  const auto ck = harness::load_checkpoint(checkpoint);
  const auto p = load_protocol(data_dir, protocol, ck.model);
  const auto q = embed_samples(ck.model, p.query);
  const auto g = embed_samples(ck.model, p.gallery);
  const auto problem = eval::make_problem(q.retrieval, g.retrieval, p.query, p.gallery, ck.model.cfg.metric);
  write_text(out, eval::rank_list_csv(problem, top_k));
  return kExitOk;
}

int predict_attributes(const Common& c, const std::string& checkpoint, const std::string& manifest) {
  const fs::path out = c.out;
  claim_output(out, c.force);
  const auto ck = harness::load_checkpoint(checkpoint);
  const Model& m = ck.model;
  if (!m.cfg.use_pacg || m.cfg.attribute_mode != AttributeMode::supervised)
    throw ConfigError("this checkpoint has no attribute classifiers");
  const auto samples = load_manifest(manifest, m.schema, m.views);
  const auto e = embed_samples(m, samples);
  OrderedJson list = OrderedJson::array();
  for (size_t i = 0; i < samples.size(); ++i) {
    OrderedJson rec;
    rec["image_path"] = samples[i].image_path;
    OrderedJson named = OrderedJson::object();
    for (int t = 0; t < m.schema.size(); ++t) {
      const int label = e.attribute_predictions[i][static_cast<size_t>(t)];
      named[m.schema.category(t).name] = m.schema.category(t).subcategories[static_cast<size_t>(label)];
    }
    rec["predicted"] = e.attribute_predictions[i];
    rec["named"] = named;
    if (samples[i].attributes) rec["ground_truth"] = *samples[i].attributes;
    list.push_back(rec);
  }
  write_text(out, list.dump(2) + "\n");
  return kExitOk;
}

int export_embeddings(const Common& c, const std::string& checkpoint, const std::string& manifest,
                      const std::string& which) {
  const fs::path out = c.out;
  claim_output(out, c.force);
  const auto ck = harness::load_checkpoint(checkpoint);
  const auto samples = load_manifest(manifest, ck.model.schema, ck.model.views);
  const auto e = embed_samples(ck.model, samples);
  const Matrix* feats = &e.retrieval;
  if (which == "visual") feats = &e.visual;
  else if (which == "text") {
    if (e.text.size() == 0) throw ConfigError("this checkpoint has no text branch");
    feats = &e.text;
  }
  std::ostringstream os;
  os.precision(17);
  os << "image_path,id,view,camera";
  for (Index j = 0; j < feats->cols(); ++j) os << ",f" << j;
  os << '\n';
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    os << s.image_path << ',' << s.identity << ',' << s.view_id << ',' << s.camera_id;
    for (Index j = 0; j < feats->cols(); ++j) os << ',' << (*feats)(static_cast<Index>(i), j);
    os << '\n';
  }
  write_text(out, os.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aerial-ground person re-identification toolkit"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON configuration file");
    sub->add_option("--seed", seed_value, "Random seed")->each([&](const std::string&) { common.seed = seed_value; });
    sub->add_option("--out", common.out, "Output path")->required();
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
    sub->add_option("--set", common.overrides, "Dotted-path override, e.g. train.epochs=20");
  };

  auto* gen = app.add_subcommand("generate-data", "Render a synthetic aerial-ground dataset");
  add_common(gen);

  std::string data_dir, preset = "C", resume_from, checkpoint, manifest, protocol, which = "retrieval";
  std::vector<std::string> protocols;
  int max_rank = 20, top_k = 10;

  auto* tr = app.add_subcommand("train", "Train a model on a data directory");
  add_common(tr);
  tr->add_option("--data", data_dir, "Data directory with train.jsonl")->required();
  tr->add_option("--preset", preset, "Ablation preset: A, B, C, no_view_token, gt_attributes, pseudo_attr");
  tr->add_option("--resume", resume_from, "Checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test protocols");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--protocol", protocols, "Protocol names (default: all in the data directory)");
  ev->add_option("--max-rank", max_rank);

  auto* rt = app.add_subcommand("retrieve", "Write the ranked gallery of every query as CSV");
  add_common(rt);
  rt->add_option("--checkpoint", checkpoint)->required();
  rt->add_option("--data", data_dir)->required();
  rt->add_option("--protocol", protocol)->required();
  rt->add_option("--top-k", top_k);

  auto* pa = app.add_subcommand("predict-attributes", "Predict attributes for every image of a manifest");
  add_common(pa);
  pa->add_option("--checkpoint", checkpoint)->required();
  pa->add_option("--manifest", manifest)->required();

  auto* ex = app.add_subcommand("export-embeddings", "Write features and labels of a manifest as CSV");
  add_common(ex);
  ex->add_option("--checkpoint", checkpoint)->required();
  ex->add_option("--manifest", manifest)->required();
  ex->add_option("--feature", which, "retrieval, visual or text")->check(CLI::IsMember({"retrieval", "visual", "text"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return generate_data(common);
    if (*tr) return train(common, data_dir, preset, resume_from);
    if (*ev) return evaluate(common, checkpoint, data_dir, protocols, max_rank);
    if (*rt) return retrieve(common, checkpoint, data_dir, protocol, top_k);
    if (*pa) return predict_attributes(common, checkpoint, manifest);
    if (*ex) return export_embeddings(common, checkpoint, manifest, which);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ImageIoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
