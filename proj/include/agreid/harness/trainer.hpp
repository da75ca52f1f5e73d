#pragma once

// Training loop and evaluation driver.

#include "agreid/harness/augment.hpp"
#include "agreid/harness/checkpoint.hpp"
#include "agreid/harness/presets.hpp"
#include "agreid/harness/sampler.hpp"
#include "agreid/harness/schedule.hpp"
#include "agreid/synthgen.hpp"

#include <functional>
#include <ostream>

namespace agreid::harness {

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0;
  objective::LossBreakdown loss;
};

inline Json to_json(const StepRecord& r) {
  Json j = objective::to_json(r.loss);
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  return j;
}

struct TrainOptions {
  /// Receives checkpoint.agr and train_log.jsonl when set.
  std::filesystem::path out_dir;
  /// Stop before this global step (exclusive); negative runs to the end.
  std::int64_t stop_at = -1;
  std::function<void(const StepRecord&)> on_step;
  std::ostream* progress = nullptr;
};

struct ParameterReport {
  std::size_t prompt_tune = 0;
  std::size_t full_ft = 0;
  std::size_t total = 0;
};

inline ParameterReport parameter_report(const Model& m) {
  const auto l = model_layout(m.cfg, m.schema, m.views, m.num_identities);
  return {aie::trainable_count(l, TuneMode::prompt_tune), aie::trainable_count(l, TuneMode::full_ft),
          nn::element_count(l)};
}

inline Json to_json(const ParameterReport& r) {
  return {{"prompt_tune_trainable", r.prompt_tune}, {"full_ft_trainable", r.full_ft}, {"total", r.total}};
}

/// Sorted distinct identities; a sample's training label is its index here.
inline std::vector<int> identity_map(const std::vector<PersonSample>& data) {
  std::vector<int> ids;
  for (const auto& s : data) ids.push_back(s.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

inline void check_training_data(const ModelConfig& cfg, const AttributeSchema& schema,
                                const std::vector<PersonSample>& data) {
  if (data.empty()) throw DataError("empty training set");
  const bool need_attributes = cfg.attribute_mode == AttributeMode::supervised && (cfg.use_pacg || cfg.gt_attributes);
  for (const auto& s : data) {
    if (s.image.height != cfg.image_height || s.image.width != cfg.image_width)
      throw DataError("image " + s.image_path + " does not match the configured size");
    if (need_attributes && !s.attributes) throw DataError("sample " + s.image_path + " has no attribute labels");
    if (s.attributes && !schema.valid_labels(*s.attributes)) throw AttributeOutOfRange("bad labels in " + s.image_path);
  }
}

/// Fresh training state: model initialized from train.seed, step 0.
inline Checkpoint init_training(const ModelConfig& cfg, const TrainConfig& train, const AttributeSchema& schema,
                                const ViewRegistry& views, const std::vector<PersonSample>& data) {
  auto errors = validate(train);
  if (!errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errors) msg += " [" + e + "]";
    throw ConfigError(msg);
  }
  check_training_data(cfg, schema, data);
  Checkpoint c;
  c.train = train;
  c.identity_map = identity_map(data);
  c.model = make_model(cfg, schema, views, static_cast<int>(c.identity_map.size()), train.seed);
  c.model.params.meta.seed = train.seed;
  return c;
}

/// One optimization step on the given sample indices; returns the loss before
/// the update.
inline objective::LossBreakdown train_step(Checkpoint& c, const std::vector<PersonSample>& data,
                                           const std::vector<int>& batch, double lr, std::int64_t step) {
  Model& m = c.model;
  std::vector<Image> images;
  std::vector<const Image*> ptrs;
  std::vector<int> views;
  std::vector<int> labels;
  std::vector<std::vector<int>> attrs;
  images.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const PersonSample& s = data[static_cast<size_t>(batch[i])];
    std::mt19937_64 rng(derive_seed(c.train.seed, "augment", step, static_cast<std::int64_t>(i)));
    images.push_back(augment(s.image, c.train.augment, rng));
    views.push_back(s.view_id);
    const auto it = std::lower_bound(c.identity_map.begin(), c.identity_map.end(), s.identity);
    if (it == c.identity_map.end() || *it != s.identity)
      throw DataError("identity " + std::to_string(s.identity) + " was not seen when training started");
    labels.push_back(static_cast<int>(it - c.identity_map.begin()));
    if (s.attributes) attrs.push_back(*s.attributes);
  }
  for (const auto& img : images) ptrs.push_back(&img);
  const bool have_attrs = attrs.size() == batch.size();

  const auto f = forward(m, ptrs, views, have_attrs ? &attrs : nullptr);
  auto [loss, breakdown] = batch_loss(m, f, labels, have_attrs ? &attrs : nullptr);
  if (!std::isfinite(breakdown.total)) throw NumericError("non-finite loss at step " + std::to_string(step));
  m.params.zero_grad();
  ad::backward(loss);
  adam_step(aie::trainable_parameters(m.params, m.cfg.mode, c.train.backbone_lr / c.train.base_lr), lr, c.train,
            c.adam);
  return breakdown;
}

inline std::int64_t steps_per_epoch(const Checkpoint& c) {
  return batches_per_epoch(c.identity_map.size(), c.train.P);
}

inline std::int64_t total_steps(const Checkpoint& c) { return c.train.epochs * steps_per_epoch(c); }

/// Continues training from `c.step`. The loss log is appended; checkpoints
/// are written atomically at the end of every `checkpoint_every`-th epoch and
/// at the end, so a numeric abort leaves the previous one in place.
inline void run_training(Checkpoint& c, const std::vector<PersonSample>& data, const TrainOptions& opts = {}) {
  check_training_data(c.model.cfg, c.model.schema, data);
  if (identity_map(data) != c.identity_map) throw DataError("training identities differ from the checkpoint");
  const auto groups = group_by_identity(data);
  const std::int64_t spe = steps_per_epoch(c);
  const std::int64_t end = opts.stop_at >= 0 ? std::min(opts.stop_at, total_steps(c)) : total_steps(c);

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "train_log.jsonl", c.step == 0 ? std::ios::trunc : std::ios::app);
  }
  auto save = [&] {
    if (!opts.out_dir.empty()) save_checkpoint(opts.out_dir / "checkpoint.agr", c);
  };

  std::int64_t cached_epoch = -1;
  std::vector<std::vector<int>> batches;
  double epoch_loss = 0;
  while (c.step < end) {
    const std::int64_t epoch = c.step / spe;
    if (epoch != cached_epoch) {
      batches = pk_sample(groups, c.train.P, c.train.K_inst, c.train.seed, epoch);
      cached_epoch = epoch;
      epoch_loss = 0;
    }
    const double lr = lr_at(c.step, c.train, spe);
    StepRecord rec{c.step, epoch, lr, train_step(c, data, batches[static_cast<size_t>(c.step % spe)], lr, c.step)};
    epoch_loss += rec.loss.total;
    if (log.is_open()) log << to_json(rec).dump() << '\n';
    if (opts.on_step) opts.on_step(rec);
    ++c.step;
    c.model.params.meta.step = c.step;
    if (c.step % spe == 0) {
      const std::int64_t done = c.step / spe;
      c.metrics["epoch"] = done;
      c.metrics["mean_epoch_loss"] = epoch_loss / static_cast<double>(spe);
      if (opts.progress)
        *opts.progress << "epoch " << done << "/" << c.train.epochs << " loss " << epoch_loss / spe << " lr " << lr
                       << std::endl;
      if (c.train.checkpoint_every > 0 && done % c.train.checkpoint_every == 0 && c.step != end) save();
    }
  }
  if (log.is_open()) log.flush();
  save();
}

inline Checkpoint train(const ModelConfig& cfg, const TrainConfig& train_cfg, const AttributeSchema& schema,
                        const ViewRegistry& views, const std::vector<PersonSample>& data,
                        const TrainOptions& opts = {}) {
  Checkpoint c = init_training(cfg, train_cfg, schema, views, data);
  run_training(c, data, opts);
  return c;
}

/// Loads a checkpoint for resumption. When `expected` is given its hash must
/// match the stored model configuration.
inline Checkpoint resume(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  Checkpoint c = load_checkpoint(path);
  if (expected && config_hash(*expected) != c.model.params.meta.config_hash)
    throw ConfigError("config hash mismatch: checkpoint was trained with a different model config");
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ProtocolData {
  std::string name;
  std::vector<PersonSample> query;
  std::vector<PersonSample> gallery;
};

/// Encodes both sides without augmentation and scores the ranking. Attribute
/// accuracy covers every labelled query and gallery sample when the model
/// predicts attributes.
inline eval::MetricsReport evaluate(const Model& m, const ProtocolData& p, int max_rank = 20,
                                    bool exclude_same_camera = false) {
  if (p.query.empty() || p.gallery.empty()) throw DataError("protocol " + p.name + " has an empty side");
  const Embeddings q = embed_samples(m, p.query);
  const Embeddings g = embed_samples(m, p.gallery);
  const auto problem = eval::make_problem(q.retrieval, g.retrieval, p.query, p.gallery, m.cfg.metric, exclude_same_camera);
  eval::MetricsReport r =
      eval::evaluate_ranking(problem, std::min(max_rank, static_cast<int>(p.gallery.size())));
  r.protocol = p.name;
  if (!q.attribute_predictions.empty()) {
    std::vector<std::vector<int>> pred, gt;
    auto collect = [&](const std::vector<PersonSample>& samples, const Embeddings& e) {
      for (size_t i = 0; i < samples.size(); ++i)
        if (samples[i].attributes) {
          pred.push_back(e.attribute_predictions[i]);
          gt.push_back(*samples[i].attributes);
        }
    };
    collect(p.query, q);
    collect(p.gallery, g);
    if (!gt.empty()) r.attribute_accuracy = eval::attribute_accuracy(pred, gt);
  }
  return r;
}

inline std::vector<ProtocolData> protocol_data(const synth::Dataset& ds) {
  std::vector<ProtocolData> out;
  for (const auto& p : ds.protocols) out.push_back({p.protocol.name, p.query, p.gallery});
  return out;
}

}  // namespace agreid::harness
