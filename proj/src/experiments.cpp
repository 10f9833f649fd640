#include "cadet/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <set>

#include <nlohmann/json.hpp>

#include "cadet/coco_io.hpp"
#include "cadet/errors.hpp"
#include "cadet/report_io.hpp"

namespace cadet {

namespace {

using json = nlohmann::ordered_json;

json parse_json_file(const std::string& path, bool config_error) {
  std::ifstream in(path);
  if (!in) {
    std::string msg = "cannot open " + path;
    if (config_error) throw ConfigError(msg);
    throw DataError(msg);
  }
  try {
    return json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    std::string msg = path + ": " + e.what();
    if (config_error) throw ConfigError(msg);
    throw DataError(msg);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Variants

Variant variant_from(const std::string& text) {
  if (text == "aware") return Variant::kAware;
  if (text == "agnostic") return Variant::kAgnostic;
  if (text == "ft-agnostic") return Variant::kFtAgnostic;
  if (text == "agnostic-adv") return Variant::kAgnosticAdv;
  if (text == "ft-agnostic-adv") return Variant::kFtAgnosticAdv;
  if (text == "aware-proposals") return Variant::kAwareProposals;
  throw ConfigError("unknown variant '" + text + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kAware: return "aware";
    case Variant::kAgnostic: return "agnostic";
    case Variant::kFtAgnostic: return "ft-agnostic";
    case Variant::kAgnosticAdv: return "agnostic-adv";
    case Variant::kFtAgnosticAdv: return "ft-agnostic-adv";
    case Variant::kAwareProposals: return "aware-proposals";
  }
  throw std::logic_error("bad variant");
}

bool variant_is_adversarial(Variant v) {
  return v == Variant::kAgnosticAdv || v == Variant::kFtAgnosticAdv;
}

bool variant_is_finetuned(Variant v) {
  return v == Variant::kFtAgnostic || v == Variant::kFtAgnosticAdv;
}

std::string variant_display_name(DetectorMode mode, Variant v) {
  std::string prefix = mode == DetectorMode::kOneStage ? "os-" : "ts-";
  switch (v) {
    case Variant::kAware: return prefix + "aw";
    case Variant::kAgnostic: return prefix + "ag";
    case Variant::kFtAgnostic: return prefix + "ag-ft";
    case Variant::kAgnosticAdv: return prefix + "ag-ad";
    case Variant::kFtAgnosticAdv: return prefix + "ag-ft-ad";
    case Variant::kAwareProposals: return prefix + "aw-prop";
  }
  throw std::logic_error("bad variant");
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (experiment != "I" && experiment != "II") {
    throw ConfigError("experiment must be 'I' or 'II', got '" + experiment + "'");
  }
  if (train_dataset.empty()) throw ConfigError("train_dataset is required");
  if (eval_dataset.empty()) throw ConfigError("eval_dataset is required");
  if (experiment == "I" && split_path.empty()) {
    throw ConfigError("experiment I needs a class split");
  }
  if (experiment == "II" && exclusion_path.empty()) {
    throw ConfigError("experiment II needs an exclusion artifact");
  }
  if (variant == Variant::kAwareProposals && mode != DetectorMode::kTwoStage) {
    throw ConfigError("aware-proposals is a two-stage variant");
  }
  if (variant_is_finetuned(variant) && aware_checkpoint.empty()) {
    throw ConfigError("finetuned variants need aware_checkpoint");
  }
  if (k_grid.empty()) throw ConfigError("k_grid is empty");
  for (size_t i = 0; i < k_grid.size(); ++i) {
    if (k_grid[i] <= 0 || (i > 0 && k_grid[i] <= k_grid[i - 1])) {
      throw ConfigError("k_grid must be positive and strictly increasing");
    }
  }
  if (image_size < 32) throw ConfigError("image_size must be >= 32");
  train.validate();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  json j = parse_json_file(path, /*config_error=*/true);
  ExperimentConfig config;
  try {
    static const std::set<std::string> known = {
        "experiment", "train_dataset", "eval_dataset", "cross_dataset",
        "variant",    "mode",          "split",        "exclusion",
        "aware_checkpoint", "k_grid",  "image_size",   "seed",
        "train",      "checkpoint_out", "report_out"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) {
        throw ConfigError(path + ": unknown key '" + key + "'");
      }
    }
    config.experiment = j.value("experiment", config.experiment);
    config.train_dataset = j.value("train_dataset", "");
    config.eval_dataset = j.value("eval_dataset", "");
    config.cross_dataset = j.value("cross_dataset", "");
    if (j.contains("variant")) {
      config.variant = variant_from(j["variant"].get<std::string>());
    }
    if (j.contains("mode")) {
      config.mode = detector_mode_from(j["mode"].get<std::string>());
    }
    config.split_path = j.value("split", "");
    config.exclusion_path = j.value("exclusion", "");
    config.aware_checkpoint = j.value("aware_checkpoint", "");
    if (j.contains("k_grid")) config.k_grid = j["k_grid"].get<std::vector<int>>();
    config.image_size = j.value("image_size", config.image_size);
    config.seed = j.value("seed", config.seed);
    config.checkpoint_out = j.value("checkpoint_out", "");
    config.report_out = j.value("report_out", "");

    if (j.contains("train")) {
      const json& t = j["train"];
      static const std::set<std::string> train_known = {
          "steps", "batch_size", "lr",       "momentum",  "disc_lr",
          "alpha", "disc_steps_per_model_step", "neg_ratio", "log_path"};
      for (const auto& [key, value] : t.items()) {
        if (!train_known.count(key)) {
          throw ConfigError(path + ": unknown key 'train." + key + "'");
        }
      }
      config.train.steps = t.value("steps", config.train.steps);
      config.train.batch_size = t.value("batch_size", config.train.batch_size);
      config.train.lr = t.value("lr", config.train.lr);
      config.train.momentum = t.value("momentum", config.train.momentum);
      config.train.disc_lr = t.value("disc_lr", config.train.disc_lr);
      config.train.adv.alpha = t.value("alpha", config.train.adv.alpha);
      config.train.adv.disc_steps_per_model_step =
          t.value("disc_steps_per_model_step",
                  config.train.adv.disc_steps_per_model_step);
      config.train.neg_ratio = t.value("neg_ratio", config.train.neg_ratio);
      config.train.log_path = t.value("log_path", "");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  config.train.adversarial = variant_is_adversarial(config.variant);
  config.train.seed = config.seed;
  config.validate();
  return config;
}

void save_exclusion(const ExclusionResult& result, const std::string& path) {
  json j;
  j["excluded"] = std::vector<std::string>(result.excluded.begin(),
                                           result.excluded.end());
  j["kept"] = std::vector<std::string>(result.kept.begin(), result.kept.end());
  j["warnings"] = result.warnings;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write exclusion " + path);
  out << j.dump(2) << "\n";
}

ExclusionResult load_exclusion(const std::string& path) {
  json j = parse_json_file(path, /*config_error=*/false);
  ExclusionResult result;
  try {
    for (const auto& name : j.at("excluded")) {
      result.excluded.insert(name.get<std::string>());
    }
    for (const auto& name : j.at("kept")) {
      result.kept.insert(name.get<std::string>());
    }
    if (j.contains("warnings")) {
      result.warnings = j["warnings"].get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Datasets

ImageU8 Dataset::load_image(ImageId id) const {
  const ImageInfo* info = index.find_image(id);
  if (!info) throw DataError("unknown image id " + std::to_string(id));
  return read_ppm(dir + "/" + info->locator);
}

Dataset open_dataset(const std::string& dir) {
  Dataset dataset;
  dataset.dir = dir;
  dataset.index = load_coco_json(dir + "/annotations.json");
  return dataset;
}

TrainData make_train_data(const Dataset& dataset,
                          const std::optional<std::set<int>>& keep_classes,
                          const std::map<int, int>& class_remap) {
  auto per_image = std::make_shared<std::map<ImageId, std::vector<Annotation>>>();
  for (const auto& ann : dataset.index.annotations) {
    if (keep_classes && !keep_classes->count(ann.class_id)) continue;
    Annotation kept = ann;
    auto it = class_remap.find(ann.class_id);
    if (it != class_remap.end()) kept.class_id = it->second;
    (*per_image)[ann.image_id].push_back(kept);
  }

  auto locators = std::make_shared<std::map<ImageId, std::string>>();
  TrainData data;
  for (const auto& info : dataset.index.images) {
    auto it = per_image->find(info.id);
    if (it == per_image->end() || it->second.empty()) continue;  // no objects left
    data.image_ids.push_back(info.id);
    (*locators)[info.id] = info.locator;
  }

  std::string dir = dataset.dir;
  data.load_image = [dir, locators](ImageId id) {
    auto it = locators->find(id);
    if (it == locators->end()) {
      throw DataError("image id " + std::to_string(id) + " not in training set");
    }
    return read_ppm(dir + "/" + it->second);
  };
  data.annotations = [per_image](ImageId id) -> std::vector<Annotation> {
    auto it = per_image->find(id);
    if (it == per_image->end()) return {};
    return it->second;
  };
  return data;
}

// ---------------------------------------------------------------------------
// Training and inference

namespace {

HeadType variant_head(Variant v) {
  return (v == Variant::kAware || v == Variant::kAwareProposals)
             ? HeadType::kClassAware
             : HeadType::kClassAgnostic;
}

}  // namespace

DetectorModel train_variant(const ExperimentConfig& config, const TrainData& data,
                            int type_classes) {
  DetectorConfig dcfg = make_detector_config(config.mode, variant_head(config.variant),
                                             type_classes, config.image_size);
  nn::Rng init_rng(nn::Rng::derive(config.seed, 1));

  auto build = [&]() -> DetectorModel {
    if (variant_is_finetuned(config.variant)) {
      DetectorModel aware = load_checkpoint(config.aware_checkpoint);
      if (aware.config().head_type != HeadType::kClassAware) {
        throw ConfigError("aware_checkpoint does not hold a class-aware model");
      }
      if (aware.config().mode != config.mode ||
          aware.config().image_size != config.image_size ||
          aware.config().num_type_classes != type_classes) {
        throw ConfigError("aware_checkpoint is incompatible with this run");
      }
      return finetune_from(aware, init_rng);
    }
    DetectorModel model(dcfg);
    model.init(init_rng);
    return model;
  };

  DetectorModel model = build();
  TrainConfig tc = config.train;
  tc.adversarial = variant_is_adversarial(config.variant);
  tc.seed = config.seed;
  Trainer trainer(model, tc, data);
  trainer.run();
  if (!config.checkpoint_out.empty()) save_checkpoint(model, config.checkpoint_out);
  return model;
}

std::map<ImageId, std::vector<Detection>> detect_all(
    const DetectorModel& model, const Dataset& dataset, int max_detections,
    bool proposals_only) {
  InferOptions opts;
  opts.max_detections = max_detections;
  opts.proposals_only = proposals_only;
  std::map<ImageId, std::vector<Detection>> out;
  for (const auto& info : dataset.index.images) {
    ImageU8 image = dataset.load_image(info.id);
    if (image.width != model.config().image_size ||
        image.height != model.config().image_size) {
      throw DataError("image " + std::to_string(info.id) +
                      " does not match the model input size");
    }
    out[info.id] = infer(model, image_to_tensor(image), info.id, opts);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runners

namespace {

// Mean over the component curves that actually had ground truth.
ARCurve macro_mean(const std::vector<ARCurve>& curves) {
  ARCurve mean;
  int live = 0;
  for (const auto& c : curves) {
    if (c.empty_truth_warning) continue;
    if (mean.k_values.empty()) {
      mean = c;
      std::fill(mean.recalls.begin(), mean.recalls.end(), 0.0);
    }
    for (size_t i = 0; i < c.recalls.size(); ++i) mean.recalls[i] += c.recalls[i];
    ++live;
  }
  if (live == 0) {
    if (!curves.empty()) mean = curves.front();
    mean.empty_truth_warning = true;
    std::fill(mean.recalls.begin(), mean.recalls.end(), 0.0);
    return mean;
  }
  for (double& r : mean.recalls) r /= live;
  return mean;
}

ARCurve class_curve(const std::map<ImageId, std::vector<Detection>>& preds,
                    const DatasetIndex& truths, const std::vector<int>& ks,
                    int class_id) {
  ARFilter filter;
  filter.class_ids = std::set<int>{class_id};
  return ar_at_k(preds, truths, ks, 0.5, filter);
}

void fill_per_size(EvalReport& report,
                   const std::map<ImageId, std::vector<Detection>>& preds,
                   const DatasetIndex& truths, const std::vector<int>& ks,
                   const std::optional<std::set<int>>& class_ids) {
  for (SizeBucket bucket : {SizeBucket::kSmall, SizeBucket::kMedium,
                            SizeBucket::kLarge}) {
    ARFilter filter;
    filter.size = bucket;
    filter.class_ids = class_ids;
    report.per_size[to_string(bucket)] = ar_at_k(preds, truths, ks, 0.5, filter);
  }
}

}  // namespace

EvalReport run_experiment_I(const ExperimentConfig& config) {
  config.validate();
  Dataset train_ds = open_dataset(config.train_dataset);
  Dataset eval_ds = open_dataset(config.eval_dataset);
  ClassSplit split = load_class_split(config.split_path);

  // Fail before any training when the split does not match the data.
  std::vector<std::string> all_names(split.seen.begin(), split.seen.end());
  for (const auto& name : split.unseen()) all_names.push_back(name);
  for (const auto& name : all_names) {
    if (!train_ds.index.vocabulary.find(name)) {
      throw ConfigError("split class '" + name + "' not in the train vocabulary");
    }
    if (!eval_ds.index.vocabulary.find(name)) {
      throw ConfigError("split class '" + name + "' not in the eval vocabulary");
    }
  }

  // Seen classes get dense train-time ids 0..S-1 in vocabulary order.
  std::set<int> keep;
  std::map<int, int> remap;
  for (int c = 0; c < train_ds.index.vocabulary.size(); ++c) {
    if (split.seen.count(train_ds.index.vocabulary.name(c))) {
      remap[c] = static_cast<int>(keep.size());
      keep.insert(c);
    }
  }
  TrainData data = make_train_data(train_ds, keep, remap);
  if (data.image_ids.empty()) throw DataError("no training images with seen objects");

  DetectorModel model = train_variant(config, data, static_cast<int>(keep.size()));

  int k_max = config.k_grid.back();
  bool proposals = config.variant == Variant::kAwareProposals;
  auto preds = detect_all(model, eval_ds, k_max, proposals);

  EvalReport report;
  report.model = variant_display_name(config.mode, config.variant);

  std::vector<ARCurve> seen_curves, unseen_curves;
  for (const auto& name : split.seen) {
    seen_curves.push_back(class_curve(preds, eval_ds.index, config.k_grid,
                                      eval_ds.index.vocabulary.require(name)));
  }
  for (const auto& name : split.unseen()) {
    ARCurve c = class_curve(preds, eval_ds.index, config.k_grid,
                            eval_ds.index.vocabulary.require(name));
    unseen_curves.push_back(c);
    report.per_class[name] = c;
  }
  report.macro_seen = macro_mean(seen_curves);
  report.macro_unseen = macro_mean(unseen_curves);
  report.harmonic = harmonic_mean(*report.macro_seen, *report.macro_unseen);
  fill_per_size(report, preds, eval_ds.index, config.k_grid, std::nullopt);

  if (!config.cross_dataset.empty()) {
    Dataset cross = open_dataset(config.cross_dataset);
    auto cross_preds = detect_all(model, cross, k_max, proposals);
    std::vector<ARCurve> cross_curves;
    for (int c = 0; c < cross.index.vocabulary.size(); ++c) {
      if (split.seen.count(cross.index.vocabulary.name(c))) continue;
      cross_curves.push_back(class_curve(cross_preds, cross.index,
                                         config.k_grid, c));
    }
    if (!cross_curves.empty()) {
      report.per_class["cross"] = macro_mean(cross_curves);
    }
  }

  if (!config.report_out.empty()) save_report(report, config.report_out);
  return report;
}

EvalReport run_experiment_II(const ExperimentConfig& config) {
  config.validate();
  Dataset train_ds = open_dataset(config.train_dataset);
  Dataset eval_ds = open_dataset(config.eval_dataset);
  ExclusionResult exclusion = load_exclusion(config.exclusion_path);

  // Training sees every source class; the exclusion constrains evaluation.
  TrainData data = make_train_data(train_ds, std::nullopt, {});
  if (data.image_ids.empty()) throw DataError("empty training set");

  std::set<int> kept_ids;
  for (const auto& name : exclusion.kept) {
    if (auto id = eval_ds.index.vocabulary.find(name)) kept_ids.insert(*id);
  }
  if (kept_ids.empty()) {
    throw DataError("exclusion leaves no evaluation classes");
  }

  DetectorModel model =
      train_variant(config, data, train_ds.index.vocabulary.size());

  int k_max = config.k_grid.back();
  bool proposals = config.variant == Variant::kAwareProposals;
  auto preds = detect_all(model, eval_ds, k_max, proposals);

  EvalReport report;
  report.model = variant_display_name(config.mode, config.variant);
  std::vector<ARCurve> curves;
  for (int c : kept_ids) {
    curves.push_back(class_curve(preds, eval_ds.index, config.k_grid, c));
  }
  report.macro_unseen = macro_mean(curves);
  fill_per_size(report, preds, eval_ds.index, config.k_grid, kept_ids);

  if (!config.report_out.empty()) save_report(report, config.report_out);
  return report;
}

// ---------------------------------------------------------------------------
// Probe

namespace {

// Foreground embedding rows pooled over attachment points, capped for time.
void collect_probe_rows(DetectorModel& model, const TrainData& data,
                        size_t max_rows, std::vector<std::vector<double>>& rows,
                        std::vector<int>& labels) {
  for (ImageId id : data.image_ids) {
    if (rows.size() >= max_rows) break;
    ImageU8 image = data.load_image(id);
    ForwardCache cache;
    model.forward(image_to_tensor(image), cache);
    StepPlan plan = plan_step(model, cache, data.annotations(id));
    if (model.config().mode == DetectorMode::kTwoStage && !plan.rois.empty()) {
      model.forward_roi(plan.rois, cache);
    }
    ForegroundEmbeddings fg = foreground_embeddings(model, cache, plan);
    for (size_t p = 0; p < fg.rows.size(); ++p) {
      const nn::Tensor& r = fg.rows[p];
      if (r.data.empty()) continue;
      int k = r.dim(0), d = r.dim(1);
      for (int i = 0; i < k && rows.size() < max_rows; ++i) {
        rows.emplace_back(r.data.begin() + static_cast<long>(i) * d,
                          r.data.begin() + static_cast<long>(i + 1) * d);
        labels.push_back(fg.labels[p][i]);
      }
    }
  }
}

nn::Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows,
                          const std::vector<int>& pick) {
  int d = static_cast<int>(rows.front().size());
  nn::Tensor t({static_cast<int>(pick.size()), d});
  for (size_t i = 0; i < pick.size(); ++i) {
    std::copy(rows[pick[i]].begin(), rows[pick[i]].end(),
              t.data.begin() + static_cast<long>(i) * d);
  }
  return t;
}

}  // namespace

double probe_type_accuracy(DetectorModel& model, const TrainData& train_rows,
                           const TrainData& eval_rows, int type_classes,
                           std::uint64_t seed, int steps) {
  constexpr size_t kMaxRows = 1024;
  std::vector<std::vector<double>> train_x, eval_x;
  std::vector<int> train_y, eval_y;
  collect_probe_rows(model, train_rows, kMaxRows, train_x, train_y);
  collect_probe_rows(model, eval_rows, kMaxRows, eval_x, eval_y);
  if (train_x.empty() || eval_x.empty()) {
    throw DataError("probe: no foreground embeddings");
  }

  int dim = static_cast<int>(train_x.front().size());
  Discriminator probe("probe", dim, type_classes);
  nn::Rng rng(nn::Rng::derive(seed, 5));
  probe.init(rng);
  nn::Sgd opt(0.1, 0.9);

  const int batch = static_cast<int>(std::min<size_t>(128, train_x.size()));
  for (int s = 0; s < steps; ++s) {
    std::vector<int> pick(batch);
    std::vector<int> labels(batch);
    for (int i = 0; i < batch; ++i) {
      pick[i] = rng.uniform_int(static_cast<int>(train_x.size()));
      labels[i] = train_y[pick[i]];
    }
    nn::Tensor x = rows_to_tensor(train_x, pick);
    DiscCache cache;
    const nn::Tensor& logits = probe.forward(x, cache);
    nn::Tensor dlogits;
    discriminator_loss(logits, labels, &dlogits);
    nn::Sgd::zero_grad(probe.params());
    probe.backward(cache, dlogits, /*param_grads=*/true);
    opt.step(probe.params());
  }

  std::vector<int> all(eval_x.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  nn::Tensor x = rows_to_tensor(eval_x, all);
  DiscCache cache;
  const nn::Tensor& logits = probe.forward(x, cache);
  int correct = 0;
  int n = logits.dim(0), c = logits.dim(1);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (logits.data[i * c + j] > logits.data[i * c + best]) best = j;
    }
    if (best == eval_y[i]) ++correct;
  }
  return static_cast<double>(correct) / n;
}

}  // namespace cadet
