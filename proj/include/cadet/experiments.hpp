#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cadet/adversarial.hpp"
#include "cadet/detector.hpp"
#include "cadet/metrics.hpp"
#include "cadet/protocol.hpp"

namespace cadet {

// Model variants following the detector-name taxonomy: class-aware baseline,
// class-agnostic from scratch, finetuned from an aware checkpoint, each with
// an optional adversarial flavor, plus the raw-proposal baseline.
enum class Variant {
  kAware,
  kAgnostic,
  kFtAgnostic,
  kAgnosticAdv,
  kFtAgnosticAdv,
  kAwareProposals,
};

Variant variant_from(const std::string& text);
std::string to_string(Variant v);
bool variant_is_adversarial(Variant v);
bool variant_is_finetuned(Variant v);
// Display name, e.g. "os-ag-ad", "ts-aw-prop".
std::string variant_display_name(DetectorMode mode, Variant v);

struct ExperimentConfig {
  std::string experiment = "I";  // "I" (split) or "II" (exclusion)
  std::string train_dataset;     // directory with annotations.json + images
  std::string eval_dataset;
  std::string cross_dataset;     // experiment I: optional second eval set
  Variant variant = Variant::kAgnostic;
  DetectorMode mode = DetectorMode::kOneStage;
  std::string split_path;        // experiment I class split
  std::string exclusion_path;    // experiment II exclusion artifact
  std::string aware_checkpoint;  // ft- variants start here
  std::vector<int> k_grid = kDefaultKGrid;
  int image_size = 128;
  std::uint64_t seed = 1;
  TrainConfig train;
  std::string checkpoint_out;
  std::string report_out;

  void validate() const;
};

// Single-document JSON config; unknown keys are rejected.
ExperimentConfig load_experiment_config(const std::string& path);

// Exclusion artifact produced by the hierarchy walk and consumed by
// experiment II runs.
void save_exclusion(const ExclusionResult& result, const std::string& path);
ExclusionResult load_exclusion(const std::string& path);

// On-disk dataset handle: COCO-style index plus lazy image loading.
struct Dataset {
  DatasetIndex index;
  std::string dir;
  ImageU8 load_image(ImageId id) const;
};

Dataset open_dataset(const std::string& dir);

// Training-set view after seen-filtering: annotation access is instrumented
// through the callbacks, which is where leak checks attach.
TrainData make_train_data(const Dataset& dataset,
                          const std::optional<std::set<int>>& keep_classes,
                          const std::map<int, int>& class_remap);

// Trains the configured variant and returns the model (checkpoint written
// when configured). `type_classes` is C for heads and discriminators; the
// train annotations must already be remapped to 0..C-1.
DetectorModel train_variant(const ExperimentConfig& config, const TrainData& data,
                            int type_classes);

// Inference over every image of a dataset; detections per image, capped at
// max_detections, proposals-only for the raw-proposal variant.
std::map<ImageId, std::vector<Detection>> detect_all(
    const DetectorModel& model, const Dataset& dataset, int max_detections,
    bool proposals_only = false);

EvalReport run_experiment_I(const ExperimentConfig& config);
EvalReport run_experiment_II(const ExperimentConfig& config);

// Type-classification accuracy of a fresh probe trained on the frozen model's
// foreground embeddings (train rows) and scored on eval rows. The adversarial
// invariant expects lower accuracy for adversarially trained models.
double probe_type_accuracy(DetectorModel& model, const TrainData& train_rows,
                           const TrainData& eval_rows, int type_classes,
                           std::uint64_t seed, int steps = 400);

}  // namespace cadet
