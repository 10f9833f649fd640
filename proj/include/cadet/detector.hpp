#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cadet/geometry.hpp"
#include "cadet/image.hpp"
#include "cadet/nn.hpp"
#include "cadet/types.hpp"

namespace cadet {

// ---------------------------------------------------------------------------
// Anchors

struct LevelConfig {
  int stride = 8;
  std::vector<double> sizes;   // anchor side lengths, pixels
  std::vector<double> ratios;  // height/width, area-preserving
};

struct AnchorLevel {
  int stride = 0;
  int grid_w = 0;
  int grid_h = 0;
  int per_cell = 0;  // sizes x ratios
  std::vector<BoundingBox> anchors;  // cell-major (y, x), then size, then ratio
};

struct AnchorGrid {
  std::vector<AnchorLevel> levels;

  int total() const {
    int n = 0;
    for (const auto& l : levels) n += static_cast<int>(l.anchors.size());
    return n;
  }
  std::vector<BoundingBox> flat() const;
};

// Deterministic layout, centers at (i + 0.5) * stride. Strides must divide
// the image dimensions.
AnchorGrid generate_anchors(int image_w, int image_h,
                            const std::vector<LevelConfig>& levels);

// ---------------------------------------------------------------------------
// Box parameterization: (dcx/wa, dcy/ha, log(w/wa), log(h/ha))

using BoxOffsets = std::array<double, 4>;

BoxOffsets encode_box(const BoundingBox& anchor, const BoundingBox& truth);
BoundingBox decode_box(const BoundingBox& anchor, const BoxOffsets& offsets);

// ---------------------------------------------------------------------------
// Target assignment

struct TargetAssignment {
  std::vector<int> matched_truth;      // truth index, -1 if none
  std::vector<int> objectness;         // 1 foreground, 0 background, -1 ignored
  std::vector<BoxOffsets> regression;  // valid where objectness == 1
  std::vector<int> type_label;         // class id where objectness == 1, else -1
  int foreground = 0;
};

// Best-IoU matching with thresholds, plus the forced-match rule: every truth
// claims its single best anchor even below pos_iou. Crowd truths are skipped.
TargetAssignment assign_targets(const std::vector<BoundingBox>& anchors,
                                const std::vector<Annotation>& truths,
                                double pos_iou = 0.5, double neg_iou = 0.4);

// ---------------------------------------------------------------------------
// NMS: stable score-descending order, a kept box suppresses later boxes with
// IoU strictly above the threshold. Class-agnostic regardless of class ids.

std::vector<Detection> nms(const std::vector<Detection>& candidates,
                           double iou_threshold, int max_detections);

// ---------------------------------------------------------------------------
// Model

enum class DetectorMode { kOneStage, kTwoStage };
enum class HeadType { kClassAware, kClassAgnostic };

std::string to_string(DetectorMode mode);
std::string to_string(HeadType head);
DetectorMode detector_mode_from(const std::string& text);
HeadType head_type_from(const std::string& text);

struct DetectorConfig {
  DetectorMode mode = DetectorMode::kOneStage;
  HeadType head_type = HeadType::kClassAgnostic;
  int image_size = 128;
  int num_type_classes = 0;               // C, annotated training classes
  std::vector<int> channels = {12, 24, 32, 32, 32};  // five stride-2 blocks
  std::vector<LevelConfig> levels;        // feature levels, default 8/16/32
  int roi_size = 5;        // two-stage crop-and-pool grid
  int roi_embedding = 128; // two-stage region embedding width
  int train_proposals = 32;   // proposals fed to the region head per image
  int proposal_cap = 1000;    // inference-time proposal budget

  int cls_out() const {
    return head_type == HeadType::kClassAware ? num_type_classes + 1 : 2;
  }
  int feature_channels() const { return channels.back(); }
  void validate() const;  // throws ConfigError
};

DetectorConfig make_detector_config(DetectorMode mode, HeadType head,
                                    int num_type_classes, int image_size = 128);

// Activations retained for backward. One image per pass ([1,3,H,W] input);
// batching is done by the trainer via gradient accumulation.
struct ForwardCache {
  nn::Tensor input;
  std::vector<nn::Tensor> pre;   // block pre-activations z1..z5
  std::vector<nn::Tensor> act;   // block outputs a1..a5 (post SiLU)
  // Per level: one-stage final heads, or two-stage proposal heads.
  std::vector<nn::Tensor> cls_logits;  // [1, per_cell*K, h, w]
  std::vector<nn::Tensor> reg_out;     // [1, per_cell*4, h, w]
  // Two-stage region branch (rois are treated as constants).
  std::vector<BoundingBox> rois;
  nn::Tensor roi_pooled;   // [R, C*g*g]
  nn::Tensor roi_emb_pre;  // [R, E]
  nn::Tensor roi_emb;      // [R, E], the adversarial attachment point
  nn::Tensor roi_cls;      // [R, cls_out]
  nn::Tensor roi_reg;      // [R, 4]

  const nn::Tensor& level_feature(int level) const { return act[2 + level]; }
};

// Gradients flowing back into the head outputs; zero tensors mean "no loss
// touched this output". emb_* carry the discriminator path for one-stage mode
// (per-level foreground cells), droi_emb for two-stage mode.
struct HeadGrads {
  std::vector<nn::Tensor> dcls;
  std::vector<nn::Tensor> dreg;
  std::vector<std::vector<int>> emb_cells;  // per level, cell index y*w+x
  std::vector<nn::Tensor> demb;             // per level [K, C]
  nn::Tensor droi_cls;
  nn::Tensor droi_reg;
  nn::Tensor droi_emb;
};

class DetectorModel {
  // Declared before the layers: they are sized from the validated config.
  DetectorConfig config_;
  AnchorGrid anchors_;

 public:
  explicit DetectorModel(DetectorConfig cfg);

  void init(nn::Rng& rng);
  nn::ParamRefs params();
  std::vector<const nn::Param*> params() const;

  // Backbone plus per-anchor heads; two-stage heads are proposal heads.
  void forward(const nn::Tensor& image, ForwardCache& cache) const;
  // Region branch over fixed rois (two-stage only).
  void forward_roi(const std::vector<BoundingBox>& rois, ForwardCache& cache) const;
  void backward(const ForwardCache& cache, const HeadGrads& grads);

  // Decoded, scored, clipped per-anchor candidates (pre-NMS). For two-stage
  // these are the proposals.
  std::vector<Detection> candidates_from(const ForwardCache& cache,
                                         ImageId image_id,
                                         double score_threshold = 0.0) const;
  // Scored detections from the region branch of `cache` (two-stage).
  std::vector<Detection> roi_detections_from(const ForwardCache& cache,
                                             ImageId image_id,
                                             double score_threshold = 0.0) const;

  const AnchorGrid& anchors() const { return anchors_; }
  const DetectorConfig& config() const { return config_; }

  long long step = 0;

  // Layers are public: checkpoints and tests address them directly.
  nn::Conv2d b1, b2, b3, b4, b5;
  std::unique_ptr<nn::Conv2d> cls_head, reg_head;        // one-stage
  std::unique_ptr<nn::Conv2d> prop_cls, prop_reg;        // two-stage
  std::unique_ptr<nn::Linear> roi_fc, roi_cls, roi_reg;  // two-stage

 private:
  static DetectorConfig validated(DetectorConfig cfg);
};

struct InferOptions {
  int max_detections = 100;
  double score_threshold = 0.0;
  double iou_threshold = 0.5;
  bool proposals_only = false;  // two-stage: emit raw proposals
};

// Frozen-model inference: forward, decode, class-agnostic NMS, top-k by
// score. Never touches discriminators.
std::vector<Detection> infer(const DetectorModel& model, const nn::Tensor& image,
                             ImageId image_id, const InferOptions& opts = {});

nn::Tensor image_to_tensor(const ImageU8& image);  // [1,3,H,W], scaled to [0,1]

// Gather feature vectors at the given cells of a [1,C,h,w] map -> [K,C];
// scatter-add is its adjoint.
nn::Tensor gather_cells(const nn::Tensor& feat, const std::vector<int>& cells);
void scatter_cells_add(nn::Tensor& dfeat, const std::vector<int>& cells,
                       const nn::Tensor& demb);

// ---------------------------------------------------------------------------
// Checkpoints: self-describing JSON (config, step, named tensors). Exact
// double round-trip. Discriminators are never part of a checkpoint.

void save_checkpoint(const DetectorModel& model, const std::string& path);
DetectorModel load_checkpoint(const std::string& path);

// Class-agnostic model initialized from a class-aware one: every weight is
// copied except the classification head, which is freshly drawn from `rng`.
DetectorModel finetune_from(const DetectorModel& aware, nn::Rng& rng);

}  // namespace cadet
