#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cadet/detector.hpp"
#include "cadet/nn.hpp"

namespace cadet {

// ---------------------------------------------------------------------------
// Object-type discriminator: embedding -> 128 -> 128 -> C logits, SiLU
// nonlinearity. Training-time only; never checkpointed with the detector.

struct DiscCache {
  nn::Tensor in, z1, a1, z2, a2, logits;
};

class Discriminator {
 public:
  Discriminator(std::string name, int in_dim, int num_classes, int hidden = 128);

  void init(nn::Rng& rng);
  nn::ParamRefs params();
  const nn::Tensor& forward(const nn::Tensor& embeddings, DiscCache& cache) const;
  // Backprop dlogits; returns d(loss)/d(embeddings). Parameter gradients are
  // only accumulated when param_grads is set - the freezing switch.
  nn::Tensor backward(const DiscCache& cache, const nn::Tensor& dlogits,
                      bool param_grads);

  int in_dim() const { return l1_.in_features; }
  int num_classes() const { return l3_.out_features; }

 private:
  nn::Linear l1_, l2_, l3_;
};

// ---------------------------------------------------------------------------
// Losses (the three-part objective's adversarial pieces)

// Mean categorical cross-entropy of discriminator logits against object-type
// labels. Zero rows -> 0.
double discriminator_loss(const nn::Tensor& logits, const std::vector<int>& labels,
                          nn::Tensor* dlogits = nullptr);

// Mean negative entropy -H(softmax(logits)), in [-ln C, 0]. Zero rows -> 0.
double entropy_penalty(const nn::Tensor& logits, nn::Tensor* dlogits = nullptr);

struct AdversarialConfig {
  double alpha = 0.1;  // weight on the negative-entropy term; 0 = ablation
  int disc_steps_per_model_step = 5;
  bool foreground_only = true;
  void validate() const;
};

enum class StepAction { kUpdateDiscriminator, kUpdateModel };

// Deterministic cycle: r discriminator updates, then one model update.
StepAction train_step_schedule(long long step_index, int disc_steps_per_model_step);

// ---------------------------------------------------------------------------
// Per-image step plan: target assignment plus every discrete selection the
// loss depends on (mined negatives, region proposals), frozen so the loss is
// smooth in the parameters given the plan.

struct StepPlan {
  TargetAssignment targets;       // over the flat anchor grid
  std::vector<int> neg_anchors;   // mined background anchors, flat indices
  // two-stage only:
  std::vector<BoundingBox> rois;  // top train proposals + ground-truth boxes
  TargetAssignment roi_targets;
};

// neg_ratio hard negatives per foreground (by background-class probability,
// ascending; stable). Requires cache filled by model.forward.
StepPlan plan_step(const DetectorModel& model, const ForwardCache& cache,
                   const std::vector<Annotation>& truths, int neg_ratio = 3);

struct LossBreakdown {
  double objectness = 0;  // cross-entropy terms
  double regression = 0;  // smooth L1 terms
  double entropy = 0;     // negative entropy, unweighted
  double total(double alpha) const {
    return objectness + regression + alpha * entropy;
  }
};

// Foreground embeddings for the discriminators under a plan: per attachment
// point (3 levels one-stage, 1 region head two-stage), row-major [K, D] with
// parallel type labels and, for one-stage, the source cells.
struct ForegroundEmbeddings {
  std::vector<nn::Tensor> rows;             // per attachment point
  std::vector<std::vector<int>> labels;     // type labels per row
  std::vector<std::vector<int>> cells;      // one-stage: cell index per row
  std::vector<std::vector<int>> roi_rows;   // two-stage: roi index per row
};

ForegroundEmbeddings foreground_embeddings(const DetectorModel& model,
                                           const ForwardCache& cache,
                                           const StepPlan& plan);

// The model-update loss for one image under a fixed plan. `cache` must hold
// forward(image) (plus the region branch over plan.rois for two-stage).
// Computes CE + smooth L1 + alpha * negative entropy; when accumulate_grads
// is set, backprops into the model with discriminator parameters frozen.
// discs may be null only when alpha == 0.
LossBreakdown model_loss(DetectorModel& model, std::vector<Discriminator>* discs,
                         const ForwardCache& cache, const StepPlan& plan,
                         double alpha, bool accumulate_grads);

// ---------------------------------------------------------------------------
// Trainer: plain SGD path and the alternating adversarial path.

struct TrainConfig {
  int steps = 100;  // global steps; each consumes one batch
  int batch_size = 4;
  double lr = 0.05;
  double momentum = 0.9;
  double disc_lr = 0.05;
  bool adversarial = false;
  bool disc_updates_enabled = true;  // off: schedule degenerates to model-only
  AdversarialConfig adv;
  int neg_ratio = 3;
  std::uint64_t seed = 1;
  std::string log_path;  // JSON-lines per step; empty disables
  void validate() const;
};

// Training data access; loading must be deterministic per image id.
struct TrainData {
  std::vector<ImageId> image_ids;
  std::function<ImageU8(ImageId)> load_image;
  std::function<std::vector<Annotation>(ImageId)> annotations;
};

struct TrainStats {
  long long model_updates = 0;
  long long disc_updates = 0;
  long long skipped_disc_updates = 0;  // batches with zero foreground
  std::vector<StepAction> actions;     // one per global step
};

class Trainer {
 public:
  Trainer(DetectorModel& model, const TrainConfig& config, TrainData data);

  TrainStats run();
  StepAction step();  // executes one global step, returns the action taken

  std::vector<Discriminator>& discriminators() { return discs_; }
  const TrainStats& stats() const { return stats_; }

 private:
  std::vector<ImageId> next_batch();
  void model_update(const std::vector<ImageId>& batch);
  void disc_update(const std::vector<ImageId>& batch);
  void log_line(StepAction action, const LossBreakdown& loss, double disc_loss,
                bool skipped);

  DetectorModel& model_;
  TrainConfig config_;
  TrainData data_;
  std::vector<Discriminator> discs_;
  nn::Sgd model_opt_;
  nn::Sgd disc_opt_;
  nn::Rng data_rng_;
  std::vector<ImageId> order_;
  size_t cursor_ = 0;
  long long global_step_ = 0;
  TrainStats stats_;
  std::unique_ptr<std::ofstream> log_;
};

}  // namespace cadet
