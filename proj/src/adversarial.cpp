#include "cadet/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

using nn::Tensor;

// ---------------------------------------------------------------------------
// Discriminator

Discriminator::Discriminator(std::string name, int in_dim, int num_classes,
                             int hidden)
    : l1_(name + ".l1", in_dim, hidden),
      l2_(name + ".l2", hidden, hidden),
      l3_(name + ".l3", hidden, num_classes) {}

void Discriminator::init(nn::Rng& rng) {
  l1_.init(rng);
  l2_.init(rng);
  l3_.init(rng);
}

nn::ParamRefs Discriminator::params() {
  nn::ParamRefs refs;
  for (auto* p : l1_.params()) refs.push_back(p);
  for (auto* p : l2_.params()) refs.push_back(p);
  for (auto* p : l3_.params()) refs.push_back(p);
  return refs;
}

const Tensor& Discriminator::forward(const Tensor& embeddings,
                                     DiscCache& cache) const {
  cache.in = embeddings;
  cache.z1 = l1_.forward(cache.in);
  cache.a1 = nn::silu(cache.z1);
  cache.z2 = l2_.forward(cache.a1);
  cache.a2 = nn::silu(cache.z2);
  cache.logits = l3_.forward(cache.a2);
  return cache.logits;
}

Tensor Discriminator::backward(const DiscCache& cache, const Tensor& dlogits,
                               bool param_grads) {
  Tensor da2 = l3_.backward(cache.a2, dlogits, param_grads);
  Tensor dz2 = nn::silu_backward(cache.z2, da2);
  Tensor da1 = l2_.backward(cache.a1, dz2, param_grads);
  Tensor dz1 = nn::silu_backward(cache.z1, da1);
  return l1_.backward(cache.in, dz1, param_grads);
}

// ---------------------------------------------------------------------------
// Losses and schedule

double discriminator_loss(const Tensor& logits, const std::vector<int>& labels,
                          Tensor* dlogits) {
  return nn::softmax_cross_entropy(logits, labels, dlogits);
}

double entropy_penalty(const Tensor& logits, Tensor* dlogits) {
  return nn::negative_entropy(logits, dlogits);
}

void AdversarialConfig::validate() const {
  // alpha 0 is the ablation switch; negative weights are meaningless.
  if (alpha < 0) throw ConfigError("alpha must be >= 0");
  if (disc_steps_per_model_step < 1) {
    throw ConfigError("disc_steps_per_model_step must be >= 1");
  }
}

StepAction train_step_schedule(long long step_index, int disc_steps_per_model_step) {
  if (disc_steps_per_model_step < 1) {
    throw std::invalid_argument("disc_steps_per_model_step must be >= 1");
  }
  long long cycle = disc_steps_per_model_step + 1;
  return step_index % cycle < disc_steps_per_model_step
             ? StepAction::kUpdateDiscriminator
             : StepAction::kUpdateModel;
}

// ---------------------------------------------------------------------------
// Step planning

namespace {

struct FlatAnchor {
  int level = 0;
  int within = 0;  // index within the level
  int cell = 0;    // y * grid_w + x
  int a = 0;       // anchor slot within the cell
};

FlatAnchor locate(const AnchorGrid& grid, int flat) {
  FlatAnchor f;
  for (size_t l = 0; l < grid.levels.size(); ++l) {
    int n = static_cast<int>(grid.levels[l].anchors.size());
    if (flat < n) {
      f.level = static_cast<int>(l);
      f.within = flat;
      f.cell = flat / grid.levels[l].per_cell;
      f.a = flat % grid.levels[l].per_cell;
      return f;
    }
    flat -= n;
  }
  throw std::out_of_range("anchor index outside grid");
}

// Background ("not an object") probability of a flat anchor under the current
// head outputs; works for both 2-logit and (C+1)-logit heads.
double background_prob(const DetectorModel& model, const ForwardCache& cache,
                       const AnchorGrid& grid, int flat) {
  FlatAnchor f = locate(grid, flat);
  const Tensor& cls = cache.cls_logits[static_cast<size_t>(f.level)];
  int k_out = cls.dim(1) / grid.levels[static_cast<size_t>(f.level)].per_cell;
  size_t plane = static_cast<size_t>(cls.dim(2)) * cls.dim(3);
  std::vector<double> logits(static_cast<size_t>(k_out));
  for (int c = 0; c < k_out; ++c) {
    logits[static_cast<size_t>(c)] =
        cls.data[static_cast<size_t>(f.a * k_out + c) * plane + f.cell];
  }
  return nn::softmax_row(logits.data(), k_out)[0];
}

}  // namespace

StepPlan plan_step(const DetectorModel& model, const ForwardCache& cache,
                   const std::vector<Annotation>& truths, int neg_ratio) {
  const AnchorGrid& grid = model.anchors();
  StepPlan plan;
  plan.targets = assign_targets(grid.flat(), truths);

  // Hard negatives: background anchors ranked by background probability
  // ascending (most object-like first), pooled across levels.
  std::vector<int> background;
  for (size_t i = 0; i < plan.targets.objectness.size(); ++i) {
    if (plan.targets.objectness[i] == 0) background.push_back(static_cast<int>(i));
  }
  std::vector<double> key(background.size());
  for (size_t i = 0; i < background.size(); ++i) {
    key[i] = background_prob(model, cache, grid, background[i]);
  }
  std::vector<int> order(background.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return key[a] < key[b]; });
  size_t want = static_cast<size_t>(neg_ratio) *
                std::max<size_t>(1, static_cast<size_t>(plan.targets.foreground));
  for (size_t i = 0; i < order.size() && i < want; ++i) {
    plan.neg_anchors.push_back(background[order[i]]);
  }

  if (model.config().mode == DetectorMode::kTwoStage) {
    // Top proposals by objectness (no NMS at train time), plus the truths so
    // the region head always sees positives.
    auto cands = model.candidates_from(cache, 0);
    std::vector<int> cand_order(cands.size());
    for (size_t i = 0; i < cand_order.size(); ++i) cand_order[i] = static_cast<int>(i);
    std::stable_sort(cand_order.begin(), cand_order.end(), [&](int a, int b) {
      return cands[a].score > cands[b].score;
    });
    int take = std::min<int>(model.config().train_proposals,
                             static_cast<int>(cands.size()));
    for (int i = 0; i < take; ++i) {
      plan.rois.push_back(cands[static_cast<size_t>(cand_order[i])].box);
    }
    for (const auto& t : truths) {
      if (!t.is_crowd) plan.rois.push_back(t.box);
    }
    // Same 0.5 on both sides: every region is either foreground or background.
    plan.roi_targets = assign_targets(plan.rois, truths, 0.5, 0.5);
  }
  return plan;
}

ForegroundEmbeddings foreground_embeddings(const DetectorModel& model,
                                           const ForwardCache& cache,
                                           const StepPlan& plan) {
  ForegroundEmbeddings fg;
  if (model.config().mode == DetectorMode::kOneStage) {
    const AnchorGrid& grid = model.anchors();
    fg.cells.resize(grid.levels.size());
    fg.labels.resize(grid.levels.size());
    for (size_t i = 0; i < plan.targets.objectness.size(); ++i) {
      if (plan.targets.objectness[i] != 1) continue;
      FlatAnchor f = locate(grid, static_cast<int>(i));
      fg.cells[static_cast<size_t>(f.level)].push_back(f.cell);
      fg.labels[static_cast<size_t>(f.level)].push_back(
          plan.targets.type_label[i]);
    }
    for (size_t l = 0; l < grid.levels.size(); ++l) {
      fg.rows.push_back(gather_cells(cache.level_feature(static_cast<int>(l)),
                                     fg.cells[l]));
    }
  } else {
    fg.roi_rows.resize(1);
    fg.labels.resize(1);
    int emb = cache.roi_emb.dim(1);
    std::vector<int> rows;
    for (size_t r = 0; r < plan.rois.size(); ++r) {
      if (plan.roi_targets.objectness[r] != 1) continue;
      rows.push_back(static_cast<int>(r));
      fg.labels[0].push_back(plan.roi_targets.type_label[r]);
    }
    Tensor t({static_cast<int>(rows.size()), emb});
    for (size_t k = 0; k < rows.size(); ++k) {
      for (int c = 0; c < emb; ++c) {
        t.data[k * static_cast<size_t>(emb) + c] =
            cache.roi_emb.data[static_cast<size_t>(rows[k]) * emb + c];
      }
    }
    fg.roi_rows[0] = std::move(rows);
    fg.rows.push_back(std::move(t));
  }
  return fg;
}

// ---------------------------------------------------------------------------
// Model loss

namespace {

// Writes per-row CE/regression gradients back into the dense per-level head
// gradient tensors at the listed flat anchors.
void scatter_anchor_grads(const AnchorGrid& grid, const std::vector<int>& anchors,
                          const Tensor& drows, int k_out,
                          std::vector<Tensor>& dlevel) {
  for (size_t r = 0; r < anchors.size(); ++r) {
    FlatAnchor f = locate(grid, anchors[r]);
    Tensor& d = dlevel[static_cast<size_t>(f.level)];
    size_t plane = static_cast<size_t>(d.dim(2)) * d.dim(3);
    for (int c = 0; c < k_out; ++c) {
      d.data[static_cast<size_t>(f.a * k_out + c) * plane + f.cell] +=
          drows.data[r * static_cast<size_t>(k_out) + c];
    }
  }
}

Tensor gather_anchor_rows(const AnchorGrid& grid, const std::vector<int>& anchors,
                          const std::vector<Tensor>& level_out, int k_out) {
  Tensor rows({static_cast<int>(anchors.size()), k_out});
  for (size_t r = 0; r < anchors.size(); ++r) {
    FlatAnchor f = locate(grid, anchors[r]);
    const Tensor& src = level_out[static_cast<size_t>(f.level)];
    size_t plane = static_cast<size_t>(src.dim(2)) * src.dim(3);
    for (int c = 0; c < k_out; ++c) {
      rows.data[r * static_cast<size_t>(k_out) + c] =
          src.data[static_cast<size_t>(f.a * k_out + c) * plane + f.cell];
    }
  }
  return rows;
}

}  // namespace

LossBreakdown model_loss(DetectorModel& model, std::vector<Discriminator>* discs,
                         const ForwardCache& cache, const StepPlan& plan,
                         double alpha, bool accumulate_grads) {
  const DetectorConfig& cfg = model.config();
  const AnchorGrid& grid = model.anchors();
  bool two_stage = cfg.mode == DetectorMode::kTwoStage;
  if (alpha != 0 && discs == nullptr) {
    throw std::invalid_argument("model_loss: alpha != 0 requires discriminators");
  }

  LossBreakdown loss;
  HeadGrads grads;
  grads.dcls.resize(3);
  grads.dreg.resize(3);
  grads.demb.resize(3);
  grads.emb_cells.resize(3);
  if (accumulate_grads) {
    for (int l = 0; l < 3; ++l) {
      grads.dcls[l] = Tensor(cache.cls_logits[static_cast<size_t>(l)].shape);
      grads.dreg[l] = Tensor(cache.reg_out[static_cast<size_t>(l)].shape);
    }
  }

  // Anchor classification: foreground + mined negatives. The one-stage
  // class-aware head classifies object type (background = 0); every other
  // head is binary object-or-not.
  int anchor_k = two_stage ? 2 : cfg.cls_out();
  bool aware_anchors = !two_stage && cfg.head_type == HeadType::kClassAware;
  std::vector<int> selected;
  std::vector<int> labels;
  for (size_t i = 0; i < plan.targets.objectness.size(); ++i) {
    if (plan.targets.objectness[i] == 1) {
      selected.push_back(static_cast<int>(i));
      labels.push_back(aware_anchors ? plan.targets.type_label[i] + 1 : 1);
    }
  }
  for (int i : plan.neg_anchors) {
    selected.push_back(i);
    labels.push_back(0);
  }
  if (!selected.empty()) {
    Tensor rows = gather_anchor_rows(grid, selected, cache.cls_logits, anchor_k);
    Tensor drows;
    loss.objectness += nn::softmax_cross_entropy(
        rows, labels, accumulate_grads ? &drows : nullptr);
    if (accumulate_grads) {
      scatter_anchor_grads(grid, selected, drows, anchor_k, grads.dcls);
    }
  }

  // Anchor regression over foreground.
  std::vector<int> fg_anchors;
  for (size_t i = 0; i < plan.targets.objectness.size(); ++i) {
    if (plan.targets.objectness[i] == 1) fg_anchors.push_back(static_cast<int>(i));
  }
  if (!fg_anchors.empty()) {
    Tensor pred = gather_anchor_rows(grid, fg_anchors, cache.reg_out, 4);
    Tensor target({static_cast<int>(fg_anchors.size()), 4});
    for (size_t r = 0; r < fg_anchors.size(); ++r) {
      for (int j = 0; j < 4; ++j) {
        target.data[r * 4 + j] = plan.targets.regression[fg_anchors[r]][j];
      }
    }
    Tensor dpred;
    loss.regression +=
        nn::smooth_l1(pred, target, accumulate_grads ? &dpred : nullptr);
    if (accumulate_grads) {
      scatter_anchor_grads(grid, fg_anchors, dpred, 4, grads.dreg);
    }
  }

  // Region head (two-stage): classification over all regions, regression over
  // foreground regions.
  if (two_stage && !plan.rois.empty()) {
    std::vector<int> roi_labels(plan.rois.size(), 0);
    bool aware = cfg.head_type == HeadType::kClassAware;
    for (size_t r = 0; r < plan.rois.size(); ++r) {
      if (plan.roi_targets.objectness[r] == 1) {
        roi_labels[r] = aware ? plan.roi_targets.type_label[r] + 1 : 1;
      }
    }
    Tensor droi_cls;
    loss.objectness += nn::softmax_cross_entropy(
        cache.roi_cls, roi_labels, accumulate_grads ? &droi_cls : nullptr);
    if (accumulate_grads) grads.droi_cls = std::move(droi_cls);

    std::vector<int> fg_rois;
    for (size_t r = 0; r < plan.rois.size(); ++r) {
      if (plan.roi_targets.objectness[r] == 1) fg_rois.push_back(static_cast<int>(r));
    }
    if (!fg_rois.empty()) {
      Tensor pred({static_cast<int>(fg_rois.size()), 4});
      Tensor target(pred.shape);
      for (size_t k = 0; k < fg_rois.size(); ++k) {
        for (int j = 0; j < 4; ++j) {
          pred.data[k * 4 + j] = cache.roi_reg.data[static_cast<size_t>(fg_rois[k]) * 4 + j];
          target.data[k * 4 + j] = plan.roi_targets.regression[fg_rois[k]][j];
        }
      }
      Tensor dpred;
      loss.regression +=
          nn::smooth_l1(pred, target, accumulate_grads ? &dpred : nullptr);
      if (accumulate_grads) {
        grads.droi_reg = Tensor(cache.roi_reg.shape);
        for (size_t k = 0; k < fg_rois.size(); ++k) {
          for (int j = 0; j < 4; ++j) {
            grads.droi_reg.data[static_cast<size_t>(fg_rois[k]) * 4 + j] =
                dpred.data[k * 4 + j];
          }
        }
      }
    }
  }

  // Entropy penalty through frozen discriminators, averaged over attachment
  // points that saw any foreground.
  if (alpha != 0) {
    ForegroundEmbeddings fg = foreground_embeddings(model, cache, plan);
    int live = 0;
    for (const auto& rows : fg.rows) {
      if (rows.dim(0) > 0) ++live;
    }
    if (live > 0) {
      double scale = 1.0 / live;
      for (size_t d = 0; d < fg.rows.size(); ++d) {
        if (fg.rows[d].dim(0) == 0) continue;
        DiscCache dc;
        const Tensor& logits = (*discs)[d].forward(fg.rows[d], dc);
        Tensor dlogits;
        double h = entropy_penalty(logits, accumulate_grads ? &dlogits : nullptr);
        loss.entropy += scale * h;
        if (!accumulate_grads) continue;
        for (double& v : dlogits.data) v *= alpha * scale;
        Tensor demb = (*discs)[d].backward(dc, dlogits, /*param_grads=*/false);
        if (model.config().mode == DetectorMode::kOneStage) {
          grads.demb[d] = std::move(demb);
          grads.emb_cells[d] = fg.cells[d];
        } else {
          grads.droi_emb = Tensor(cache.roi_emb.shape);
          int embw = cache.roi_emb.dim(1);
          for (size_t k = 0; k < fg.roi_rows[0].size(); ++k) {
            for (int c = 0; c < embw; ++c) {
              grads.droi_emb.data[static_cast<size_t>(fg.roi_rows[0][k]) * embw + c] =
                  demb.data[k * static_cast<size_t>(embw) + c];
            }
          }
        }
      }
    }
  }

  if (accumulate_grads) model.backward(cache, grads);
  return loss;
}

// ---------------------------------------------------------------------------
// Trainer

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr <= 0 || disc_lr <= 0) throw ConfigError("learning rates must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (neg_ratio < 1) throw ConfigError("neg_ratio must be >= 1");
  adv.validate();
}

Trainer::Trainer(DetectorModel& model, const TrainConfig& config, TrainData data)
    : model_(model),
      config_(config),
      data_(std::move(data)),
      model_opt_(config.lr, config.momentum),
      disc_opt_(config.disc_lr, config.momentum),
      data_rng_(nn::Rng::derive(config.seed, 0)) {
  config_.validate();
  if (data_.image_ids.empty()) throw DataError("trainer: no training images");
  if (config_.adversarial) {
    // Discriminator stream is independent of data and model-init streams.
    nn::Rng disc_rng(nn::Rng::derive(config_.seed, 2));
    const DetectorConfig& dc = model_.config();
    if (dc.mode == DetectorMode::kOneStage) {
      for (int l = 0; l < 3; ++l) {
        discs_.emplace_back("disc" + std::to_string(l), dc.feature_channels(),
                            dc.num_type_classes);
      }
    } else {
      discs_.emplace_back("disc_roi", dc.roi_embedding, dc.num_type_classes);
    }
    for (auto& d : discs_) d.init(disc_rng);
  }
  if (!config_.log_path.empty()) {
    log_ = std::make_unique<std::ofstream>(config_.log_path);
    if (!*log_) throw DataError("cannot write training log " + config_.log_path);
  }
}

std::vector<ImageId> Trainer::next_batch() {
  std::vector<ImageId> batch;
  for (int i = 0; i < config_.batch_size; ++i) {
    if (cursor_ >= order_.size()) {
      order_ = data_.image_ids;
      data_rng_.shuffle(order_);
      cursor_ = 0;
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

void Trainer::model_update(const std::vector<ImageId>& batch) {
  auto params = model_.params();
  nn::Sgd::zero_grad(params);
  double alpha = config_.adversarial ? config_.adv.alpha : 0.0;
  LossBreakdown mean;
  for (ImageId id : batch) {
    Tensor image = image_to_tensor(data_.load_image(id));
    auto truths = data_.annotations(id);
    ForwardCache cache;
    model_.forward(image, cache);
    StepPlan plan = plan_step(model_, cache, truths, config_.neg_ratio);
    if (model_.config().mode == DetectorMode::kTwoStage) {
      model_.forward_roi(plan.rois, cache);
    }
    LossBreakdown one = model_loss(model_, discs_.empty() ? nullptr : &discs_,
                                   cache, plan, alpha, /*accumulate_grads=*/true);
    mean.objectness += one.objectness;
    mean.regression += one.regression;
    mean.entropy += one.entropy;
  }
  double inv = 1.0 / batch.size();
  for (nn::Param* p : params) {
    for (double& g : p->grad.data) g *= inv;
  }
  mean.objectness *= inv;
  mean.regression *= inv;
  mean.entropy *= inv;
  model_opt_.step(params);
  model_.step += 1;
  ++stats_.model_updates;
  log_line(StepAction::kUpdateModel, mean, 0.0, false);
}

void Trainer::disc_update(const std::vector<ImageId>& batch) {
  // Pool foreground embeddings across the batch per attachment point, then a
  // single cross-entropy step per discriminator. Embeddings are constants.
  size_t points = discs_.size();
  std::vector<std::vector<double>> pooled(points);
  std::vector<std::vector<int>> labels(points);
  std::vector<int> width(points, 0);
  for (ImageId id : batch) {
    Tensor image = image_to_tensor(data_.load_image(id));
    auto truths = data_.annotations(id);
    ForwardCache cache;
    model_.forward(image, cache);
    StepPlan plan = plan_step(model_, cache, truths, config_.neg_ratio);
    if (model_.config().mode == DetectorMode::kTwoStage) {
      model_.forward_roi(plan.rois, cache);
    }
    ForegroundEmbeddings fg = foreground_embeddings(model_, cache, plan);
    for (size_t d = 0; d < points; ++d) {
      width[d] = fg.rows[d].dim(1);
      pooled[d].insert(pooled[d].end(), fg.rows[d].data.begin(),
                       fg.rows[d].data.end());
      labels[d].insert(labels[d].end(), fg.labels[d].begin(), fg.labels[d].end());
    }
  }

  bool any = false;
  double total = 0;
  int live = 0;
  nn::ParamRefs disc_params;
  for (size_t d = 0; d < points; ++d) {
    auto refs = discs_[d].params();
    disc_params.insert(disc_params.end(), refs.begin(), refs.end());
  }
  nn::Sgd::zero_grad(disc_params);
  for (size_t d = 0; d < points; ++d) {
    if (labels[d].empty()) continue;
    any = true;
    ++live;
    Tensor rows({static_cast<int>(labels[d].size()), width[d]});
    rows.data = std::move(pooled[d]);
    DiscCache dc;
    const Tensor& logits = discs_[d].forward(rows, dc);
    Tensor dlogits;
    total += discriminator_loss(logits, labels[d], &dlogits);
    discs_[d].backward(dc, dlogits, /*param_grads=*/true);
  }
  if (any) {
    disc_opt_.step(disc_params);
    ++stats_.disc_updates;
    log_line(StepAction::kUpdateDiscriminator, LossBreakdown{}, total / live, false);
  } else {
    ++stats_.skipped_disc_updates;
    log_line(StepAction::kUpdateDiscriminator, LossBreakdown{}, 0.0, true);
  }
}

StepAction Trainer::step() {
  StepAction action = StepAction::kUpdateModel;
  if (config_.adversarial && config_.disc_updates_enabled) {
    action = train_step_schedule(global_step_, config_.adv.disc_steps_per_model_step);
  }
  auto batch = next_batch();
  if (action == StepAction::kUpdateModel) {
    model_update(batch);
  } else {
    disc_update(batch);
  }
  ++global_step_;
  stats_.actions.push_back(action);
  return action;
}

TrainStats Trainer::run() {
  for (int i = 0; i < config_.steps; ++i) step();
  return stats_;
}

void Trainer::log_line(StepAction action, const LossBreakdown& loss,
                       double disc_loss, bool skipped) {
  if (!log_) return;
  double alpha = config_.adversarial ? config_.adv.alpha : 0.0;
  nlohmann::ordered_json j{
      {"step", global_step_},
      {"action", action == StepAction::kUpdateModel ? "model" : "disc"},
  };
  if (action == StepAction::kUpdateModel) {
    j["loss"] = loss.total(alpha);
    j["objectness"] = loss.objectness;
    j["regression"] = loss.regression;
    j["entropy"] = loss.entropy;
  } else {
    j["disc_loss"] = disc_loss;
    j["skipped"] = skipped;
  }
  *log_ << j.dump() << "\n";
  log_->flush();  // keep the log tailable during long runs
}

}  // namespace cadet
