#include "cadet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

using nn::Tensor;

// ---------------------------------------------------------------------------
// Anchors

std::vector<BoundingBox> AnchorGrid::flat() const {
  std::vector<BoundingBox> all;
  all.reserve(static_cast<size_t>(total()));
  for (const auto& l : levels) {
    all.insert(all.end(), l.anchors.begin(), l.anchors.end());
  }
  return all;
}

AnchorGrid generate_anchors(int image_w, int image_h,
                            const std::vector<LevelConfig>& levels) {
  AnchorGrid grid;
  for (const auto& cfg : levels) {
    if (cfg.stride <= 0 || image_w % cfg.stride != 0 || image_h % cfg.stride != 0) {
      throw ConfigError("anchor stride " + std::to_string(cfg.stride) +
                        " does not divide image " + std::to_string(image_w) + "x" +
                        std::to_string(image_h));
    }
    AnchorLevel level;
    level.stride = cfg.stride;
    level.grid_w = image_w / cfg.stride;
    level.grid_h = image_h / cfg.stride;
    level.per_cell = static_cast<int>(cfg.sizes.size() * cfg.ratios.size());
    level.anchors.reserve(static_cast<size_t>(level.grid_w) * level.grid_h *
                          level.per_cell);
    for (int y = 0; y < level.grid_h; ++y) {
      for (int x = 0; x < level.grid_w; ++x) {
        double cx = (x + 0.5) * cfg.stride;
        double cy = (y + 0.5) * cfg.stride;
        for (double size : cfg.sizes) {
          for (double ratio : cfg.ratios) {
            double w = size / std::sqrt(ratio);
            double h = size * std::sqrt(ratio);
            level.anchors.push_back(BoundingBox::from_center(cx, cy, w, h));
          }
        }
      }
    }
    grid.levels.push_back(std::move(level));
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Box parameterization

BoxOffsets encode_box(const BoundingBox& anchor, const BoundingBox& truth) {
  if (anchor.width() <= 0 || anchor.height() <= 0) {
    throw std::invalid_argument("encode_box: non-positive anchor");
  }
  if (truth.width() <= 0 || truth.height() <= 0) {
    throw std::invalid_argument("encode_box: non-positive truth box");
  }
  return {(truth.center_x() - anchor.center_x()) / anchor.width(),
          (truth.center_y() - anchor.center_y()) / anchor.height(),
          std::log(truth.width() / anchor.width()),
          std::log(truth.height() / anchor.height())};
}

BoundingBox decode_box(const BoundingBox& anchor, const BoxOffsets& t) {
  double cx = anchor.center_x() + t[0] * anchor.width();
  double cy = anchor.center_y() + t[1] * anchor.height();
  double w = anchor.width() * std::exp(t[2]);
  double h = anchor.height() * std::exp(t[3]);
  return BoundingBox::from_center(cx, cy, w, h);
}

// ---------------------------------------------------------------------------
// Target assignment

TargetAssignment assign_targets(const std::vector<BoundingBox>& anchors,
                                const std::vector<Annotation>& truths,
                                double pos_iou, double neg_iou) {
  size_t n = anchors.size();
  TargetAssignment out;
  out.matched_truth.assign(n, -1);
  out.objectness.assign(n, 0);
  out.regression.assign(n, BoxOffsets{0, 0, 0, 0});
  out.type_label.assign(n, -1);

  for (const auto& t : truths) {
    if (t.is_crowd) continue;
    if (t.box.width() <= 0 || t.box.height() <= 0) {
      throw DataError("assign_targets: truth box with non-positive extent");
    }
  }

  // Thresholded best-IoU match per anchor.
  std::vector<double> best_iou(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    int best = -1;
    for (size_t j = 0; j < truths.size(); ++j) {
      if (truths[j].is_crowd) continue;
      double v = iou(anchors[i], truths[j].box);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou[i] >= pos_iou) {
      out.matched_truth[i] = best;
      out.objectness[i] = 1;
    } else if (best_iou[i] >= neg_iou) {
      out.objectness[i] = -1;  // ignore band
    }
  }

  // Forced match: each truth claims its best anchor outright. Conflicts keep
  // the higher-IoU truth; ties keep the earlier one.
  std::vector<std::pair<int, double>> claim(n, {-1, -1.0});  // truth, iou
  for (size_t j = 0; j < truths.size(); ++j) {
    if (truths[j].is_crowd) continue;
    int best_anchor = -1;
    double best = -1.0;
    for (size_t i = 0; i < n; ++i) {
      double v = iou(anchors[i], truths[j].box);
      if (v > best) {
        best = v;
        best_anchor = static_cast<int>(i);
      }
    }
    if (best_anchor >= 0 && best > claim[best_anchor].second) {
      claim[best_anchor] = {static_cast<int>(j), best};
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (claim[i].first >= 0) {
      out.matched_truth[i] = claim[i].first;
      out.objectness[i] = 1;
    }
  }

  for (size_t i = 0; i < n; ++i) {
    if (out.objectness[i] == 1) {
      const auto& t = truths[static_cast<size_t>(out.matched_truth[i])];
      out.regression[i] = encode_box(anchors[i], t.box);
      out.type_label[i] = t.class_id;
      ++out.foreground;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// NMS

std::vector<Detection> nms(const std::vector<Detection>& candidates,
                           double iou_threshold, int max_detections) {
  std::vector<Detection> kept;
  if (max_detections <= 0) return kept;
  std::vector<int> order(candidates.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return candidates[a].score > candidates[b].score;
  });
  for (int idx : order) {
    const auto& cand = candidates[idx];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(cand.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    kept.push_back(cand);
    if (static_cast<int>(kept.size()) >= max_detections) break;
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Config

std::string to_string(DetectorMode mode) {
  return mode == DetectorMode::kOneStage ? "one_stage" : "two_stage";
}

std::string to_string(HeadType head) {
  return head == HeadType::kClassAware ? "class_aware" : "class_agnostic";
}

DetectorMode detector_mode_from(const std::string& text) {
  if (text == "one_stage") return DetectorMode::kOneStage;
  if (text == "two_stage") return DetectorMode::kTwoStage;
  throw ConfigError("unknown detector mode: " + text);
}

HeadType head_type_from(const std::string& text) {
  if (text == "class_aware") return HeadType::kClassAware;
  if (text == "class_agnostic") return HeadType::kClassAgnostic;
  throw ConfigError("unknown head type: " + text);
}

void DetectorConfig::validate() const {
  if (channels.size() != 5) throw ConfigError("detector needs 5 block channels");
  for (int c : channels) {
    if (c <= 0) throw ConfigError("block channels must be positive");
  }
  if (channels[2] != channels[3] || channels[3] != channels[4]) {
    throw ConfigError("feature levels must share a channel count (shared heads)");
  }
  if (levels.size() != 3) throw ConfigError("detector expects 3 feature levels");
  for (size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].stride != 8 << i) {
      throw ConfigError("level strides must be 8/16/32 to match the backbone");
    }
    if (levels[i].sizes.empty() || levels[i].ratios.empty()) {
      throw ConfigError("each level needs anchor sizes and ratios");
    }
    for (double r : levels[i].ratios) {
      if (r <= 0) throw ConfigError("anchor ratios must be positive");
    }
  }
  if (image_size <= 0 || image_size % 32 != 0) {
    throw ConfigError("image_size must be a positive multiple of 32");
  }
  if (num_type_classes < 1) throw ConfigError("num_type_classes must be >= 1");
  if (roi_size < 1 || roi_embedding < 1 || train_proposals < 1 || proposal_cap < 1) {
    throw ConfigError("two-stage sizes must be >= 1");
  }
}

DetectorConfig make_detector_config(DetectorMode mode, HeadType head,
                                    int num_type_classes, int image_size) {
  DetectorConfig cfg;
  cfg.mode = mode;
  cfg.head_type = head;
  cfg.image_size = image_size;
  cfg.num_type_classes = num_type_classes;
  cfg.levels = {
      {8, {16, 32}, {1.0}},
      {16, {40, 64}, {1.0}},
      {32, {80, 112}, {1.0}},
  };
  return cfg;
}

// ---------------------------------------------------------------------------
// Model

DetectorConfig DetectorModel::validated(DetectorConfig cfg) {
  cfg.validate();
  return cfg;
}

DetectorModel::DetectorModel(DetectorConfig cfg)
    : config_(validated(std::move(cfg))),
      anchors_(generate_anchors(config_.image_size, config_.image_size,
                                config_.levels)),
      b1("b1", 3, config_.channels[0], 3, 2, 1),
      b2("b2", config_.channels[0], config_.channels[1], 3, 2, 1),
      b3("b3", config_.channels[1], config_.channels[2], 3, 2, 1),
      b4("b4", config_.channels[2], config_.channels[3], 3, 2, 1),
      b5("b5", config_.channels[3], config_.channels[4], 3, 2, 1) {
  int feat = config_.feature_channels();
  int per_cell = anchors_.levels[0].per_cell;
  for (const auto& l : anchors_.levels) {
    if (l.per_cell != per_cell) {
      throw ConfigError("shared heads require equal anchors per cell across levels");
    }
  }
  if (config_.mode == DetectorMode::kOneStage) {
    cls_head = std::make_unique<nn::Conv2d>("cls", feat, per_cell * config_.cls_out(), 3, 1, 1);
    reg_head = std::make_unique<nn::Conv2d>("reg", feat, per_cell * 4, 3, 1, 1);
  } else {
    prop_cls = std::make_unique<nn::Conv2d>("prop_cls", feat, per_cell * 2, 3, 1, 1);
    prop_reg = std::make_unique<nn::Conv2d>("prop_reg", feat, per_cell * 4, 3, 1, 1);
    int pooled = feat * config_.roi_size * config_.roi_size;
    roi_fc = std::make_unique<nn::Linear>("roi_fc", pooled, config_.roi_embedding);
    roi_cls = std::make_unique<nn::Linear>("roi_cls", config_.roi_embedding, config_.cls_out());
    roi_reg = std::make_unique<nn::Linear>("roi_reg", config_.roi_embedding, 4);
  }
}

void DetectorModel::init(nn::Rng& rng) {
  b1.init(rng);
  b2.init(rng);
  b3.init(rng);
  b4.init(rng);
  b5.init(rng);
  if (cls_head) cls_head->init(rng);
  if (reg_head) reg_head->init(rng);
  if (prop_cls) prop_cls->init(rng);
  if (prop_reg) prop_reg->init(rng);
  if (roi_fc) roi_fc->init(rng);
  if (roi_cls) roi_cls->init(rng);
  if (roi_reg) roi_reg->init(rng);
  step = 0;
}

nn::ParamRefs DetectorModel::params() {
  nn::ParamRefs refs;
  auto take = [&](nn::ParamRefs r) { refs.insert(refs.end(), r.begin(), r.end()); };
  take(b1.params());
  take(b2.params());
  take(b3.params());
  take(b4.params());
  take(b5.params());
  if (cls_head) take(cls_head->params());
  if (reg_head) take(reg_head->params());
  if (prop_cls) take(prop_cls->params());
  if (prop_reg) take(prop_reg->params());
  if (roi_fc) take(roi_fc->params());
  if (roi_cls) take(roi_cls->params());
  if (roi_reg) take(roi_reg->params());
  return refs;
}

std::vector<const nn::Param*> DetectorModel::params() const {
  auto refs = const_cast<DetectorModel*>(this)->params();
  return {refs.begin(), refs.end()};
}

void DetectorModel::forward(const Tensor& image, ForwardCache& cache) const {
  if (image.shape != std::vector<int>{1, 3, config_.image_size, config_.image_size}) {
    throw std::invalid_argument("detector forward: bad input shape");
  }
  cache.input = image;
  cache.pre.clear();
  cache.act.clear();
  cache.cls_logits.clear();
  cache.reg_out.clear();
  const nn::Conv2d* blocks[5] = {&b1, &b2, &b3, &b4, &b5};
  const Tensor* x = &image;
  for (const auto* block : blocks) {
    cache.pre.push_back(block->forward(*x));
    cache.act.push_back(nn::silu(cache.pre.back()));
    x = &cache.act.back();
  }
  const nn::Conv2d* head_c = config_.mode == DetectorMode::kOneStage
                                 ? cls_head.get()
                                 : prop_cls.get();
  const nn::Conv2d* head_r = config_.mode == DetectorMode::kOneStage
                                 ? reg_head.get()
                                 : prop_reg.get();
  for (int l = 0; l < 3; ++l) {
    const Tensor& feat = cache.level_feature(l);
    cache.cls_logits.push_back(head_c->forward(feat));
    cache.reg_out.push_back(head_r->forward(feat));
  }
}

namespace {

// Feature-cell range [lo, hi) covered by pixel span [px_lo, px_hi] at a given
// stride, clamped to the map and never empty.
std::pair<int, int> cell_range(double px_lo, double px_hi, int stride, int extent) {
  int lo = static_cast<int>(std::floor(px_lo / stride));
  int hi = static_cast<int>(std::ceil(px_hi / stride));
  lo = std::clamp(lo, 0, extent - 1);
  hi = std::clamp(hi, lo + 1, extent);
  return {lo, hi};
}

void add_into(Tensor& dst, const Tensor& src) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

void DetectorModel::forward_roi(const std::vector<BoundingBox>& rois,
                                ForwardCache& cache) const {
  if (config_.mode != DetectorMode::kTwoStage) {
    throw std::invalid_argument("forward_roi: model is not two-stage");
  }
  int g = config_.roi_size;
  int ch = config_.feature_channels();
  int stride = config_.levels[0].stride;
  const Tensor& feat = cache.level_feature(0);
  int fh = feat.dim(2), fw = feat.dim(3);
  int r_count = static_cast<int>(rois.size());

  cache.rois = rois;
  cache.roi_pooled = Tensor({r_count, ch * g * g});
  for (int r = 0; r < r_count; ++r) {
    BoundingBox box = clip_box(rois[r], config_.image_size, config_.image_size);
    double bw = std::max(box.width(), 1.0);
    double bh = std::max(box.height(), 1.0);
    for (int by = 0; by < g; ++by) {
      auto [y0, y1] = cell_range(box.y_min + by * bh / g,
                                 box.y_min + (by + 1) * bh / g, stride, fh);
      for (int bx = 0; bx < g; ++bx) {
        auto [x0, x1] = cell_range(box.x_min + bx * bw / g,
                                   box.x_min + (bx + 1) * bw / g, stride, fw);
        double inv = 1.0 / ((y1 - y0) * (x1 - x0));
        for (int c = 0; c < ch; ++c) {
          double sum = 0;
          for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
              sum += feat.data[(static_cast<size_t>(c) * fh + y) * fw + x];
            }
          }
          cache.roi_pooled.data[static_cast<size_t>(r) * (ch * g * g) +
                                (static_cast<size_t>(c) * g + by) * g + bx] =
              sum * inv;
        }
      }
    }
  }
  cache.roi_emb_pre = roi_fc->forward(cache.roi_pooled);
  cache.roi_emb = nn::silu(cache.roi_emb_pre);
  cache.roi_cls = roi_cls->forward(cache.roi_emb);
  cache.roi_reg = roi_reg->forward(cache.roi_emb);
}

void DetectorModel::backward(const ForwardCache& cache, const HeadGrads& grads) {
  std::vector<Tensor> dfeat;
  for (int l = 0; l < 3; ++l) dfeat.emplace_back(cache.level_feature(l).shape);

  nn::Conv2d* head_c = config_.mode == DetectorMode::kOneStage ? cls_head.get()
                                                               : prop_cls.get();
  nn::Conv2d* head_r = config_.mode == DetectorMode::kOneStage ? reg_head.get()
                                                               : prop_reg.get();
  for (int l = 0; l < 3; ++l) {
    const Tensor& feat = cache.level_feature(l);
    if (l < static_cast<int>(grads.dcls.size()) && grads.dcls[l].numel() > 0) {
      add_into(dfeat[l], head_c->backward(feat, grads.dcls[l]));
    }
    if (l < static_cast<int>(grads.dreg.size()) && grads.dreg[l].numel() > 0) {
      add_into(dfeat[l], head_r->backward(feat, grads.dreg[l]));
    }
    if (l < static_cast<int>(grads.demb.size()) && grads.demb[l].numel() > 0) {
      scatter_cells_add(dfeat[l], grads.emb_cells[l], grads.demb[l]);
    }
  }

  // Two-stage region branch: heads -> embedding -> fc -> unpool into level 0.
  bool roi_grads = grads.droi_cls.numel() > 0 || grads.droi_reg.numel() > 0 ||
                   grads.droi_emb.numel() > 0;
  if (roi_grads) {
    Tensor demb(cache.roi_emb.shape);
    if (grads.droi_cls.numel() > 0) {
      add_into(demb, roi_cls->backward(cache.roi_emb, grads.droi_cls));
    }
    if (grads.droi_reg.numel() > 0) {
      add_into(demb, roi_reg->backward(cache.roi_emb, grads.droi_reg));
    }
    if (grads.droi_emb.numel() > 0) add_into(demb, grads.droi_emb);
    Tensor demb_pre = nn::silu_backward(cache.roi_emb_pre, demb);
    Tensor dpooled = roi_fc->backward(cache.roi_pooled, demb_pre);

    int g = config_.roi_size;
    int ch = config_.feature_channels();
    int stride = config_.levels[0].stride;
    int fh = dfeat[0].dim(2), fw = dfeat[0].dim(3);
    for (size_t r = 0; r < cache.rois.size(); ++r) {
      BoundingBox box = clip_box(cache.rois[r], config_.image_size, config_.image_size);
      double bw = std::max(box.width(), 1.0);
      double bh = std::max(box.height(), 1.0);
      for (int by = 0; by < g; ++by) {
        auto [y0, y1] = cell_range(box.y_min + by * bh / g,
                                   box.y_min + (by + 1) * bh / g, stride, fh);
        for (int bx = 0; bx < g; ++bx) {
          auto [x0, x1] = cell_range(box.x_min + bx * bw / g,
                                     box.x_min + (bx + 1) * bw / g, stride, fw);
          double inv = 1.0 / ((y1 - y0) * (x1 - x0));
          for (int c = 0; c < ch; ++c) {
            double dv = dpooled.data[r * static_cast<size_t>(ch * g * g) +
                                     (static_cast<size_t>(c) * g + by) * g + bx] *
                        inv;
            for (int y = y0; y < y1; ++y) {
              for (int x = x0; x < x1; ++x) {
                dfeat[0].data[(static_cast<size_t>(c) * fh + y) * fw + x] += dv;
              }
            }
          }
        }
      }
    }
  }

  // Backbone chain; levels 0..2 are the outputs of blocks 3..5.
  nn::Conv2d* blocks[5] = {&b1, &b2, &b3, &b4, &b5};
  Tensor da = std::move(dfeat[2]);
  for (int bi = 4; bi >= 0; --bi) {
    Tensor dz = nn::silu_backward(cache.pre[bi], da);
    const Tensor& input = bi == 0 ? cache.input : cache.act[bi - 1];
    da = blocks[bi]->backward(input, dz);
    if (bi == 4) add_into(da, dfeat[1]);
    if (bi == 3) add_into(da, dfeat[0]);
  }
}

namespace {

// Large predicted log-ratios would overflow exp(); clamp before decoding.
BoxOffsets clamp_offsets(BoxOffsets t) {
  t[2] = std::clamp(t[2], -8.0, 8.0);
  t[3] = std::clamp(t[3], -8.0, 8.0);
  return t;
}

}  // namespace

std::vector<Detection> DetectorModel::candidates_from(const ForwardCache& cache,
                                                      ImageId image_id,
                                                      double score_threshold) const {
  std::vector<Detection> out;
  bool agnostic_score = config_.mode == DetectorMode::kTwoStage ||
                        config_.head_type == HeadType::kClassAgnostic;
  int k_out = config_.mode == DetectorMode::kTwoStage ? 2 : config_.cls_out();
  for (size_t l = 0; l < anchors_.levels.size(); ++l) {
    const auto& level = anchors_.levels[l];
    const Tensor& cls = cache.cls_logits[l];
    const Tensor& reg = cache.reg_out[l];
    int h = cls.dim(2), w = cls.dim(3);
    size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> logits(static_cast<size_t>(k_out));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int a = 0; a < level.per_cell; ++a) {
          size_t cell = static_cast<size_t>(y) * w + x;
          for (int c = 0; c < k_out; ++c) {
            logits[static_cast<size_t>(c)] =
                cls.data[static_cast<size_t>(a * k_out + c) * plane + cell];
          }
          auto probs = nn::softmax_row(logits.data(), k_out);
          Detection det;
          det.image_id = image_id;
          if (agnostic_score) {
            det.score = probs[1];
          } else {
            int best = 1;
            for (int c = 2; c < k_out; ++c) {
              if (probs[c] > probs[best]) best = c;
            }
            det.score = probs[best];
            det.class_id = best - 1;
          }
          if (det.score < score_threshold) continue;
          BoxOffsets t;
          for (int j = 0; j < 4; ++j) {
            t[j] = reg.data[static_cast<size_t>(a * 4 + j) * plane + cell];
          }
          int anchor_index = (y * w + x) * level.per_cell + a;
          BoundingBox box = decode_box(level.anchors[anchor_index], clamp_offsets(t));
          box = clip_box(box, config_.image_size, config_.image_size);
          if (box.width() <= 0 || box.height() <= 0) continue;
          det.box = box;
          out.push_back(det);
        }
      }
    }
  }
  return out;
}

std::vector<Detection> DetectorModel::roi_detections_from(const ForwardCache& cache,
                                                          ImageId image_id,
                                                          double score_threshold) const {
  std::vector<Detection> out;
  int k_out = config_.cls_out();
  for (size_t r = 0; r < cache.rois.size(); ++r) {
    auto probs = nn::softmax_row(&cache.roi_cls.data[r * static_cast<size_t>(k_out)],
                                 k_out);
    Detection det;
    det.image_id = image_id;
    if (config_.head_type == HeadType::kClassAgnostic) {
      det.score = probs[1];
    } else {
      int best = 1;
      for (int c = 2; c < k_out; ++c) {
        if (probs[c] > probs[best]) best = c;
      }
      det.score = probs[best];
      det.class_id = best - 1;
    }
    if (det.score < score_threshold) continue;
    BoxOffsets t;
    for (int j = 0; j < 4; ++j) {
      t[j] = cache.roi_reg.data[r * 4 + j];
    }
    BoundingBox box = decode_box(cache.rois[r], clamp_offsets(t));
    box = clip_box(box, config_.image_size, config_.image_size);
    if (box.width() <= 0 || box.height() <= 0) continue;
    det.box = box;
    out.push_back(det);
  }
  return out;
}

std::vector<Detection> infer(const DetectorModel& model, const Tensor& image,
                             ImageId image_id, const InferOptions& opts) {
  ForwardCache cache;
  model.forward(image, cache);
  auto cands = model.candidates_from(cache, image_id, opts.score_threshold);
  const auto& cfg = model.config();
  if (cfg.mode == DetectorMode::kTwoStage) {
    auto proposals = nms(cands, opts.iou_threshold, cfg.proposal_cap);
    if (opts.proposals_only) {
      if (static_cast<int>(proposals.size()) > opts.max_detections) {
        proposals.resize(static_cast<size_t>(opts.max_detections));
      }
      return proposals;
    }
    std::vector<BoundingBox> rois;
    rois.reserve(proposals.size());
    for (const auto& p : proposals) rois.push_back(p.box);
    model.forward_roi(rois, cache);
    cands = model.roi_detections_from(cache, image_id, opts.score_threshold);
  }
  return nms(cands, opts.iou_threshold, opts.max_detections);
}

nn::Tensor image_to_tensor(const ImageU8& image) {
  Tensor t({1, 3, image.height, image.width});
  size_t plane = static_cast<size_t>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::uint8_t* px = image.at(x, y);
      size_t cell = static_cast<size_t>(y) * image.width + x;
      for (int c = 0; c < 3; ++c) {
        t.data[c * plane + cell] = px[c] / 255.0;
      }
    }
  }
  return t;
}

nn::Tensor gather_cells(const Tensor& feat, const std::vector<int>& cells) {
  int ch = feat.dim(1);
  size_t plane = static_cast<size_t>(feat.dim(2)) * feat.dim(3);
  Tensor out({static_cast<int>(cells.size()), ch});
  for (size_t k = 0; k < cells.size(); ++k) {
    for (int c = 0; c < ch; ++c) {
      out.data[k * static_cast<size_t>(ch) + c] =
          feat.data[static_cast<size_t>(c) * plane + cells[k]];
    }
  }
  return out;
}

void scatter_cells_add(Tensor& dfeat, const std::vector<int>& cells,
                       const Tensor& demb) {
  int ch = dfeat.dim(1);
  size_t plane = static_cast<size_t>(dfeat.dim(2)) * dfeat.dim(3);
  for (size_t k = 0; k < cells.size(); ++k) {
    for (int c = 0; c < ch; ++c) {
      dfeat.data[static_cast<size_t>(c) * plane + cells[k]] +=
          demb.data[k * static_cast<size_t>(ch) + c];
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using json = nlohmann::ordered_json;

json config_to_json(const DetectorConfig& cfg) {
  json levels = json::array();
  for (const auto& l : cfg.levels) {
    levels.push_back({{"stride", l.stride}, {"sizes", l.sizes}, {"ratios", l.ratios}});
  }
  return {{"mode", to_string(cfg.mode)},
          {"head_type", to_string(cfg.head_type)},
          {"image_size", cfg.image_size},
          {"num_type_classes", cfg.num_type_classes},
          {"channels", cfg.channels},
          {"levels", levels},
          {"roi_size", cfg.roi_size},
          {"roi_embedding", cfg.roi_embedding},
          {"train_proposals", cfg.train_proposals},
          {"proposal_cap", cfg.proposal_cap}};
}

DetectorConfig config_from_json(const json& j) {
  DetectorConfig cfg;
  cfg.mode = detector_mode_from(j.at("mode").get<std::string>());
  cfg.head_type = head_type_from(j.at("head_type").get<std::string>());
  cfg.image_size = j.at("image_size").get<int>();
  cfg.num_type_classes = j.at("num_type_classes").get<int>();
  cfg.channels = j.at("channels").get<std::vector<int>>();
  cfg.levels.clear();
  for (const auto& l : j.at("levels")) {
    LevelConfig level;
    level.stride = l.at("stride").get<int>();
    level.sizes = l.at("sizes").get<std::vector<double>>();
    level.ratios = l.at("ratios").get<std::vector<double>>();
    cfg.levels.push_back(std::move(level));
  }
  cfg.roi_size = j.at("roi_size").get<int>();
  cfg.roi_embedding = j.at("roi_embedding").get<int>();
  cfg.train_proposals = j.at("train_proposals").get<int>();
  cfg.proposal_cap = j.at("proposal_cap").get<int>();
  return cfg;
}

}  // namespace

void save_checkpoint(const DetectorModel& model, const std::string& path) {
  json j;
  j["format"] = "cadet.checkpoint";
  j["version"] = 1;
  j["config"] = config_to_json(model.config());
  j["step"] = model.step;
  json tensors = json::object();
  for (const nn::Param* p : model.params()) {
    tensors[p->name] = {{"shape", p->value.shape}, {"data", p->value.data}};
  }
  j["tensors"] = std::move(tensors);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << j.dump() << "\n";
}

DetectorModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "cadet.checkpoint") {
      throw DataError(path + ": not a checkpoint file");
    }
    DetectorModel model(config_from_json(j.at("config")));
    model.step = j.at("step").get<long long>();
    const json& tensors = j.at("tensors");
    for (nn::Param* p : model.params()) {
      if (!tensors.contains(p->name)) {
        throw DataError(path + ": missing tensor " + p->name);
      }
      const json& t = tensors.at(p->name);
      if (t.at("shape").get<std::vector<int>>() != p->value.shape) {
        throw DataError(path + ": shape mismatch for " + p->name);
      }
      p->value.data = t.at("data").get<std::vector<double>>();
    }
    return model;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

DetectorModel finetune_from(const DetectorModel& aware, nn::Rng& rng) {
  if (aware.config().head_type != HeadType::kClassAware) {
    throw std::invalid_argument("finetune_from expects a class-aware model");
  }
  DetectorConfig cfg = aware.config();
  cfg.head_type = HeadType::kClassAgnostic;
  DetectorModel model(cfg);
  model.init(rng);

  std::map<std::string, const nn::Param*> source;
  for (const nn::Param* p : aware.params()) source[p->name] = p;
  for (nn::Param* p : model.params()) {
    const nn::Param* src = source.at(p->name);
    if (src->value.shape == p->value.shape) {
      p->value = src->value;
    } else {
      // Only the classification head may differ: it is re-initialized fresh.
      std::string base = p->name.substr(0, p->name.find('.'));
      if (base != "cls" && base != "roi_cls") {
        throw std::logic_error("finetune_from: unexpected shape change in " + p->name);
      }
    }
  }
  model.step = 0;
  return model;
}

}  // namespace cadet
