#include "cadet/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include "cadet/errors.hpp"

namespace cadet {

double ARCurve::at_k(int k) const {
  for (size_t i = 0; i < k_values.size(); ++i) {
    if (k_values[i] == k) return recalls[i];
  }
  throw std::invalid_argument("k=" + std::to_string(k) + " not on this curve");
}

std::vector<std::pair<int, int>> match_greedy(
    const std::vector<Detection>& detections,
    const std::vector<Annotation>& truths, double iou_threshold) {
  for (size_t i = 1; i < detections.size(); ++i) {
    if (detections[i].score > detections[i - 1].score) {
      throw std::invalid_argument("detections must be sorted by descending score");
    }
  }
  std::vector<std::pair<int, int>> pairs;
  std::vector<bool> taken(truths.size(), false);
  for (size_t d = 0; d < detections.size(); ++d) {
    int best_t = -1;
    double best_iou = 0;
    for (size_t t = 0; t < truths.size(); ++t) {
      if (taken[t]) continue;
      double v = iou(detections[d].box, truths[t].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best_t = static_cast<int>(t);
      }
    }
    if (best_t >= 0) {
      taken[best_t] = true;
      pairs.emplace_back(static_cast<int>(d), best_t);
    }
  }
  return pairs;
}

namespace {

bool truth_passes(const Annotation& a, const ARFilter& filter) {
  if (a.is_crowd) return false;
  if (filter.class_ids && !filter.class_ids->count(a.class_id)) return false;
  if (filter.size && size_bucket(a.box) != *filter.size) return false;
  return true;
}

}  // namespace

ARCurve ar_at_k(const std::map<ImageId, std::vector<Detection>>& predictions,
                const DatasetIndex& truths, const std::vector<int>& k_values,
                double iou_threshold, const ARFilter& filter) {
  ARCurve curve;
  curve.k_values = k_values;
  curve.iou_threshold = iou_threshold;

  // Per-image filtered truths and score-sorted detections, ordered by image id.
  std::map<ImageId, std::vector<Annotation>> truths_by_image;
  for (const auto& im : truths.images) truths_by_image[im.id];
  for (const auto& a : truths.annotations) {
    if (truth_passes(a, filter)) truths_by_image[a.image_id].push_back(a);
  }
  size_t total_truths = 0;
  for (const auto& [id, list] : truths_by_image) total_truths += list.size();

  if (total_truths == 0) {
    curve.recalls.assign(k_values.size(), 0.0);
    curve.empty_truth_warning = true;
    return curve;
  }

  std::vector<size_t> matched(k_values.size(), 0);
  for (const auto& [image_id, image_truths] : truths_by_image) {
    if (image_truths.empty()) continue;
    auto pred_it = predictions.find(image_id);
    if (pred_it == predictions.end()) continue;
    std::vector<Detection> sorted = pred_it->second;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Detection& a, const Detection& b) {
                       return a.score > b.score;
                     });
    for (size_t ki = 0; ki < k_values.size(); ++ki) {
      size_t k = static_cast<size_t>(std::max(k_values[ki], 0));
      std::vector<Detection> top(sorted.begin(),
                                 sorted.begin() + std::min(k, sorted.size()));
      matched[ki] += match_greedy(top, image_truths, iou_threshold).size();
    }
  }
  curve.recalls.resize(k_values.size());
  for (size_t ki = 0; ki < k_values.size(); ++ki) {
    curve.recalls[ki] = static_cast<double>(matched[ki]) /
                        static_cast<double>(total_truths);
  }
  return curve;
}

ARCurve harmonic_mean(const ARCurve& seen, const ARCurve& unseen) {
  if (seen.k_values != unseen.k_values) {
    throw std::invalid_argument("harmonic_mean: mismatched k grids");
  }
  ARCurve out;
  out.k_values = seen.k_values;
  out.iou_threshold = seen.iou_threshold;
  out.empty_truth_warning = seen.empty_truth_warning || unseen.empty_truth_warning;
  out.recalls.resize(seen.recalls.size());
  for (size_t i = 0; i < seen.recalls.size(); ++i) {
    double s = seen.recalls[i], u = unseen.recalls[i];
    out.recalls[i] = (s + u) <= 0 ? 0.0 : 2 * s * u / (s + u);
  }
  return out;
}

double accuracy_at_m(
    const std::map<ImageId, std::vector<std::pair<int, int>>>& predictions,
    const std::map<ImageId, int>& truths, int m) {
  if (truths.empty()) return 0;
  size_t correct = 0;
  for (const auto& [image_id, truth_class] : truths) {
    auto it = predictions.find(image_id);
    if (it == predictions.end()) continue;
    for (const auto& [predicted, rank] : it->second) {
      if (rank <= m && predicted == truth_class) {
        ++correct;
        break;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(truths.size());
}

const Detection& best_overlap_select(const std::vector<Detection>& detections,
                                     const BoundingBox& truth_box) {
  if (detections.empty()) {
    throw std::invalid_argument("best_overlap_select: empty detection list");
  }
  size_t best = 0;
  double best_iou = iou(detections[0].box, truth_box);
  for (size_t i = 1; i < detections.size(); ++i) {
    double v = iou(detections[i].box, truth_box);
    if (v > best_iou ||
        (v == best_iou && detections[i].score > detections[best].score)) {
      best = i;
      best_iou = v;
    }
  }
  return detections[best];
}

}  // namespace cadet
