#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cadet/types.hpp"

namespace cadet {

inline const std::vector<int> kDefaultKGrid = {3, 5, 10, 20, 30, 100, 300, 1000};

struct ARCurve {
  std::vector<int> k_values;
  std::vector<double> recalls;  // same length, non-decreasing in k
  double iou_threshold = 0.5;
  bool empty_truth_warning = false;

  double at_k(int k) const;  // recall at an exact grid point
  double max_recall() const { return recalls.empty() ? 0.0 : recalls.back(); }
};

struct DownstreamReport {
  std::map<int, double> accuracy_at_m;  // M -> accuracy, non-decreasing in M
  double bo_accuracy = 0;
  // Reference rows: classify the uncropped image / the ground-truth crop.
  double uncropped_accuracy = 0;
  double gt_crop_accuracy = 0;
  int classifier_failures = 0;
};

struct EvalReport {
  std::string model;
  std::optional<ARCurve> macro_all;  // unsplit evaluations
  std::optional<ARCurve> macro_seen;
  std::optional<ARCurve> macro_unseen;
  std::optional<ARCurve> harmonic;
  std::map<std::string, ARCurve> per_class;
  std::map<std::string, ARCurve> per_size;
  std::optional<DownstreamReport> downstream;
};

// Greedy score-ordered matching of detections against ground truth of one
// image. Detections must arrive sorted by descending score (equal scores
// keep input order). Each detection takes the unmatched truth with the
// highest IoU >= threshold, ties going to the lower truth index.
std::vector<std::pair<int, int>> match_greedy(
    const std::vector<Detection>& detections,
    const std::vector<Annotation>& truths, double iou_threshold);

struct ARFilter {
  std::optional<std::set<int>> class_ids;  // keep truths of these classes
  std::optional<SizeBucket> size;          // keep truths in this bucket
};

// Recall of the filtered truth set when at most k detections per image are
// allowed, pooled over all images. Detections are never filtered by class.
// Crowd truths are excluded before matching.
ARCurve ar_at_k(const std::map<ImageId, std::vector<Detection>>& predictions,
                const DatasetIndex& truths,
                const std::vector<int>& k_values = kDefaultKGrid,
                double iou_threshold = 0.5, const ARFilter& filter = {});

// Elementwise 2su/(s+u); 0 where s+u is 0. K grids must match.
ARCurve harmonic_mean(const ARCurve& seen, const ARCurve& unseen);

// Fraction of images whose truth class appears among the top-m ranked crop
// predictions. Ranks are 1-based; images without predictions count wrong.
double accuracy_at_m(
    const std::map<ImageId, std::vector<std::pair<int, int>>>& predictions,
    const std::map<ImageId, int>& truths, int m);

// Detection with the highest IoU against the truth box; ties broken by
// higher score, then input order. Throws on an empty list.
const Detection& best_overlap_select(const std::vector<Detection>& detections,
                                     const BoundingBox& truth_box);

}  // namespace cadet
