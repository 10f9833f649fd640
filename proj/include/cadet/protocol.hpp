#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cadet/metrics.hpp"
#include "cadet/types.hpp"

namespace cadet {

// Square (true class, predicted class) counts plus per-class vectors for
// ground truths matched to nothing (background misses) and detections
// matched to nothing (background false positives).
struct ConfusionMatrix {
  ClassVocabulary classes;
  std::vector<std::vector<long long>> counts;
  std::vector<long long> background_miss;
  std::vector<long long> background_fp;

  void validate() const;  // dimensions must match the vocabulary
};

struct ClassSplit {
  std::set<std::string> seen;
  std::string unseen_easy;
  std::string unseen_medium;
  std::string unseen_hard;

  std::set<std::string> unseen() const {
    return {unseen_easy, unseen_medium, unseen_hard};
  }
};

// Class DAG: hierarchies may share children, so a node can have several parents.
class SemanticTree {
 public:
  SemanticTree() = default;
  // edges: child -> parents. Throws DataError on cycles.
  SemanticTree(std::vector<std::string> nodes,
               std::map<std::string, std::set<std::string>> parent_edges);

  const std::vector<std::string>& nodes() const { return nodes_; }
  bool has_node(const std::string& name) const { return children_.count(name) > 0; }
  const std::set<std::string>& parents_of(const std::string& name) const;
  const std::set<std::string>& children_of(const std::string& name) const;

 private:
  std::vector<std::string> nodes_;
  std::map<std::string, std::set<std::string>> parents_;
  std::map<std::string, std::set<std::string>> children_;
};

// Per-class F1 from a confusion matrix. Precision and recall take the
// background vectors into account when include_background is set.
std::map<std::string, double> f1_scores(const ConfusionMatrix& cm,
                                        bool include_background = true);

// Easy = lowest F1, hard = highest, medium = lower-median. Ties resolve
// alphabetically (ascending sort by F1 then name). Needs >= 3 classes.
ClassSplit select_unseen(const std::map<std::string, double>& f1);

struct ExclusionResult {
  std::set<std::string> excluded;
  std::set<std::string> kept;
  std::vector<std::string> warnings;  // reference names absent from the tree
};

// Excludes every node that is in the reference set, has an ancestor there,
// or has a descendant there. The complement is the evaluation class set.
ExclusionResult excluded_classes(const SemanticTree& tree,
                                 const std::set<std::string>& reference);

// Confusion matrix from class-aware detections at IoU >= threshold,
// matched greedily in score order per image.
ConfusionMatrix build_confusion_matrix(
    const std::map<ImageId, std::vector<Detection>>& predictions,
    const DatasetIndex& truths, double iou_threshold = 0.5);

// JSON (de)serialization for CLI artifacts.
ConfusionMatrix load_confusion_matrix(const std::string& path);
void save_confusion_matrix(const ConfusionMatrix& cm, const std::string& path);
ClassSplit load_class_split(const std::string& path);
void save_class_split(const ClassSplit& split, const std::string& path);
// Open-Images-style nested hierarchy: {"LabelName": ..., "Subcategory": [...]}.
SemanticTree load_semantic_tree(const std::string& path,
                                const std::map<std::string, std::string>& aliases = {});

}  // namespace cadet
