#include "cadet/protocol.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "cadet/errors.hpp"

namespace cadet {

using nlohmann::json;

void ConfusionMatrix::validate() const {
  size_t n = static_cast<size_t>(classes.size());
  if (counts.size() != n || background_miss.size() != n ||
      background_fp.size() != n) {
    throw DataError("confusion matrix dimensions do not match vocabulary");
  }
  for (const auto& row : counts) {
    if (row.size() != n) throw DataError("confusion matrix is not square");
    for (long long v : row) {
      if (v < 0) throw DataError("confusion matrix has negative counts");
    }
  }
}

SemanticTree::SemanticTree(
    std::vector<std::string> nodes,
    std::map<std::string, std::set<std::string>> parent_edges)
    : nodes_(std::move(nodes)), parents_(std::move(parent_edges)) {
  for (const auto& n : nodes_) {
    parents_[n];
    children_[n];
  }
  for (const auto& [child, parents] : parents_) {
    if (!children_.count(child)) {
      throw DataError("edge references unknown node '" + child + "'");
    }
    for (const auto& p : parents) {
      if (!children_.count(p)) {
        throw DataError("edge references unknown node '" + p + "'");
      }
      children_[p].insert(child);
    }
  }
  // Kahn's algorithm; leftovers mean a cycle.
  std::map<std::string, int> in_degree;
  for (const auto& n : nodes_) in_degree[n] = static_cast<int>(parents_[n].size());
  std::deque<std::string> ready;
  for (const auto& [n, d] : in_degree) {
    if (d == 0) ready.push_back(n);
  }
  size_t seen = 0;
  while (!ready.empty()) {
    std::string n = ready.front();
    ready.pop_front();
    ++seen;
    for (const auto& c : children_[n]) {
      if (--in_degree[c] == 0) ready.push_back(c);
    }
  }
  if (seen != nodes_.size()) throw DataError("class hierarchy contains a cycle");
}

const std::set<std::string>& SemanticTree::parents_of(const std::string& name) const {
  auto it = parents_.find(name);
  if (it == parents_.end()) throw DataError("unknown hierarchy node '" + name + "'");
  return it->second;
}

const std::set<std::string>& SemanticTree::children_of(const std::string& name) const {
  auto it = children_.find(name);
  if (it == children_.end()) throw DataError("unknown hierarchy node '" + name + "'");
  return it->second;
}

std::map<std::string, double> f1_scores(const ConfusionMatrix& cm,
                                        bool include_background) {
  cm.validate();
  int n = cm.classes.size();
  std::map<std::string, double> out;
  for (int c = 0; c < n; ++c) {
    long long diag = cm.counts[c][c];
    long long row = 0, col = 0;
    for (int j = 0; j < n; ++j) {
      row += cm.counts[c][j];
      col += cm.counts[j][c];
    }
    if (include_background) {
      row += cm.background_miss[c];
      col += cm.background_fp[c];
    }
    double precision = col > 0 ? static_cast<double>(diag) / col : 0.0;
    double recall = row > 0 ? static_cast<double>(diag) / row : 0.0;
    double f1 = (precision + recall) > 0
                    ? 2 * precision * recall / (precision + recall)
                    : 0.0;
    out[cm.classes.name(c)] = f1;
  }
  return out;
}

ClassSplit select_unseen(const std::map<std::string, double>& f1) {
  if (f1.size() < 3) {
    throw std::invalid_argument("select_unseen needs at least 3 classes");
  }
  std::vector<std::pair<std::string, double>> ranked(f1.begin(), f1.end());
  for (const auto& [name, score] : ranked) {
    if (!std::isfinite(score)) {
      throw std::invalid_argument("non-finite F1 for class '" + name + "'");
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  size_t n = ranked.size();
  ClassSplit split;
  split.unseen_easy = ranked.front().first;
  split.unseen_hard = ranked.back().first;
  split.unseen_medium = ranked[(n - 1) / 2].first;  // lower median
  for (const auto& [name, score] : ranked) {
    if (name != split.unseen_easy && name != split.unseen_medium &&
        name != split.unseen_hard) {
      split.seen.insert(name);
    }
  }
  return split;
}

ExclusionResult excluded_classes(const SemanticTree& tree,
                                 const std::set<std::string>& reference) {
  ExclusionResult result;
  std::set<std::string> present;
  for (const auto& name : reference) {
    if (tree.has_node(name)) {
      present.insert(name);
    } else {
      result.warnings.push_back(name);
    }
  }
  // Everything reachable upward or downward from a reference node.
  auto flood = [&](bool upward) {
    std::deque<std::string> frontier(present.begin(), present.end());
    std::set<std::string> visited(present.begin(), present.end());
    while (!frontier.empty()) {
      std::string n = frontier.front();
      frontier.pop_front();
      const auto& next = upward ? tree.parents_of(n) : tree.children_of(n);
      for (const auto& m : next) {
        if (visited.insert(m).second) frontier.push_back(m);
      }
    }
    return visited;
  };
  auto up = flood(true);
  auto down = flood(false);
  result.excluded.insert(up.begin(), up.end());
  result.excluded.insert(down.begin(), down.end());
  for (const auto& n : tree.nodes()) {
    if (!result.excluded.count(n)) result.kept.insert(n);
  }
  return result;
}

ConfusionMatrix build_confusion_matrix(
    const std::map<ImageId, std::vector<Detection>>& predictions,
    const DatasetIndex& truths, double iou_threshold) {
  int n = truths.vocabulary.size();
  ConfusionMatrix cm;
  cm.classes = truths.vocabulary;
  cm.counts.assign(n, std::vector<long long>(n, 0));
  cm.background_miss.assign(n, 0);
  cm.background_fp.assign(n, 0);

  std::map<ImageId, std::vector<Annotation>> truths_by_image;
  for (const auto& a : truths.annotations) {
    if (!a.is_crowd) truths_by_image[a.image_id].push_back(a);
  }
  for (const auto& im : truths.images) {
    std::vector<Annotation> image_truths;
    if (auto it = truths_by_image.find(im.id); it != truths_by_image.end()) {
      image_truths = it->second;
    }
    std::vector<Detection> sorted;
    if (auto it = predictions.find(im.id); it != predictions.end()) {
      sorted = it->second;
    }
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Detection& a, const Detection& b) {
                       return a.score > b.score;
                     });
    auto pairs = match_greedy(sorted, image_truths, iou_threshold);
    std::vector<bool> det_used(sorted.size(), false);
    std::vector<bool> truth_used(image_truths.size(), false);
    for (const auto& [d, t] : pairs) {
      if (!sorted[d].class_id) {
        throw DataError("confusion matrix needs class-aware detections");
      }
      cm.counts[image_truths[t].class_id][*sorted[d].class_id] += 1;
      det_used[d] = true;
      truth_used[t] = true;
    }
    for (size_t t = 0; t < image_truths.size(); ++t) {
      if (!truth_used[t]) cm.background_miss[image_truths[t].class_id] += 1;
    }
    for (size_t d = 0; d < sorted.size(); ++d) {
      if (!det_used[d]) {
        if (!sorted[d].class_id) {
          throw DataError("confusion matrix needs class-aware detections");
        }
        cm.background_fp[*sorted[d].class_id] += 1;
      }
    }
  }
  return cm;
}

namespace {

json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
}

void write_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace

ConfusionMatrix load_confusion_matrix(const std::string& path) {
  json j = parse_file(path);
  try {
    ConfusionMatrix cm;
    cm.classes = ClassVocabulary(j.at("classes").get<std::vector<std::string>>());
    cm.counts = j.at("counts").get<std::vector<std::vector<long long>>>();
    cm.background_miss =
        j.value("background_miss", std::vector<long long>(cm.classes.size(), 0));
    cm.background_fp =
        j.value("background_fp", std::vector<long long>(cm.classes.size(), 0));
    cm.validate();
    return cm;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

void save_confusion_matrix(const ConfusionMatrix& cm, const std::string& path) {
  cm.validate();
  json j;
  j["classes"] = cm.classes.names();
  j["counts"] = cm.counts;
  j["background_miss"] = cm.background_miss;
  j["background_fp"] = cm.background_fp;
  write_file(path, j);
}

ClassSplit load_class_split(const std::string& path) {
  json j = parse_file(path);
  try {
    ClassSplit split;
    for (const auto& name : j.at("seen")) split.seen.insert(name.get<std::string>());
    split.unseen_easy = j.at("unseen_easy").get<std::string>();
    split.unseen_medium = j.at("unseen_medium").get<std::string>();
    split.unseen_hard = j.at("unseen_hard").get<std::string>();
    return split;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

void save_class_split(const ClassSplit& split, const std::string& path) {
  json j;
  j["seen"] = std::vector<std::string>(split.seen.begin(), split.seen.end());
  j["unseen_easy"] = split.unseen_easy;
  j["unseen_medium"] = split.unseen_medium;
  j["unseen_hard"] = split.unseen_hard;
  write_file(path, j);
}

SemanticTree load_semantic_tree(
    const std::string& path,
    const std::map<std::string, std::string>& aliases) {
  json j = parse_file(path);
  std::vector<std::string> nodes;
  std::map<std::string, std::set<std::string>> parent_edges;
  std::set<std::string> known;

  std::function<void(const json&, const std::string&)> walk =
      [&](const json& node, const std::string& parent) {
        if (!node.contains("LabelName")) {
          throw DataError(path + ": hierarchy node without LabelName");
        }
        std::string name =
            normalize_name(node.at("LabelName").get<std::string>(), aliases);
        if (known.insert(name).second) nodes.push_back(name);
        if (!parent.empty()) parent_edges[name].insert(parent);
        if (node.contains("Subcategory")) {
          for (const auto& child : node.at("Subcategory")) walk(child, name);
        }
      };
  try {
    walk(j, "");
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return SemanticTree(std::move(nodes), std::move(parent_edges));
}

}  // namespace cadet
