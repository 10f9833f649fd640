#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "cadet/errors.hpp"
#include "cadet/nn.hpp"
#include "cadet/protocol.hpp"
#include "cadet/types.hpp"

using namespace cadet;

TEST_CASE("name normalization") {
  CHECK(normalize_name("  TV Monitor ") == "tv monitor");
  CHECK(normalize_name("Potted-Plant") == "potted plant");
  CHECK(normalize_name("dining   table") == "dining table");
  CHECK(normalize_name("Aero_plane!") == "aero plane");
  CHECK(normalize_name("CAR") == "car");
  // aliases apply after normalization, keys normalized too
  std::map<std::string, std::string> aliases = {{"tv monitor", "tvmonitor"}};
  CHECK(normalize_name("TV-MONITOR", aliases) == "tvmonitor");
}

TEST_CASE("vocabulary rejects duplicates and dangling aliases") {
  CHECK_THROWS_AS(ClassVocabulary({"Cat", "cat"}), DataError);
  CHECK_THROWS_AS(ClassVocabulary({"cat"}, {{"kitty", "dog"}}), DataError);
  ClassVocabulary v({"cat", "dog"}, {{"puppy", "dog"}});
  CHECK(v.require("Puppy") == 1);
  CHECK(v.find("bird") == std::nullopt);
  CHECK_THROWS_AS(v.require("bird"), DataError);
}

TEST_CASE("f1 from a tiny hand-computed confusion") {
  ConfusionMatrix cm;
  cm.classes = ClassVocabulary({"a", "b"});
  cm.counts = {{8, 2}, {1, 5}};
  cm.background_miss = {0, 4};  // b truths matched to nothing
  cm.background_fp = {1, 0};    // spurious a predictions
  // a: recall 8/10, precision 8/(8+1+1)=0.8 -> f1 = 0.8
  // b: recall 5/10, precision 5/7 -> f1 = 2*(0.5*5/7)/(0.5+5/7)
  auto f1 = f1_scores(cm, true);
  CHECK(f1["a"] == doctest::Approx(0.8).epsilon(1e-12));
  double p = 5.0 / 7.0, r = 0.5;
  CHECK(f1["b"] == doctest::Approx(2 * p * r / (p + r)).epsilon(1e-12));

  // Without background the rates improve.
  auto bare = f1_scores(cm, false);
  CHECK(bare["a"] > 0.8);
}

TEST_CASE("frozen VOC confusion selects cow/boat/tvmonitor") {
  ConfusionMatrix cm = load_confusion_matrix(std::string(FIXTURE_DIR) +
                                             "/voc_confusion.json");
  CHECK(cm.classes.size() == 20);
  auto f1 = f1_scores(cm, true);
  std::set<double> distinct;
  for (const auto& [name, score] : f1) distinct.insert(score);
  CHECK(distinct.size() == 20);

  ClassSplit split = select_unseen(f1);
  CHECK(split.unseen_easy == "cow");
  CHECK(split.unseen_medium == "boat");
  CHECK(split.unseen_hard == "tvmonitor");
  CHECK(split.seen.size() == 17);
  CHECK(split.seen.count("person") == 1);
  CHECK(split.seen.count("cow") == 0);
}

TEST_CASE("select_unseen ordering rules") {
  std::map<std::string, double> f1 = {
      {"a", 0.9}, {"b", 0.1}, {"c", 0.5}, {"d", 0.5}, {"e", 0.7}};
  // ascending: b(0.1) c(0.5) d(0.5) e(0.7) a(0.9); lower median index 2 -> d
  ClassSplit s = select_unseen(f1);
  CHECK(s.unseen_easy == "b");
  CHECK(s.unseen_medium == "d");
  CHECK(s.unseen_hard == "a");

  CHECK_THROWS_AS(select_unseen({{"a", 1.0}, {"b", 0.5}}), std::invalid_argument);
  std::map<std::string, double> bad = {{"a", 0.1}, {"b", 0.2},
                                       {"c", std::nan("")}};
  CHECK_THROWS_AS(select_unseen(bad), std::invalid_argument);
}

TEST_CASE("semantic tree basics and cycle detection") {
  SemanticTree tree({"a", "b", "c"}, {{"b", {"a"}}, {"c", {"b"}}});
  CHECK(tree.parents_of("c") == std::set<std::string>{"b"});
  CHECK(tree.children_of("a") == std::set<std::string>{"b"});
  CHECK_THROWS_AS(
      SemanticTree({"a", "b"}, {{"a", {"b"}}, {"b", {"a"}}}), DataError);
}

TEST_CASE("hierarchy fixture loads with multiple parents") {
  SemanticTree tree =
      load_semantic_tree(std::string(FIXTURE_DIR) + "/oi_hierarchy.json");
  CHECK(tree.has_node("taxi"));
  CHECK(tree.parents_of("taxi") ==
        std::set<std::string>{"car", "commercial vehicle"});

  SUBCASE("reference {cow} excludes its ancestor chain only") {
    ExclusionResult r = excluded_classes(tree, {"cow"});
    CHECK(r.excluded == std::set<std::string>{"entity", "animal", "mammal", "cow"});
    CHECK(r.kept.count("dog") == 1);
    CHECK(r.kept.count("taxi") == 1);
    CHECK(r.warnings.empty());
  }
  SUBCASE("reference {vehicle} excludes the whole subtree") {
    ExclusionResult r = excluded_classes(tree, {"vehicle"});
    for (const auto& name : {"vehicle", "car", "taxi", "commercial vehicle",
                             "truck", "boat", "entity"}) {
      CHECK(r.excluded.count(name) == 1);
    }
    CHECK(r.kept.count("cow") == 1);
    CHECK(r.kept.count("chair") == 1);
  }
  SUBCASE("unknown reference names only warn") {
    ExclusionResult r = excluded_classes(tree, {"spaceship"});
    CHECK(r.excluded.empty());
    CHECK(r.warnings == std::vector<std::string>{"spaceship"});
    CHECK(r.kept.size() == tree.nodes().size());
  }
}

namespace {

// Independent reachability oracle: DFS over the raw edge lists.
void dfs_up(const std::map<std::string, std::set<std::string>>& parents,
            const std::string& node, std::set<std::string>& out) {
  auto it = parents.find(node);
  if (it == parents.end()) return;
  for (const auto& p : it->second) {
    if (out.insert(p).second) dfs_up(parents, p, out);
  }
}

}  // namespace

TEST_CASE("exclusion matches a DFS oracle on random DAGs") {
  nn::Rng rng(31);
  for (int round = 0; round < 600; ++round) {
    int n = 3 + rng.uniform_int(10);  // up to 12 nodes
    std::vector<std::string> nodes;
    for (int i = 0; i < n; ++i) nodes.push_back("n" + std::to_string(i));
    // Edges only from lower to higher index: acyclic by construction.
    std::map<std::string, std::set<std::string>> parents;
    std::map<std::string, std::set<std::string>> children;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        if (rng.uniform() < 0.25) {
          parents[nodes[i]].insert(nodes[j]);
          children[nodes[j]].insert(nodes[i]);
        }
      }
    }
    SemanticTree tree(nodes, parents);

    std::set<std::string> reference;
    for (int i = 0; i < n; ++i) {
      if (rng.uniform() < 0.3) reference.insert(nodes[i]);
    }

    std::set<std::string> expect;
    for (const auto& ref : reference) {
      expect.insert(ref);
      std::set<std::string> up, down;
      dfs_up(parents, ref, up);       // ancestors of the reference
      dfs_up(children, ref, down);    // descendants
      for (const auto& x : up) expect.insert(x);
      for (const auto& x : down) expect.insert(x);
    }

    ExclusionResult r = excluded_classes(tree, reference);
    CHECK(r.excluded == expect);
    std::set<std::string> all(nodes.begin(), nodes.end());
    for (const auto& x : expect) all.erase(x);
    CHECK(r.kept == all);
  }
}

TEST_CASE("confusion matrix from matched detections") {
  DatasetIndex index;
  index.vocabulary = ClassVocabulary({"cat", "dog"});
  index.images = {{1, 100, 100, ""}};
  index.annotations = {
      {{0, 0, 10, 10}, 0, 1, false},    // cat
      {{50, 50, 60, 60}, 1, 1, false},  // dog
      {{80, 80, 90, 90}, 1, 1, false},  // dog, missed
  };
  std::map<ImageId, std::vector<Detection>> preds;
  preds[1] = {
      {{0, 0, 10, 10}, 0.9, 1, 1},      // cat predicted as dog
      {{50, 50, 60, 60}, 0.8, 1, 1},    // dog as dog
      {{20, 20, 30, 30}, 0.7, 1, 0},    // background fp as cat
  };
  ConfusionMatrix cm = build_confusion_matrix(preds, index);
  CHECK(cm.counts[0][1] == 1);
  CHECK(cm.counts[1][1] == 1);
  CHECK(cm.counts[0][0] == 0);
  CHECK(cm.background_miss[1] == 1);
  CHECK(cm.background_fp[0] == 1);
}

TEST_CASE("protocol artifacts round-trip") {
  std::string dir = "protocol_artifacts";
  ConfusionMatrix cm;
  cm.classes = ClassVocabulary({"a", "b"});
  cm.counts = {{3, 1}, {0, 5}};
  cm.background_miss = {1, 0};
  cm.background_fp = {0, 2};
  save_confusion_matrix(cm, "rt_confusion.json");
  ConfusionMatrix back = load_confusion_matrix("rt_confusion.json");
  CHECK(back.counts == cm.counts);
  CHECK(back.background_fp == cm.background_fp);

  ClassSplit split;
  split.seen = {"a"};
  split.unseen_easy = "b";
  split.unseen_medium = "c";
  split.unseen_hard = "d";
  save_class_split(split, "rt_split.json");
  ClassSplit sback = load_class_split("rt_split.json");
  CHECK(sback.seen == split.seen);
  CHECK(sback.unseen_medium == "c");
}
