#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "cadet/metrics.hpp"
#include "cadet/nn.hpp"

using namespace cadet;

namespace {

// Independent recall oracle: straightforward greedy walk, written against the
// definition rather than the library code.
double oracle_recall(std::vector<Detection> dets,
                     const std::vector<Annotation>& truths, size_t k,
                     double threshold) {
  std::vector<Annotation> live;
  for (const auto& t : truths) {
    if (!t.is_crowd) live.push_back(t);
  }
  if (live.empty()) return 0.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  if (dets.size() > k) dets.resize(k);
  std::vector<bool> used(live.size(), false);
  int matched = 0;
  for (const auto& d : dets) {
    int pick = -1;
    double best = threshold;  // requires iou >= threshold
    for (size_t t = 0; t < live.size(); ++t) {
      if (used[t]) continue;
      double v = iou(d.box, live[t].box);
      if (v > best || (pick < 0 && v >= threshold && v == best)) {
        best = v;
        pick = static_cast<int>(t);
      }
    }
    if (pick >= 0) {
      used[pick] = true;
      ++matched;
    }
  }
  return static_cast<double>(matched) / static_cast<double>(live.size());
}

BoundingBox jitter(nn::Rng& rng, const BoundingBox& b, double amount) {
  return {b.x_min + rng.uniform(-amount, amount),
          b.y_min + rng.uniform(-amount, amount),
          b.x_max + rng.uniform(-amount, amount),
          b.y_max + rng.uniform(-amount, amount)};
}

}  // namespace

TEST_CASE("match_greedy hand cases") {
  std::vector<Annotation> truths = {
      {{0, 0, 10, 10}, 0, 1}, {{20, 0, 30, 10}, 0, 1}};
  std::vector<Detection> dets = {
      {{0, 0, 10, 10}, 0.9, 1, {}},   // exact on truth 0
      {{21, 0, 31, 10}, 0.8, 1, {}},  // strong on truth 1
      {{1, 0, 11, 10}, 0.7, 1, {}},   // truth 0 already taken
  };
  auto pairs = match_greedy(dets, truths, 0.5);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0] == std::pair<int, int>(0, 0));
  CHECK(pairs[1] == std::pair<int, int>(1, 1));

  SUBCASE("unsorted scores are rejected") {
    std::swap(dets[0], dets[1]);
    CHECK_THROWS_AS(match_greedy(dets, truths, 0.5), std::invalid_argument);
  }

  SUBCASE("iou ties pick the lower truth index") {
    std::vector<Annotation> twins = {
        {{0, 0, 10, 10}, 0, 1}, {{0, 0, 10, 10}, 1, 1}};
    std::vector<Detection> one = {{{0, 0, 10, 10}, 0.5, 1, {}}};
    auto p = match_greedy(one, twins, 0.5);
    REQUIRE(p.size() == 1);
    CHECK(p[0].second == 0);
  }

  SUBCASE("threshold boundary is inclusive") {
    // iou exactly 1/2: boxes [0,10] and [5,15] overlap 5, union 15 -> 1/3. Use
    // [0,10]x[0,10] vs [0,10]x[5,15]: inter 50, union 150 -> 1/3. Construct 0.5:
    // a=[0,2]x[0,1], b=[1,3]x[0,1]: inter 1, union 3 -> 1/3. Simpler: nested
    // half-area box: a=[0,1]x[0,1], b=[0,1]x[0,0.5]: inter .5, union 1 -> 0.5.
    std::vector<Annotation> t2 = {{{0, 0, 1, 1}, 0, 1}};
    std::vector<Detection> d2 = {{{0, 0, 1, 0.5}, 0.9, 1, {}}};
    CHECK(iou(d2[0].box, t2[0].box) == 0.5);
    CHECK(match_greedy(d2, t2, 0.5).size() == 1);
  }
}

TEST_CASE("ar_at_k equals the oracle over random instances") {
  nn::Rng rng(21);
  const std::vector<int> ks = {1, 2, 3, 5, 10, 20};
  int instances = 0;
  for (int round = 0; round < 40; ++round) {
    DatasetIndex index;
    index.vocabulary = ClassVocabulary({"a", "b", "c"});
    std::map<ImageId, std::vector<Detection>> preds;
    int images = 2 + rng.uniform_int(6);
    std::map<ImageId, std::vector<Annotation>> truth_of;
    for (int im = 1; im <= images; ++im) {
      index.images.push_back({im, 64, 64, ""});
      int nt = rng.uniform_int(5);
      for (int t = 0; t < nt; ++t) {
        BoundingBox b;
        double x0 = rng.uniform(0, 48), y0 = rng.uniform(0, 48);
        b = {x0, y0, x0 + rng.uniform(4, 16), y0 + rng.uniform(4, 16)};
        Annotation a{b, rng.uniform_int(3), im, rng.uniform() < 0.15};
        index.annotations.push_back(a);
        truth_of[im].push_back(a);
      }
      int nd = rng.uniform_int(25);
      for (int d = 0; d < nd; ++d) {
        BoundingBox b;
        if (!truth_of[im].empty() && rng.uniform() < 0.6) {
          b = jitter(rng, truth_of[im][rng.uniform_int(
                              static_cast<int>(truth_of[im].size()))].box,
                     rng.uniform(0, 6));
        } else {
          double x0 = rng.uniform(0, 48), y0 = rng.uniform(0, 48);
          b = {x0, y0, x0 + rng.uniform(2, 16), y0 + rng.uniform(2, 16)};
        }
        // Quantized scores force ties; order within a tie is input order.
        preds[im].push_back({b, rng.uniform_int(8) / 8.0, im, {}});
      }
    }
    ARCurve curve = ar_at_k(preds, index, ks, 0.5);
    size_t total = 0;
    for (const auto& [im, list] : truth_of) {
      for (const auto& t : list) total += !t.is_crowd;
    }
    if (total == 0) {
      CHECK(curve.empty_truth_warning);
      continue;
    }
    for (size_t ki = 0; ki < ks.size(); ++ki) {
      double pooled = 0;
      for (const auto& [im, list] : truth_of) {
        size_t live = 0;
        for (const auto& t : list) live += !t.is_crowd;
        if (live == 0) continue;
        pooled += oracle_recall(preds.count(im) ? preds[im] : std::vector<Detection>{},
                                list, ks[ki], 0.5) *
                  static_cast<double>(live);
      }
      ++instances;
      CHECK(curve.recalls[ki] == doctest::Approx(pooled / total).epsilon(1e-12));
    }
    // recall must be non-decreasing in k
    for (size_t ki = 1; ki < ks.size(); ++ki) {
      CHECK(curve.recalls[ki] >= curve.recalls[ki - 1]);
    }
  }
  CHECK(instances >= 200);
}

TEST_CASE("ar_at_k honors class and size filters") {
  DatasetIndex index;
  index.vocabulary = ClassVocabulary({"x", "y"});
  index.images = {{1, 256, 256, ""}};
  index.annotations = {
      {{0, 0, 20, 20}, 0, 1, false},     // small, class x
      {{0, 0, 100, 100}, 1, 1, false},   // large, class y
      {{100, 100, 140, 140}, 0, 1, false},  // medium, class x
      {{30, 30, 50, 50}, 1, 1, true},    // crowd, never counted
  };
  std::map<ImageId, std::vector<Detection>> preds;
  preds[1] = {{{0, 0, 20, 20}, 0.9, 1, {}}, {{0, 0, 100, 100}, 0.8, 1, {}}};

  ARCurve all = ar_at_k(preds, index, {10});
  CHECK(all.recalls[0] == doctest::Approx(2.0 / 3.0));

  ARFilter by_class;
  by_class.class_ids = std::set<int>{0};
  CHECK(ar_at_k(preds, index, {10}, 0.5, by_class).recalls[0] ==
        doctest::Approx(0.5));

  ARFilter by_size;
  by_size.size = SizeBucket::kLarge;
  CHECK(ar_at_k(preds, index, {10}, 0.5, by_size).recalls[0] ==
        doctest::Approx(1.0));

  ARFilter empty;
  empty.class_ids = std::set<int>{};  // nothing passes
  ARCurve warned = ar_at_k(preds, index, {10}, 0.5, empty);
  CHECK(warned.empty_truth_warning);
  CHECK(warned.recalls[0] == 0.0);
}

TEST_CASE("harmonic mean") {
  ARCurve s, u;
  s.k_values = u.k_values = {1, 2};
  s.recalls = {0.4, 0.0};
  u.recalls = {0.8, 0.9};
  ARCurve h = harmonic_mean(s, u);
  CHECK(h.recalls[0] == doctest::Approx(2 * 0.4 * 0.8 / 1.2).epsilon(1e-12));
  CHECK(h.recalls[1] == 0.0);  // one side zero -> zero
  u.k_values = {1, 3};
  CHECK_THROWS_AS(harmonic_mean(s, u), std::invalid_argument);
}

TEST_CASE("accuracy_at_m") {
  std::map<ImageId, std::vector<std::pair<int, int>>> preds;  // (class, rank)
  std::map<ImageId, int> truths;
  truths[1] = 2;
  truths[2] = 0;
  truths[3] = 1;
  preds[1] = {{2, 1}};                  // hit at rank 1
  preds[2] = {{1, 1}, {0, 2}};          // hit at rank 2
  preds[3] = {};                        // no predictions -> wrong
  CHECK(accuracy_at_m(preds, truths, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(accuracy_at_m(preds, truths, 2) == doctest::Approx(2.0 / 3.0));
  CHECK(accuracy_at_m(preds, truths, 5) == doctest::Approx(2.0 / 3.0));

  SUBCASE("monotone in m on random fixtures") {
    nn::Rng rng(22);
    for (int round = 0; round < 50; ++round) {
      preds.clear();
      truths.clear();
      int n = 1 + rng.uniform_int(12);
      for (int i = 1; i <= n; ++i) {
        truths[i] = rng.uniform_int(4);
        int np = rng.uniform_int(6);
        for (int p = 0; p < np; ++p) {
          preds[i].push_back({rng.uniform_int(5) - 1, p + 1});
        }
      }
      double prev = 0;
      for (int m = 1; m <= 8; ++m) {
        double acc = accuracy_at_m(preds, truths, m);
        CHECK(acc >= prev);
        prev = acc;
      }
    }
  }
}

TEST_CASE("best_overlap_select") {
  BoundingBox truth{0, 0, 10, 10};
  std::vector<Detection> dets = {
      {{5, 5, 15, 15}, 0.9, 1, {}},
      {{0, 0, 10, 9}, 0.1, 1, {}},   // highest iou wins despite low score
      {{40, 40, 50, 50}, 1.0, 1, {}},
  };
  CHECK(best_overlap_select(dets, truth).box == dets[1].box);

  SUBCASE("iou tie broken by score") {
    std::vector<Detection> tie = {
        {{0, 0, 10, 10}, 0.2, 1, {}}, {{0, 0, 10, 10}, 0.7, 1, {}}};
    CHECK(best_overlap_select(tie, truth).score == 0.7);
  }
  SUBCASE("full tie keeps input order") {
    std::vector<Detection> tie = {
        {{0, 0, 10, 10}, 0.5, 1, {}}, {{0, 0, 10, 10}, 0.5, 7, {}}};
    CHECK(best_overlap_select(tie, truth).image_id == 1);
  }
  CHECK_THROWS_AS(best_overlap_select({}, truth), std::invalid_argument);
}

TEST_CASE("curve at_k lookup") {
  ARCurve c;
  c.k_values = {3, 5};
  c.recalls = {0.5, 0.75};
  CHECK(c.at_k(5) == 0.75);
  CHECK_THROWS_AS(c.at_k(4), std::invalid_argument);
}
