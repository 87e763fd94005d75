#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

#include "essd/eval.hpp"
#include "essd/train.hpp"

using namespace essd;
using oracle::random_box;
using oracle::reference_ap;
using oracle::reference_nms;

namespace {

Detection det(std::size_t image, double score, Box b, std::size_t cls = 0) { return {image, cls, score, b}; }

}  // namespace

TEST_CASE("all-zero logits give uniform scores") {
  const std::vector<ScaleSpec> spec{{0.3, {1, 2}, 2, 2}};
  const AnchorSet a = generate_anchors(spec);
  const Tensor conf({8, 4}), loc({8, 4});
  CHECK(decode_predictions(conf, loc, a, 0.6, 200).empty());
  const auto all = decode_predictions(conf, loc, a, 0.2, 200);
  CHECK(all.size() == 8 * 3);
  for (const auto& d : all) CHECK(d.score == doctest::Approx(0.25));
}

TEST_CASE("decoding encoded offsets recovers the box") {
  const std::vector<ScaleSpec> spec{{0.3, {1}, 1, 1}};
  const AnchorSet a = generate_anchors(spec);
  const Box gt = Box::from_corners(0.2, 0.3, 0.7, 0.6);
  const auto off = encode(gt, a.boxes[0]);
  Tensor conf({1, 3}), loc({1, 4});
  conf[2] = 10;
  for (std::size_t i = 0; i < 4; ++i) loc[i] = static_cast<float>(off[i]);
  const auto d = decode_predictions(conf, loc, a, 0.5, 10, 7);
  REQUIRE(d.size() == 1);
  CHECK(d[0].cls == 1);
  CHECK(d[0].image_id == 7);
  CHECK(d[0].box.xmin() == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(d[0].box.ymax() == doctest::Approx(0.6).epsilon(1e-6));
  CHECK_THROWS(decode_predictions(Tensor({2, 3}), loc, a, 0.5, 10));
}

TEST_CASE("top_k keeps the highest scores per class") {
  std::mt19937_64 rng(3);
  const std::vector<ScaleSpec> spec{{0.2, {1, 2, 0.5}, 4, 4}};
  const AnchorSet a = generate_anchors(spec);
  for (int t = 0; t < 20; ++t) {
    const Tensor conf = test::random_tensor<float>({48, 4}, rng, -3, 3);
    const Tensor loc = test::random_tensor<float>({48, 4}, rng, -1, 1);
    const auto all = decode_predictions(conf, loc, a, 0.0, 1000);
    for (std::size_t k : {1, 5}) {
      const auto top = decode_predictions(conf, loc, a, 0.0, k);
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> scores, kept;
        for (const auto& d : all)
          if (d.cls == c) scores.push_back(d.score);
        for (const auto& d : top)
          if (d.cls == c) kept.push_back(d.score);
        std::sort(scores.rbegin(), scores.rend());
        scores.resize(k);
        CHECK(kept == scores);
      }
    }
  }
}

TEST_CASE("nms examples") {
  const Box a = Box::from_corners(0.1, 0.1, 0.5, 0.5);
  const Box b = Box::from_corners(0.1, 0.1, 0.5, 0.45);  // iou 0.875
  const std::vector<Detection> d{det(0, 0.7, b), det(0, 0.9, a)};
  CHECK(nms_indices(d, 0.5) == std::vector<std::size_t>{1});
  CHECK(nms_indices(d, 0.9) == std::vector<std::size_t>{1, 0});

  const std::vector<Detection> apart{det(0, 0.5, Box::from_corners(0, 0, 0.2, 0.2)),
                                     det(0, 0.6, Box::from_corners(0.5, 0.5, 0.9, 0.9))};
  CHECK(nms(apart, 0.45).size() == 2);

  const std::vector<Detection> tie{det(0, 0.5, a), det(0, 0.5, a)};
  CHECK(nms_indices(tie, 0.45) == std::vector<std::size_t>{0});
}

TEST_CASE("nms equals the quadratic reference on 200 random cases") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + t % 30;
    std::vector<Detection> d;
    // cluster boxes so suppression actually happens
    for (std::size_t i = 0; i < n; ++i) {
      Box b = random_box(rng, 0.1);
      if (i > 0 && u(rng) < 0.5) b = Box{d[i - 1].box.cx + 0.02 * u(rng), d[i - 1].box.cy, d[i - 1].box.w, b.h};
      d.push_back(det(0, std::round(u(rng) * 20) / 20, b));
    }
    const double thr = 0.3 + 0.4 * u(rng);
    const auto got = nms_indices(d, thr);
    CHECK(got == reference_nms(d, thr));
    // kept scores are never dominated by a suppressed box
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (std::count(got.begin(), got.end(), i)) continue;
      bool suppressed = false;
      for (std::size_t k : got)
        if (d[k].score >= d[i].score && iou(d[k].box, d[i].box) > thr) suppressed = true;
      CHECK(suppressed);
    }
  }
}

TEST_CASE("average precision examples") {
  const Box g0 = Box::from_corners(0.1, 0.1, 0.3, 0.3), g1 = Box::from_corners(0.6, 0.6, 0.9, 0.9);
  const std::vector<std::vector<Box>> one{{g0}};
  CHECK(average_precision(std::vector<Detection>{det(0, 0.9, g0)}, one) == doctest::Approx(1.0));
  CHECK(average_precision(std::vector<Detection>{}, one) == 0.0);

  // TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
  const std::vector<std::vector<Box>> two{{g0, g1}};
  const std::vector<Detection> three{det(0, 0.9, g0), det(0, 0.8, Box::from_corners(0.4, 0.0, 0.5, 0.1)),
                                     det(0, 0.7, g1)};
  CHECK(average_precision(three, two) == doctest::Approx(28.0 / 33.0).epsilon(1e-12));
  CHECK(average_precision(three, two) == doctest::Approx(reference_ap(three, two, 0.5)).epsilon(1e-12));
  CHECK(average_precision(three, two, 0.5, ApMode::area) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));

  // a duplicate of a matched gt is a false positive
  const std::vector<Detection> dup{det(0, 0.9, g0), det(0, 0.8, g0)};
  CHECK(average_precision(dup, one) == doctest::Approx(1.0));
  const std::vector<Detection> dup_first{det(0, 0.9, g0), det(0, 0.95, g0)};
  CHECK(average_precision(dup_first, two) == doctest::Approx(6.0 / 11.0));
}

TEST_CASE("11-point AP equals the PR tabulation on 100 random instances") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t images = 1 + t % 3;
    std::vector<std::vector<Box>> gts(images);
    for (auto& g : gts)
      for (int k = 0; k < 1 + t % 3; ++k) g.push_back(random_box(rng, 0.1));
    std::vector<Detection> dets;
    for (int k = 0; k < 1 + t % 7; ++k) {
      const std::size_t img = static_cast<std::size_t>(u(rng) * images);
      Box b = random_box(rng, 0.1);
      if (u(rng) < 0.6 && !gts[img].empty()) {
        const Box& g = gts[img][static_cast<std::size_t>(u(rng) * gts[img].size())];
        b = Box{g.cx + 0.05 * (u(rng) - 0.5) * g.w, g.cy, g.w, g.h};
      }
      dets.push_back(det(img, u(rng), b));
    }
    CHECK(std::abs(average_precision(dets, gts) - reference_ap(dets, gts, 0.5)) <= 1e-9);
  }
}

TEST_CASE("adding a true positive never lowers AP") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::vector<Box>> gts{{random_box(rng, 0.1), random_box(rng, 0.1), random_box(rng, 0.1)}};
    std::vector<Detection> dets;
    for (int k = 0; k < 4; ++k) dets.push_back(det(0, u(rng), random_box(rng, 0.1)));
    const double before = average_precision(dets, gts);
    // an exact hit on a gt with the top score
    std::vector<Detection> more = dets;
    more.push_back(det(0, 2.0, gts[0][t % 3]));
    CHECK(average_precision(more, gts) >= before - 1e-12);
  }
}

TEST_CASE("oracle and empty detectors") {
  const auto data = synth_dataset(4, 20);
  std::vector<Detection> oracle;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (const auto& g : data[i].gts) oracle.push_back({i, g.label, 1.0, g.box});
  const EvalReport perfect = score_detections(oracle, data, 3);
  CHECK(perfect.map == doctest::Approx(1.0));
  const EvalReport empty = score_detections(std::vector<Detection>{}, data, 3);
  CHECK(empty.map == 0.0);
  std::size_t gts = 0;
  for (const auto& s : data) gts += s.gts.size();
  CHECK(std::accumulate(perfect.class_gts.begin(), perfect.class_gts.end(), std::size_t{0}) == gts);

  // classes without ground truth are excluded from the mean
  const EvalReport wide = score_detections(oracle, data, 5);
  CHECK_FALSE(wide.class_ap[4].has_value());
  CHECK(wide.map == doctest::Approx(1.0));
  const auto j = to_json(wide);
  CHECK(j["per_class"].size() == 5);
  CHECK(j["mAP"] == doctest::Approx(1.0));
}

TEST_CASE("evaluation is pure and independent of the thread count") {
  const NetGraph g = build_essd(Profile::make_toy(), Fusion::sum, true);
  const WeightStore w = init_weights(g, 2);
  const auto data = synth_dataset(1, 6);
  EvalConfig cfg;
  const EvalReport a = evaluate(g, w, data, cfg);
  const EvalReport b = evaluate(g, w, data, cfg);
  cfg.threads = 3;
  const EvalReport c = evaluate(g, w, data, cfg);
  CHECK(to_json(a).dump() == to_json(b).dump());
  CHECK(to_json(a).dump() == to_json(c).dump());
  CHECK(a.map >= 0);
  CHECK(a.map <= 1);
}

TEST_CASE("detection JSON line") {
  const auto j = to_json(Detection{3, 1, 0.75, Box::from_corners(0.25, 0.5, 0.75, 1.0)});
  CHECK(j["image_id"] == 3);
  CHECK(j["class"] == 1);
  CHECK(j["score"] == 0.75);
  CHECK(j["box"] == nlohmann::json::array({0.25, 0.5, 0.75, 1.0}));
}

TEST_CASE("bench reports batch-1 latency and fps") {
  const NetGraph g = build_ssd(Profile::make_toy());
  const BenchReport r = bench(g, init_weights(g, 0), 2, 5);
  CHECK(r.batch_size == 1);
  CHECK(r.input_height == 64);
  CHECK(r.input_width == 64);
  CHECK(r.timed == 5);
  CHECK(r.mean_ms > 0);
  CHECK(r.fps == doctest::Approx(1000.0 / r.mean_ms).epsilon(1e-12));
  const auto j = to_json(r);
  CHECK(j["batch_size"] == 1);
  CHECK(j["input_resolution"] == "64x64");
  for (const char* key : {"mean_latency_ms", "median_latency_ms", "fps", "warmup", "timed"}) CHECK(j.contains(key));
}
