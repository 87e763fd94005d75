#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "doctest.h"

#include "essd/train.hpp"

using namespace essd;

namespace {

TrainConfig small_config(std::uint64_t seed, std::size_t scale = 1000) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.plan = canonical_phase_plan().scaled(scale);
  cfg.dataset_size = 8;
  cfg.batch_size = 4;
  return cfg;
}

struct TightBox {
  std::size_t x0, y0, x1, y1;  // x1/y1 exclusive
};

template <typename Pred>
std::optional<TightBox> tight_box(std::size_t size, Pred covered) {
  std::optional<TightBox> b;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (!covered(y * size + x)) continue;
      if (!b) b = TightBox{x, y, x + 1, y + 1};
      b->x0 = std::min(b->x0, x);
      b->y0 = std::min(b->y0, y);
      b->x1 = std::max(b->x1, x + 1);
      b->y1 = std::max(b->y1, y + 1);
    }
  return b;
}

}  // namespace

TEST_CASE("canonical plan matches the three-step schedule") {
  const PhasePlan plan = canonical_phase_plan();
  REQUIRE(plan.phases.size() == 3);
  CHECK(plan.phases[0].segments == std::vector<Segment>{{1e-3, 80000}, {1e-4, 20000}, {1e-5, 20000}});
  CHECK(plan.phases[1].segments == std::vector<Segment>{{1e-3, 20000}, {1e-4, 25000}});
  CHECK(plan.phases[2].segments.back() == Segment{1e-6, 20000});
  CHECK(plan.phases[0].scope == PhaseScope::all);
  CHECK(plan.phases[1].scope == PhaseScope::new_layers);
  CHECK(plan.phases[2].scope == PhaseScope::all);

  const PhasePlan small = plan.scaled(1000);
  CHECK(small.phases[0].segments == std::vector<Segment>{{1e-3, 80}, {1e-4, 20}, {1e-5, 20}});
  CHECK(small.total_iterations() == 120 + 45 + 90);
  CHECK_THROWS(plan.scaled(0));
  CHECK(plan.scaled(1000000).phases[1].segments[0].iterations == 1);
}

TEST_CASE("lr_at boundaries") {
  const PhasePlan plan = canonical_phase_plan();
  CHECK(lr_at(plan, 1, 0) == 1e-3);
  CHECK(lr_at(plan, 1, 79999) == 1e-3);
  CHECK(lr_at(plan, 1, 80000) == 1e-4);
  CHECK(lr_at(plan, 1, 99999) == 1e-4);
  CHECK(lr_at(plan, 1, 100000) == 1e-5);
  CHECK(lr_at(plan, 3, 89999) == 1e-6);
  CHECK_THROWS_AS(lr_at(plan, 1, 120000), std::out_of_range);
  CHECK_THROWS_AS(lr_at(plan, 0, 0), std::out_of_range);
  CHECK_THROWS_AS(lr_at(plan, 4, 0), std::out_of_range);
}

TEST_CASE("check_plan rejects bad schedules") {
  PhasePlan plan;
  plan.phases.push_back({PhaseScope::all, {}, {{1e-3, 10}, {1e-2, 10}}});
  CHECK_THROWS(check_plan(plan));
  plan.phases[0].segments = {{1e-3, 0}};
  CHECK_THROWS(check_plan(plan));
  plan.phases[0].segments = {{0.0, 5}};
  CHECK_THROWS(check_plan(plan));
  CHECK_NOTHROW(check_plan(canonical_phase_plan()));
}

TEST_CASE("sgd step examples") {
  const std::vector<ParamSpec> specs{{"a.weight", "a", ParamRole::weight, {1}, true},
                                     {"b.weight", "b", ParamRole::weight, {1}, true}};
  WeightStore w;
  w.set("a.weight", Tensor({1}, 0.0f));
  w.set("b.weight", Tensor({1}, 0.0f));
  const std::map<std::string, Tensor> grads{{"a.weight", Tensor({1}, 1.0f)}, {"b.weight", Tensor({1}, 1.0f)}};
  Velocity v;
  sgd_step(w, grads, v, 0.1, 0.9, 0.0, {"b"}, specs);
  CHECK(w.at("a.weight")[0] == doctest::Approx(-0.1));
  CHECK(w.at("b.weight")[0] == 0.0f);
  CHECK(v.count("b.weight") == 0);

  // Second step: total displacement -lr*g*(2 + momentum).
  sgd_step(w, grads, v, 0.1, 0.9, 0.0, {"b"}, specs);
  CHECK(w.at("a.weight")[0] == doctest::Approx(-0.1 * (2 + 0.9)));

  // weight decay pulls toward zero
  WeightStore d;
  d.set("a.weight", Tensor({1}, 2.0f));
  Velocity dv;
  sgd_step(d, {{"a.weight", Tensor({1}, 0.0f)}}, dv, 0.5, 0.0, 0.1, {}, {specs[0]});
  CHECK(d.at("a.weight")[0] == doctest::Approx(1.9));

  Velocity none;
  CHECK_THROWS(sgd_step(w, {}, none, 0.1, 0.9, 0.0, {}, specs));
}

TEST_CASE("synthetic data is deterministic in the seed") {
  const auto a = synth_dataset(3, 5), b = synth_dataset(3, 5), c = synth_dataset(4, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].gts.size() == b[i].gts.size());
    for (std::size_t g = 0; g < a[i].gts.size(); ++g) CHECK(a[i].gts[g].box == b[i].gts[g].box);
  }
  CHECK_FALSE(a[0].image == c[0].image);
  // sample i does not depend on the dataset length
  CHECK(synth_dataset(3, 2)[1].image == a[1].image);
  CHECK_FALSE(heldout_dataset(3, 1)[0].image == a[0].image);
}

TEST_CASE("rendered masks are tight inside their footprint") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t size = 64;
    Footprint fp;
    fp.side = std::uniform_int_distribution<std::size_t>(3, 40)(rng);
    fp.x0 = std::uniform_int_distribution<std::size_t>(0, size - fp.side)(rng);
    fp.y0 = std::uniform_int_distribution<std::size_t>(0, size - fp.side)(rng);
    for (std::size_t c = 0; c < kNumShapeClasses; ++c) {
      const auto mask = render_mask(static_cast<ShapeClass>(c), fp, size);
      const auto box = tight_box(size, [&](std::size_t i) { return mask[i] != 0; });
      REQUIRE(box);
      CHECK(box->x0 == fp.x0);
      CHECK(box->y0 == fp.y0);
      CHECK(box->x1 == fp.x0 + fp.side);
      CHECK(box->y1 == fp.y0 + fp.side);
    }
  }
}

TEST_CASE("single-shape images: bright pixels span exactly the ground-truth box") {
  SynthConfig cfg;
  cfg.max_shapes = 1;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const SynthSample s = synth_sample(11, i, cfg);
    REQUIRE(s.gts.size() == 1);
    const auto box = tight_box(cfg.image_size, [&](std::size_t p) { return s.image[p] > 0.0f; });
    REQUIRE(box);
    const double n = static_cast<double>(cfg.image_size);
    CHECK(s.gts[0].box.xmin() == doctest::Approx(box->x0 / n).epsilon(1e-12));
    CHECK(s.gts[0].box.ymin() == doctest::Approx(box->y0 / n).epsilon(1e-12));
    CHECK(s.gts[0].box.xmax() == doctest::Approx(box->x1 / n).epsilon(1e-12));
    CHECK(s.gts[0].box.ymax() == doctest::Approx(box->y1 / n).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("synthetic dataset statistics") {
  const auto data = synth_dataset(0, 1000);
  std::array<std::size_t, kNumShapeClasses> hist{};
  std::size_t total = 0, small = 0;
  for (const auto& s : data) {
    CHECK(s.gts.size() >= 1);
    CHECK(s.gts.size() <= 3);
    for (std::size_t a = 0; a < s.gts.size(); ++a) {
      const Box& b = s.gts[a].box;
      CHECK(b.xmin() >= 0);
      CHECK(b.xmax() <= 1);
      CHECK(b.ymin() >= 0);
      CHECK(b.ymax() <= 1);
      for (std::size_t c = a + 1; c < s.gts.size(); ++c) CHECK(iou(b, s.gts[c].box) <= 0.7);
      ++hist[s.gts[a].label];
      ++total;
      small += b.w < 0.2;
    }
  }
  for (std::size_t c = 0; c < kNumShapeClasses; ++c) {
    CAPTURE(c);
    CHECK(std::abs(static_cast<double>(hist[c]) / total - 1.0 / 3.0) <= 0.05);
  }
  CHECK(static_cast<double>(small) / total >= 0.4);
}

TEST_CASE("frozen layer sets") {
  const NetGraph base = build_ssd(Profile::make_toy());
  const NetGraph essd = build_essd(Profile::make_toy(), Fusion::sum, true);
  const PhasePlan plan = canonical_phase_plan();
  CHECK(frozen_layers(plan.phases[0], essd, &base).empty());
  const auto frozen = frozen_layers(plan.phases[1], essd, &base);
  for (const auto& l : base.layers()) CHECK(frozen.count(l.name) == (essd.contains(l.name) ? 1u : 0u));
  for (const auto& name : layers_absent_from(essd, base)) CHECK(frozen.count(name) == 0);
  CHECK_THROWS(frozen_layers(plan.phases[1], essd, nullptr));

  Phase listed{PhaseScope::listed, {"fc7/conv"}, {{1e-3, 1}}};
  CHECK(frozen_layers(listed, essd, &base).size() == essd.layers().size() - 1);
  listed.trainable = {"nope"};
  CHECK_THROWS(frozen_layers(listed, essd, &base));
}

TEST_CASE("phase 2 leaves every base weight bit-identical") {
  const NetGraph base = build_ssd(Profile::make_toy());
  const NetGraph essd = build_essd(Profile::make_toy(), Fusion::sum, true);
  TrainConfig cfg = small_config(1, 10000);
  const TrainResult p1 = train(essd, cfg, &base, {1});
  const TrainResult p2 = train(essd, cfg, &base, {2}, &p1.weights);
  std::size_t compared = 0;
  for (const auto& spec : parameter_specs(essd)) {
    if (!base.contains(spec.layer)) continue;
    const std::string& name = spec.name;
    const Tensor& t = p1.weights.at(name);
    ++compared;
    CAPTURE(name);
    CHECK(p2.weights.at(name) == t);
  }
  CHECK(compared > 0);
  bool changed = false;
  const WeightStore fresh = init_weights(essd, cfg.seed);
  for (const auto& name : layers_absent_from(essd, base))
    for (const auto& [pname, t] : p2.weights.tensors())
      if (pname.rfind(name + ".", 0) == 0 && !(t == fresh.at(pname))) changed = true;
  CHECK(changed);
}

TEST_CASE("log length equals the scheduled iterations and records carry the schedule") {
  const NetGraph base = build_ssd(Profile::make_toy());
  const NetGraph essd = build_essd(Profile::make_toy(), Fusion::sum, false);
  const TrainConfig cfg = small_config(2, 10000);
  std::size_t streamed = 0;
  const TrainResult r = train(essd, cfg, &base, {}, nullptr, [&](const LogRecord&) { ++streamed; });
  CHECK(r.log.size() == cfg.plan.total_iterations());
  CHECK(streamed == r.log.size());
  std::size_t i = 0;
  for (std::size_t p = 1; p <= 3; ++p)
    for (std::size_t it = 0; it < cfg.plan.phases[p - 1].total_iterations(); ++it, ++i) {
      CHECK(r.log[i].phase == p);
      CHECK(r.log[i].iteration == it);
      CHECK(r.log[i].learning_rate == lr_at(cfg.plan, p, it));
      CHECK(std::isfinite(r.log[i].loss.total));
    }
  const auto j = to_json(r.log.front());
  for (const char* key : {"phase", "iter", "lr", "loss", "conf_pos", "conf_neg", "loc", "num_pos", "num_mined_neg"})
    CHECK(j.contains(key));
}

TEST_CASE("plain SSD skips the freeze-everything phase") {
  const NetGraph ssd = build_ssd(Profile::make_toy());
  const TrainConfig cfg = small_config(3, 10000);
  const TrainResult r = train(ssd, cfg, &ssd);
  CHECK(r.log.size() == cfg.plan.phases[0].total_iterations() + cfg.plan.phases[2].total_iterations());
}

TEST_CASE("training is deterministic and phases compose") {
  const NetGraph base = build_ssd(Profile::make_toy());
  const NetGraph essd = build_essd(Profile::make_toy(), Fusion::prod, true);
  const TrainConfig cfg = small_config(5, 10000);
  const TrainResult all = train(essd, cfg, &base);
  const TrainResult again = train(essd, cfg, &base);
  CHECK(serialize_weights(all.weights) == serialize_weights(again.weights));

  const TrainResult p1 = train(essd, cfg, &base, {1});
  const TrainResult p2 = train(essd, cfg, &base, {2}, &p1.weights);
  const TrainResult p3 = train(essd, cfg, &base, {3}, &p2.weights);
  CHECK(serialize_weights(p3.weights) == serialize_weights(all.weights));
}

TEST_CASE("unknown frozen layer is an error") {
  const NetGraph g = build_ssd(Profile::make_toy());
  const TrainConfig cfg = small_config(0, 10000);
  const auto data = synth_dataset(0, 4);
  CHECK_THROWS(run_phase(g, init_weights(g, 0), cfg.plan.phases[0], 1, cfg, data, {"ghost"}));
}

TEST_CASE("loss on a fixed batch decreases over the first 50 phase-1 iterations") {
  const NetGraph g = build_ssd(Profile::make_toy());
  constexpr std::size_t kIters = 50;
  std::vector<double> mean(kIters, 0.0);
  for (std::uint64_t seed : {0, 1, 2}) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.dataset_size = 8;
    cfg.batch_size = 8;  // every step sees the same batch
    Phase phase{PhaseScope::all, {}, {{1e-3, kIters}}};
    const auto data = synth_dataset(seed, cfg.dataset_size);
    const TrainResult r = run_phase(g, init_weights(g, seed), phase, 1, cfg, data, {});
    for (std::size_t i = 0; i < kIters; ++i) mean[i] += r.log[i].loss.total / 3.0;
  }
  std::size_t rises = 0;
  for (std::size_t i = 1; i < kIters; ++i) rises += mean[i] >= mean[i - 1];
  INFO("first " << mean.front() << " last " << mean.back() << " rises " << rises);
  CHECK(rises == 0);
  CHECK(mean.back() < mean.front());
}
