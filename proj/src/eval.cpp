#include "essd/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace essd {

nlohmann::json to_json(const Detection& det) {
  return {{"image_id", det.image_id},
          {"class", det.cls},
          {"score", det.score},
          {"box", {det.box.xmin(), det.box.ymin(), det.box.xmax(), det.box.ymax()}}};
}

std::vector<Detection> decode_predictions(const Tensor& conf, const Tensor& loc, const AnchorSet& anchors,
                                          double score_thresh, std::size_t top_k, std::size_t image_id,
                                          const Variances& var) {
  const std::size_t crank = conf.rank(), lrank = loc.rank();
  if ((crank != 2 && crank != 3) || (crank == 3 && conf.dim(0) != 1) || (lrank != 2 && lrank != 3) ||
      (lrank == 3 && loc.dim(0) != 1)) {
    throw ShapeError("decode_predictions expects conf [A, C+1] and loc [A, 4] for one image");
  }
  const std::size_t a_count = conf.dim(crank - 2), k = conf.dim(crank - 1);
  if (a_count != anchors.size() || loc.dim(lrank - 2) != a_count || loc.dim(lrank - 1) != 4 || k < 2) {
    throw ShapeError("predictions for " + std::to_string(a_count) + " anchors do not align with " +
                     std::to_string(anchors.size()) + " default boxes");
  }
  std::vector<double> probs(a_count * k);
  for (std::size_t a = 0; a < a_count; ++a) {
    const float* row = conf.data().data() + a * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[a * k + j] = std::exp(row[j] - mx) / z;
  }
  std::vector<Detection> out;
  for (std::size_t c = 1; c < k; ++c) {
    std::vector<std::size_t> keep;
    for (std::size_t a = 0; a < a_count; ++a)
      if (probs[a * k + c] > score_thresh) keep.push_back(a);
    std::stable_sort(keep.begin(), keep.end(),
                     [&](std::size_t x, std::size_t y) { return probs[x * k + c] > probs[y * k + c]; });
    if (keep.size() > top_k) keep.resize(top_k);
    for (std::size_t a : keep) {
      const float* l = loc.data().data() + a * 4;
      const Box box = decode({l[0], l[1], l[2], l[3]}, anchors.boxes[a], var);
      out.push_back({image_id, c - 1, probs[a * k + c], box});
    }
  }
  return out;
}

std::vector<std::size_t> nms_indices(std::span<const Detection> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    kept.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(dets[cur].box, dets[other].box) > iou_thresh) suppressed[other] = true;
    }
  }
  return kept;
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(dets, iou_thresh)) out.push_back(dets[i]);
  return out;
}

double average_precision(std::span<const Detection> dets, const std::vector<std::vector<Box>>& gts,
                         double iou_thresh, ApMode mode) {
  std::size_t npos = 0;
  for (const auto& g : gts) npos += g.size();
  if (npos == 0) return 0.0;

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

  std::vector<std::size_t> tp_cum, fp_cum;
  std::size_t tp = 0, fp = 0;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    if (d.image_id >= gts.size()) throw std::out_of_range("detection image id outside the ground-truth set");
    const auto& boxes = gts[d.image_id];
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      if (used[d.image_id][g]) continue;
      const double o = iou(d.box, boxes[g]);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      used[d.image_id][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    tp_cum.push_back(tp);
    fp_cum.push_back(fp);
  }

  const std::size_t n = tp_cum.size();
  auto precision = [&](std::size_t i) {
    return static_cast<double>(tp_cum[i]) / static_cast<double>(tp_cum[i] + fp_cum[i]);
  };
  if (mode == ApMode::voc2007_11point) {
    double ap = 0;
    for (std::size_t t = 0; t <= 10; ++t) {
      double p = 0;
      // recall >= t/10, compared exactly in integers
      for (std::size_t i = 0; i < n; ++i)
        if (tp_cum[i] * 10 >= t * npos) p = std::max(p, precision(i));
      ap += p;
    }
    return ap / 11.0;
  }
  std::vector<double> mrec{0.0}, mpre{0.0};
  for (std::size_t i = 0; i < n; ++i) {
    mrec.push_back(static_cast<double>(tp_cum[i]) / static_cast<double>(npos));
    mpre.push_back(precision(i));
  }
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

std::size_t threads_from_env() {
  const char* v = std::getenv("ESSD_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw std::invalid_argument(std::string("ESSD_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

std::vector<Detection> detect(const NetGraph& graph, const WeightStore& weights, const AnchorSet& anchors,
                              const Tensor& image, const EvalConfig& cfg, std::size_t image_id) {
  ForwardPass pass = forward(graph, weights, image);
  const auto raw = decode_predictions(pass.tape.value(pass.conf), pass.tape.value(pass.loc), anchors,
                                      cfg.score_thresh, cfg.top_k, image_id);
  std::vector<Detection> out;
  auto begin = raw.begin();
  while (begin != raw.end()) {
    auto end = std::find_if(begin, raw.end(), [&](const Detection& d) { return d.cls != begin->cls; });
    const auto kept = nms(std::span<const Detection>(&*begin, static_cast<std::size_t>(end - begin)), cfg.nms_thresh);
    out.insert(out.end(), kept.begin(), kept.end());
    begin = end;
  }
  return out;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < report.class_ap.size(); ++c) {
    per_class.push_back({{"class", c},
                         {"name", to_string(static_cast<ShapeClass>(c % kNumShapeClasses))},
                         {"ap", report.class_ap[c] ? nlohmann::json(*report.class_ap[c]) : nlohmann::json()},
                         {"detections", report.class_detections[c]},
                         {"ground_truths", report.class_gts[c]}});
  }
  return {{"per_class", per_class}, {"mAP", report.map}, {"num_images", report.num_images}};
}

EvalReport score_detections(std::span<const Detection> dets, const std::vector<SynthSample>& data,
                            std::size_t num_classes, double iou_thresh, ApMode mode) {
  EvalReport report;
  report.num_images = data.size();
  report.class_ap.resize(num_classes);
  report.class_detections.assign(num_classes, 0);
  report.class_gts.assign(num_classes, 0);
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::vector<Box>> gts(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      for (const auto& g : data[i].gts)
        if (g.label == c) gts[i].push_back(g.box);
    std::vector<Detection> mine;
    for (const auto& d : dets)
      if (d.cls == c) mine.push_back(d);
    report.class_detections[c] = mine.size();
    for (const auto& g : gts) report.class_gts[c] += g.size();
    if (report.class_gts[c] == 0) continue;
    const double ap = average_precision(mine, gts, iou_thresh, mode);
    report.class_ap[c] = ap;
    sum += ap;
    ++counted;
  }
  report.map = counted ? sum / static_cast<double>(counted) : 0.0;
  return report;
}

EvalReport evaluate(const NetGraph& graph, const WeightStore& weights, const std::vector<SynthSample>& data,
                    const EvalConfig& cfg) {
  check_weights(graph, weights);
  const AnchorSet anchors = anchors_for(graph, cfg.anchors);
  std::vector<std::vector<Detection>> per_image(data.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, data.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < data.size(); i += workers)
      per_image[i] = detect(graph, weights, anchors, data[i].image, cfg, i);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  std::vector<Detection> all;
  for (auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  return score_detections(all, data, graph.num_classes(), cfg.iou_thresh, cfg.mode);
}

nlohmann::json to_json(const BenchReport& r) {
  return {{"batch_size", r.batch_size},
          {"input_resolution", std::to_string(r.input_width) + "x" + std::to_string(r.input_height)},
          {"warmup", r.warmup},
          {"timed", r.timed},
          {"mean_latency_ms", r.mean_ms},
          {"median_latency_ms", r.median_ms},
          {"fps", r.fps}};
}

BenchReport bench(const NetGraph& graph, const WeightStore& weights, std::size_t n_warmup, std::size_t n_timed,
                  std::uint64_t seed, const EvalConfig& cfg) {
  if (n_timed == 0) throw std::invalid_argument("bench needs at least one timed run");
  check_weights(graph, weights);
  const FeatureShape in = graph.shape(graph.data_layer());
  if (in.height != in.width) throw std::invalid_argument("bench expects a square input");
  SynthConfig sc;
  sc.image_size = in.height;
  const auto images = synth_dataset(seed, std::min<std::size_t>(n_warmup + n_timed, 16), sc);
  const AnchorSet anchors = anchors_for(graph, cfg.anchors);

  for (std::size_t i = 0; i < n_warmup; ++i) detect(graph, weights, anchors, images[i % images.size()].image, cfg);
  std::vector<double> ms;
  for (std::size_t i = 0; i < n_timed; ++i) {
    const auto& img = images[(n_warmup + i) % images.size()].image;
    const auto t0 = std::chrono::steady_clock::now();
    const auto dets = detect(graph, weights, anchors, img, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  BenchReport r;
  r.input_height = in.height;
  r.input_width = in.width;
  r.warmup = n_warmup;
  r.timed = n_timed;
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  r.median_ms = m % 2 ? sorted[m / 2] : (sorted[m / 2 - 1] + sorted[m / 2]) / 2;
  r.fps = 1000.0 / r.mean_ms;
  return r;
}

}  // namespace essd
