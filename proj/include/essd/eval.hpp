#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "essd/anchors.hpp"
#include "essd/dataset.hpp"
#include "essd/graph.hpp"
#include "essd/model.hpp"
#include "essd/train.hpp"

namespace essd {

struct Detection {
  std::size_t image_id = 0;
  std::size_t cls = 0;  // object class, 0-based
  double score = 0;
  Box box;
};

nlohmann::json to_json(const Detection& det);

/// conf logits [A, C+1] (or [1, A, C+1]) and loc offsets [A, 4]. Per object
/// class: softmax score, keep scores above `score_thresh`, decode boxes, then
/// the top_k by score (ties by anchor index). Output is class-major.
std::vector<Detection> decode_predictions(const Tensor& conf, const Tensor& loc, const AnchorSet& anchors,
                                          double score_thresh, std::size_t top_k, std::size_t image_id = 0,
                                          const Variances& var = {});

/// Greedy suppression within one class. Returns kept indices into `dets` in
/// the order they were kept.
std::vector<std::size_t> nms_indices(std::span<const Detection> dets, double iou_thresh);
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh);

enum class ApMode { voc2007_11point, area };

/// AP of one class. `gts[i]` lists that class's boxes in image i; detection
/// image ids index into it.
double average_precision(std::span<const Detection> dets, const std::vector<std::vector<Box>>& gts,
                         double iou_thresh = 0.5, ApMode mode = ApMode::voc2007_11point);

struct EvalConfig {
  double score_thresh = 0.01;
  double nms_thresh = 0.45;
  std::size_t top_k = 200;
  double iou_thresh = 0.5;
  ApMode mode = ApMode::voc2007_11point;
  AnchorConfig anchors;
  std::size_t threads = 1;
};

/// ESSD_THREADS, default 1.
std::size_t threads_from_env();

/// Forward pass, decode and per-class NMS for one image [3, H, W].
std::vector<Detection> detect(const NetGraph& graph, const WeightStore& weights, const AnchorSet& anchors,
                              const Tensor& image, const EvalConfig& cfg, std::size_t image_id = 0);

struct EvalReport {
  std::vector<std::optional<double>> class_ap;  // empty for classes without ground truth
  std::vector<std::size_t> class_detections;
  std::vector<std::size_t> class_gts;
  double map = 0;
  std::size_t num_images = 0;
};

nlohmann::json to_json(const EvalReport& report);

/// AP per class over already computed detections.
EvalReport score_detections(std::span<const Detection> dets, const std::vector<SynthSample>& data,
                            std::size_t num_classes, double iou_thresh = 0.5, ApMode mode = ApMode::voc2007_11point);

EvalReport evaluate(const NetGraph& graph, const WeightStore& weights, const std::vector<SynthSample>& data,
                    const EvalConfig& cfg = {});

struct BenchReport {
  std::size_t batch_size = 1;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::size_t warmup = 0;
  std::size_t timed = 0;
  double mean_ms = 0;
  double median_ms = 0;
  double fps = 0;
};

nlohmann::json to_json(const BenchReport& report);

/// Sequential single-image forward + decode + NMS timings on synthetic
/// images; image synthesis is outside the timed region.
BenchReport bench(const NetGraph& graph, const WeightStore& weights, std::size_t n_warmup, std::size_t n_timed,
                  std::uint64_t seed = 0, const EvalConfig& cfg = {});

}  // namespace essd
