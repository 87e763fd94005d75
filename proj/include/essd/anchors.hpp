#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace essd {

/// Axis-aligned box in normalized image coordinates, center form.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  static Box from_corners(double xmin, double ymin, double xmax, double ymax) {
    return {(xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin};
  }
  double xmin() const { return cx - w / 2; }
  double ymin() const { return cy - h / 2; }
  double xmax() const { return cx + w / 2; }
  double ymax() const { return cy + h / 2; }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }

  bool operator==(const Box&) const = default;
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

struct ScaleSpec {
  double size = 0;                   // box side for ratio 1, as a fraction of the image
  std::vector<double> aspect_ratios;  // w/h
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

/// Default boxes in scale-major, row-major, aspect-ratio-minor order, which
/// is the row order produced by flattening the head outputs.
struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<std::size_t> scale_offsets;  // start of each scale; back() == boxes.size()

  std::size_t size() const { return boxes.size(); }
};

/// Throws std::invalid_argument on empty ratio lists, non-positive ratios or
/// sizes, or sizes that do not increase across scales.
AnchorSet generate_anchors(std::span<const ScaleSpec> scales);

struct GroundTruth {
  Box box;
  std::size_t label = 0;  // object class, 0-based (background excluded)
};

struct AnchorMatch {
  int gt = -1;             // matched ground-truth index, -1 for background
  std::size_t label = 0;   // 0 = background, otherwise class + 1
  double overlap = 0.0;    // IoU with the matched gt
  bool forced = false;     // claimed as a ground truth's best anchor
  std::array<double, 4> target{};  // encoded offsets (positives only)
};

struct MatchResult {
  std::vector<AnchorMatch> anchors;
  std::size_t num_positive() const;
};

struct Variances {
  double cx = 0.1, cy = 0.1, w = 0.2, h = 0.2;
};

/// Stage 1: each ground truth, in order, claims its highest-IoU anchor not
/// yet claimed (lowest anchor index on ties). Stage 2: every remaining anchor
/// whose best IoU reaches `threshold` becomes positive for that ground truth
/// (lowest gt index on ties).
MatchResult match(const AnchorSet& anchors, std::span<const GroundTruth> gts, double threshold = 0.5,
                  const Variances& var = {});

std::array<double, 4> encode(const Box& gt, const Box& anchor, const Variances& var = {});
Box decode(const std::array<double, 4>& offsets, const Box& anchor, const Variances& var = {});

}  // namespace essd
