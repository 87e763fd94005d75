#include "essd/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace essd {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.xmax(), b.xmax()) - std::max(a.xmin(), b.xmin());
  const double ih = std::min(a.ymax(), b.ymax()) - std::max(a.ymin(), b.ymin());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

AnchorSet generate_anchors(std::span<const ScaleSpec> scales) {
  AnchorSet set;
  double prev = 0;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const auto& spec = scales[s];
    if (spec.aspect_ratios.empty()) {
      throw std::invalid_argument("scale " + std::to_string(s) + " has no aspect ratios");
    }
    if (!(spec.size > 0) || spec.grid_h == 0 || spec.grid_w == 0) {
      throw std::invalid_argument("scale " + std::to_string(s) + " needs a positive size and grid");
    }
    if (s > 0 && !(spec.size > prev)) throw std::invalid_argument("anchor sizes must increase across scales");
    prev = spec.size;
    set.scale_offsets.push_back(set.boxes.size());
    for (std::size_t i = 0; i < spec.grid_h; ++i) {
      for (std::size_t j = 0; j < spec.grid_w; ++j) {
        const double cx = (static_cast<double>(j) + 0.5) / static_cast<double>(spec.grid_w);
        const double cy = (static_cast<double>(i) + 0.5) / static_cast<double>(spec.grid_h);
        for (double r : spec.aspect_ratios) {
          if (!(r > 0)) throw std::invalid_argument("aspect ratios must be positive");
          const double w = spec.size * std::sqrt(r), h = spec.size / std::sqrt(r);
          const double x0 = std::clamp(cx - w / 2, 0.0, 1.0), x1 = std::clamp(cx + w / 2, 0.0, 1.0);
          const double y0 = std::clamp(cy - h / 2, 0.0, 1.0), y1 = std::clamp(cy + h / 2, 0.0, 1.0);
          set.boxes.push_back(Box::from_corners(x0, y0, x1, y1));
        }
      }
    }
  }
  set.scale_offsets.push_back(set.boxes.size());
  return set;
}

std::size_t MatchResult::num_positive() const {
  return static_cast<std::size_t>(
      std::count_if(anchors.begin(), anchors.end(), [](const AnchorMatch& m) { return m.label != 0; }));
}

namespace {

void check_domain(const Box& b, const char* what, std::size_t index) {
  constexpr double kSlack = 1e-9;
  if (!b.valid() || b.xmin() < -kSlack || b.ymin() < -kSlack || b.xmax() > 1 + kSlack || b.ymax() > 1 + kSlack) {
    throw std::invalid_argument(std::string(what) + " " + std::to_string(index) +
                                " is not a valid box inside the unit square");
  }
}

}  // namespace

MatchResult match(const AnchorSet& anchors, std::span<const GroundTruth> gts, double threshold,
                  const Variances& var) {
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("match threshold must lie in (0, 1)");
  const std::size_t na = anchors.size(), ng = gts.size();
  for (std::size_t a = 0; a < na; ++a) check_domain(anchors.boxes[a], "anchor", a);
  for (std::size_t g = 0; g < ng; ++g) check_domain(gts[g].box, "ground truth", g);

  std::vector<double> overlap(na * ng);
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t g = 0; g < ng; ++g) overlap[a * ng + g] = iou(anchors.boxes[a], gts[g].box);

  MatchResult result;
  result.anchors.resize(na);
  auto assign = [&](std::size_t a, std::size_t g, bool forced) {
    auto& m = result.anchors[a];
    m.gt = static_cast<int>(g);
    m.label = gts[g].label + 1;
    m.overlap = overlap[a * ng + g];
    m.forced = forced;
    m.target = encode(gts[g].box, anchors.boxes[a], var);
  };

  for (std::size_t g = 0; g < ng && na > 0; ++g) {
    std::size_t best = na;
    for (std::size_t a = 0; a < na; ++a) {
      if (result.anchors[a].forced) continue;
      if (best == na || overlap[a * ng + g] > overlap[best * ng + g]) best = a;
    }
    if (best != na) assign(best, g, true);
  }
  for (std::size_t a = 0; a < na; ++a) {
    if (result.anchors[a].forced || ng == 0) continue;
    std::size_t best = 0;
    for (std::size_t g = 1; g < ng; ++g)
      if (overlap[a * ng + g] > overlap[a * ng + best]) best = g;
    if (overlap[a * ng + best] >= threshold) assign(a, best, false);
  }
  return result;
}

std::array<double, 4> encode(const Box& gt, const Box& anchor, const Variances& var) {
  if (!gt.valid() || !anchor.valid()) throw std::invalid_argument("encode needs boxes with positive extents");
  return {(gt.cx - anchor.cx) / anchor.w / var.cx, (gt.cy - anchor.cy) / anchor.h / var.cy,
          std::log(gt.w / anchor.w) / var.w, std::log(gt.h / anchor.h) / var.h};
}

Box decode(const std::array<double, 4>& o, const Box& anchor, const Variances& var) {
  if (!anchor.valid()) throw std::invalid_argument("decode needs an anchor with positive extents");
  return {anchor.cx + o[0] * var.cx * anchor.w, anchor.cy + o[1] * var.cy * anchor.h,
          anchor.w * std::exp(o[2] * var.w), anchor.h * std::exp(o[3] * var.h)};
}

}  // namespace essd
