#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "essd/anchors.hpp"
#include "essd/tensor.hpp"

namespace essd {

enum class ShapeClass : std::size_t { circle = 0, square = 1, triangle = 2 };
inline constexpr std::size_t kNumShapeClasses = 3;
std::string_view to_string(ShapeClass c);

struct SynthSample {
  Tensor image;  // [3, H, W]
  std::vector<GroundTruth> gts;
};

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  double min_fraction = 0.08;   // shape side relative to image side
  double max_fraction = 0.45;
  double small_cutoff = 0.20;   // sides below this count as small
  double small_share = 0.5;     // probability of drawing a small shape
  double max_pair_iou = 0.7;
  // Largest fraction of either box another box may cover, so no shape is
  // hidden behind a later one.
  double max_cover = 0.25;
};

/// Pixel-aligned square footprint of one shape: columns [x0, x0+side),
/// rows [y0, y0+side).
struct Footprint {
  std::size_t x0 = 0, y0 = 0, side = 0;
};

/// Binary coverage mask (row-major, image_size^2) of one shape. The tight
/// bounding box of the covered pixels is exactly the footprint.
std::vector<std::uint8_t> render_mask(ShapeClass cls, const Footprint& fp, std::size_t image_size);

/// Deterministic in (seed, index): sample i only depends on the seed and i.
SynthSample synth_sample(std::uint64_t seed, std::size_t index, const SynthConfig& cfg = {});
std::vector<SynthSample> synth_dataset(std::uint64_t seed, std::size_t n_images, const SynthConfig& cfg = {});

/// Held-out images draw indices from here on, disjoint from any train split.
inline constexpr std::size_t kHeldoutFirstIndex = std::size_t{1} << 30;
std::vector<SynthSample> heldout_dataset(std::uint64_t seed, std::size_t n_images, const SynthConfig& cfg = {});

/// Stacks images [3,H,W] of the selected samples into [N,3,H,W].
Tensor stack_images(const std::vector<SynthSample>& data, const std::vector<std::size_t>& indices);

}  // namespace essd
