#include "essd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace essd {

std::string_view to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::circle: return "circle";
    case ShapeClass::square: return "square";
    case ShapeClass::triangle: return "triangle";
  }
  return "unknown";
}

std::vector<std::uint8_t> render_mask(ShapeClass cls, const Footprint& fp, std::size_t image_size) {
  if (fp.side == 0 || fp.x0 + fp.side > image_size || fp.y0 + fp.side > image_size) {
    throw std::invalid_argument("shape footprint does not fit the image");
  }
  std::vector<std::uint8_t> mask(image_size * image_size, 0);
  const double side = static_cast<double>(fp.side);
  const double half = side / 2;
  for (std::size_t r = 0; r < fp.side; ++r) {
    for (std::size_t c = 0; c < fp.side; ++c) {
      // Pixel centre relative to the footprint centre.
      const double dx = static_cast<double>(c) + 0.5 - half;
      const double dy = static_cast<double>(r) + 0.5 - half;
      bool inside = false;
      switch (cls) {
        case ShapeClass::square:
          inside = true;
          break;
        case ShapeClass::circle:
          inside = dx * dx + dy * dy <= half * half;
          break;
        case ShapeClass::triangle:
          // Apex at the top centre; row r spans a half-width of (r+1)/2.
          inside = std::abs(dx) <= (static_cast<double>(r) + 1) / 2;
          break;
      }
      if (inside) mask[(fp.y0 + r) * image_size + fp.x0 + c] = 1;
    }
  }
  return mask;
}

SynthSample synth_sample(std::uint64_t seed, std::size_t index, const SynthConfig& cfg) {
  const std::size_t size = cfg.image_size;
  if (size < 8) throw std::invalid_argument("synthetic images need at least 8 pixels per side");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5EEDu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SynthSample sample{Tensor({3, size, size}), {}};
  // Textured background: dark base colour plus per-pixel noise.
  double base[3];
  for (double& b : base) b = 0.05 + 0.25 * unit(rng);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < size * size; ++i)
      sample.image[ch * size * size + i] = static_cast<float>(base[ch] + 0.1 * (unit(rng) - 0.5));

  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_shapes, cfg.max_shapes);
  const std::size_t count = count_dist(rng);
  for (std::size_t s = 0; s < count; ++s) {
    const auto cls = static_cast<ShapeClass>(std::uniform_int_distribution<std::size_t>(0, kNumShapeClasses - 1)(rng));
    const bool small = unit(rng) < cfg.small_share;
    const double lo = small ? cfg.min_fraction : cfg.small_cutoff;
    const double hi = small ? cfg.small_cutoff : cfg.max_fraction;
    bool ok = false;
    Footprint fp;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      const double frac = lo + (hi - lo) * unit(rng);
      fp.side = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(frac * static_cast<double>(size))));
      fp.x0 = std::uniform_int_distribution<std::size_t>(0, size - fp.side)(rng);
      fp.y0 = std::uniform_int_distribution<std::size_t>(0, size - fp.side)(rng);
      const Box box = Box::from_corners(static_cast<double>(fp.x0) / static_cast<double>(size),
                                        static_cast<double>(fp.y0) / static_cast<double>(size),
                                        static_cast<double>(fp.x0 + fp.side) / static_cast<double>(size),
                                        static_cast<double>(fp.y0 + fp.side) / static_cast<double>(size));
      ok = std::none_of(sample.gts.begin(), sample.gts.end(),
                        [&](const GroundTruth& g) {
                          const double ix = std::min(g.box.xmax(), box.xmax()) - std::max(g.box.xmin(), box.xmin());
                          const double iy = std::min(g.box.ymax(), box.ymax()) - std::max(g.box.ymin(), box.ymin());
                          const double inter = ix > 0 && iy > 0 ? ix * iy : 0.0;
                          return iou(g.box, box) > cfg.max_pair_iou ||
                                 inter > cfg.max_cover * std::min(g.box.area(), box.area());
                        });
      if (ok) sample.gts.push_back({box, static_cast<std::size_t>(cls)});
    }
    if (!ok) continue;
    double color[3];
    for (double& c : color) c = 0.55 + 0.45 * unit(rng);
    const auto mask = render_mask(cls, fp, size);
    for (std::size_t i = 0; i < size * size; ++i) {
      if (!mask[i]) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) sample.image[ch * size * size + i] = static_cast<float>(color[ch]);
    }
  }
  // Centre pixel values around zero.
  for (float& v : sample.image.storage()) v -= 0.5f;
  return sample;
}

std::vector<SynthSample> synth_dataset(std::uint64_t seed, std::size_t n_images, const SynthConfig& cfg) {
  if (n_images == 0) throw std::invalid_argument("synthetic dataset needs at least one image");
  std::vector<SynthSample> out;
  out.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) out.push_back(synth_sample(seed, i, cfg));
  return out;
}

std::vector<SynthSample> heldout_dataset(std::uint64_t seed, std::size_t n_images, const SynthConfig& cfg) {
  if (n_images == 0) throw std::invalid_argument("synthetic dataset needs at least one image");
  std::vector<SynthSample> out;
  out.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) out.push_back(synth_sample(seed, kHeldoutFirstIndex + i, cfg));
  return out;
}

Tensor stack_images(const std::vector<SynthSample>& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty selection");
  const Shape& s = data.at(indices[0]).image.shape();
  Tensor out({indices.size(), s[0], s[1], s[2]});
  const std::size_t block = element_count(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = data.at(indices[i]).image;
    std::copy(img.storage().begin(), img.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * block));
  }
  return out;
}

}  // namespace essd
