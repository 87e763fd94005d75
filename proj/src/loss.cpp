#include "essd/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace essd {

template <typename T>
Var softmax_ce(GradTape<T>& tape, Var logits, std::span<const std::size_t> labels) {
  const auto& x = tape.value(logits);
  if (x.rank() != 2 || x.dim(0) != labels.size()) {
    throw ShapeError("softmax_ce expects logits [B, K] with one label per row, got " + to_string(x.shape()));
  }
  std::vector<std::size_t> rows(labels.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Var s = tape.softmax_ce_sum(logits, std::move(rows), {labels.begin(), labels.end()});
  return tape.scale(s, T{1} / static_cast<T>(labels.size()));
}

template <typename T>
Var smooth_l1(GradTape<T>& tape, Var pred, const BasicTensor<T>& target) {
  const auto& p = tape.value(pred);
  if (p.shape() != target.shape()) {
    throw ShapeError("smooth_l1 shape mismatch: " + to_string(p.shape()) + " vs " + to_string(target.shape()));
  }
  if (p.shape().back() != 4) throw ShapeError("smooth_l1 expects rows of 4 offsets");
  std::vector<std::size_t> rows(p.size() / 4);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return tape.smooth_l1_sum(pred, std::move(rows), target.storage());
}

std::vector<std::size_t> mine_hard_negatives(std::span<const double> bg_loss, const MatchResult& match,
                                             const MultiboxConfig& cfg) {
  std::vector<std::size_t> negatives;
  for (std::size_t a = 0; a < match.anchors.size(); ++a)
    if (match.anchors[a].label == 0) negatives.push_back(a);
  const std::size_t pos = match.num_positive();
  std::size_t keep = pos == 0 ? std::min(match.anchors.size(), cfg.fallback_negatives)
                              : static_cast<std::size_t>(std::floor(cfg.neg_pos_ratio * static_cast<double>(pos)));
  keep = std::min(keep, negatives.size());
  std::stable_sort(negatives.begin(), negatives.end(),
                   [&](std::size_t a, std::size_t b) { return bg_loss[a] > bg_loss[b]; });
  negatives.resize(keep);
  std::sort(negatives.begin(), negatives.end());
  return negatives;
}

template <typename T>
MultiboxLoss<T> multibox(GradTape<T>& tape, Var conf, Var loc, std::span<const MatchResult> matches,
                         const MultiboxConfig& cfg) {
  const auto& cv = tape.value(conf);
  const auto& lv = tape.value(loc);
  const std::size_t batch = cv.rank() == 3 ? cv.dim(0) : 1;
  const std::size_t k = cv.shape().back();
  const std::size_t anchors = cv.size() / (batch * k);
  if (matches.size() != batch) {
    throw ShapeError("multibox: " + std::to_string(matches.size()) + " match results for batch of " +
                     std::to_string(batch));
  }
  if (lv.size() != batch * anchors * 4) {
    throw ShapeError("multibox: loc " + to_string(lv.shape()) + " inconsistent with conf " + to_string(cv.shape()));
  }
  std::vector<std::size_t> pos_rows, pos_labels, neg_rows;
  std::vector<T> targets;
  const std::vector<T> bg = ops::row_cross_entropy(cv, 0);
  std::vector<double> bg_image(anchors);
  for (std::size_t n = 0; n < batch; ++n) {
    const auto& m = matches[n];
    if (m.anchors.size() != anchors) {
      throw ShapeError("multibox: match " + std::to_string(n) + " covers " + std::to_string(m.anchors.size()) +
                       " anchors, predictions cover " + std::to_string(anchors));
    }
    for (std::size_t a = 0; a < anchors; ++a) {
      bg_image[a] = static_cast<double>(bg[n * anchors + a]);
      const auto& am = m.anchors[a];
      if (am.label == 0) continue;
      pos_rows.push_back(n * anchors + a);
      pos_labels.push_back(am.label);
      for (double t : am.target) targets.push_back(static_cast<T>(t));
    }
    for (std::size_t a : mine_hard_negatives(bg_image, m, cfg)) neg_rows.push_back(n * anchors + a);
  }

  MultiboxLoss<T> out;
  auto& b = out.breakdown;
  b.num_pos = pos_rows.size();
  b.num_mined_neg = neg_rows.size();
  const std::size_t num_neg = neg_rows.size();
  Var conf_pos = tape.softmax_ce_sum(conf, pos_rows, std::move(pos_labels));
  Var conf_neg = tape.softmax_ce_sum(conf, std::move(neg_rows), std::vector<std::size_t>(num_neg, 0));
  Var loc_loss = tape.smooth_l1_sum(loc, std::move(pos_rows), std::move(targets));
  Var sum = tape.add(tape.add(conf_pos, conf_neg), tape.scale(loc_loss, static_cast<T>(cfg.alpha)));
  const T norm = static_cast<T>(std::max<std::size_t>(b.num_pos, 1));
  out.total = tape.scale(sum, T{1} / norm);
  b.conf_pos = static_cast<double>(tape.value(conf_pos)[0]);
  b.conf_neg = static_cast<double>(tape.value(conf_neg)[0]);
  b.loc = static_cast<double>(tape.value(loc_loss)[0]);
  b.total = static_cast<double>(tape.value(out.total)[0]);
  return out;
}

template Var softmax_ce(GradTape<float>&, Var, std::span<const std::size_t>);
template Var softmax_ce(GradTape<double>&, Var, std::span<const std::size_t>);
template Var smooth_l1(GradTape<float>&, Var, const BasicTensor<float>&);
template Var smooth_l1(GradTape<double>&, Var, const BasicTensor<double>&);
template MultiboxLoss<float> multibox(GradTape<float>&, Var, Var, std::span<const MatchResult>,
                                      const MultiboxConfig&);
template MultiboxLoss<double> multibox(GradTape<double>&, Var, Var, std::span<const MatchResult>,
                                       const MultiboxConfig&);

}  // namespace essd
