#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "essd/anchors.hpp"
#include "essd/tape.hpp"

namespace essd {

struct LossBreakdown {
  double total = 0;
  double conf_pos = 0;
  double conf_neg = 0;
  double loc = 0;
  std::size_t num_pos = 0;
  std::size_t num_mined_neg = 0;
};

struct MultiboxConfig {
  double neg_pos_ratio = 3.0;
  double alpha = 1.0;
  // Negatives mined per image when that image has no positives.
  std::size_t fallback_negatives = 8;
};

/// Mean softmax cross entropy over the rows of logits [B, K].
template <typename T>
Var softmax_ce(GradTape<T>& tape, Var logits, std::span<const std::size_t> labels);

/// Summed smooth-L1 between pred and target, both [P, 4].
template <typename T>
Var smooth_l1(GradTape<T>& tape, Var pred, const BasicTensor<T>& target);

/// Anchors kept as hard negatives for one image: background anchors ranked by
/// background cross entropy, descending, ties by anchor index; the top
/// min(ratio * num_pos, available) are kept (min(A, fallback) when the image
/// has no positives). `bg_loss` holds one value per anchor.
std::vector<std::size_t> mine_hard_negatives(std::span<const double> bg_loss, const MatchResult& match,
                                             const MultiboxConfig& cfg);

template <typename T>
struct MultiboxLoss {
  Var total;
  LossBreakdown breakdown;
};

/// conf [N, A, C+1] and loc [N, A, 4] (or [A, C+1] / [A, 4] with a single
/// match). Positives contribute cross entropy and smooth-L1 on encoded
/// offsets; mined negatives contribute background cross entropy; the sum is
/// normalized by the positive count over the whole batch.
template <typename T>
MultiboxLoss<T> multibox(GradTape<T>& tape, Var conf, Var loc, std::span<const MatchResult> matches,
                         const MultiboxConfig& cfg = {});

}  // namespace essd
