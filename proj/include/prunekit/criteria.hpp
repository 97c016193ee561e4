#pragma once

// Group importance scores and budgeted keep-mask selection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/linalg.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

enum class Criterion { magnitude, snip, fluctuation };

inline const char* criterion_name(Criterion c) {
  switch (c) {
    case Criterion::magnitude: return "magnitude";
    case Criterion::snip: return "snip";
    case Criterion::fluctuation: return "fluctuation";
  }
  return "?";
}

inline Criterion parse_criterion(const std::string& s) {
  if (s == "magnitude") return Criterion::magnitude;
  if (s == "snip") return Criterion::snip;
  if (s == "fluctuation") return Criterion::fluctuation;
  throw ValidationError("unknown criterion '" + s + "'");
}

struct GroupScores {
  Site site = Site::ffn_down;
  std::size_t layer = 0;
  std::size_t group_size = 1;
  Criterion criterion = Criterion::magnitude;
  std::vector<double> scores;
};

namespace detail {

inline void check_group_size(std::size_t channels, std::size_t group_size) {
  if (group_size == 0 || channels % group_size != 0)
    throw ValidationError("group size " + std::to_string(group_size) + " does not divide " +
                          std::to_string(channels) + " channels");
}

}  // namespace detail

/// s_k = sum_i W[k,i]^2 per input channel of the consuming matrix, summed per group.
inline GroupScores magnitude_scores(const Matrix& w, std::size_t group_size) {
  detail::check_group_size(w.rows(), group_size);
  GroupScores s;
  s.group_size = group_size;
  s.criterion = Criterion::magnitude;
  s.scores.assign(w.rows() / group_size, 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k) {
    double acc = 0.0;
    for (double v : w.row(k)) acc += v * v;
    s.scores[k / group_size] += acc;
  }
  return s;
}

/// Normalized |g_k|. All-zero gradients give uniform scores.
inline std::vector<double> normalize_abs(std::span<const double> grads) {
  std::vector<double> out(grads.size());
  double total = 0.0;
  for (double g : grads) total += std::abs(g);
  for (std::size_t i = 0; i < grads.size(); ++i)
    out[i] = total > 0.0 ? std::abs(grads[i]) / total : 1.0 / static_cast<double>(grads.size());
  return out;
}

inline GroupScores snip_scores(const ToyTransformer& model, const TokenBatch& batch, Site site, std::size_t layer) {
  GroupScores s;
  s.site = site;
  s.layer = layer;
  s.group_size = site_group_size(model, site);
  s.criterion = Criterion::snip;
  s.scores = normalize_abs(loss_and_mask_grads(model, batch, site, layer).grads);
  return s;
}

/// Variance of channel k over all tokens times ||W row k||^2, summed per group.
inline GroupScores fluctuation_scores(const Batch3& x, const Matrix& w, std::size_t group_size) {
  if (x.c() != w.rows()) throw ValidationError("activation channels != weight rows");
  detail::check_group_size(w.rows(), group_size);
  const Matrix var = column_variances(x.flatten());
  GroupScores s;
  s.group_size = group_size;
  s.criterion = Criterion::fluctuation;
  s.scores.assign(w.rows() / group_size, 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k) {
    double norm = 0.0;
    for (double v : w.row(k)) norm += v * v;
    s.scores[k / group_size] += var(0, k) * norm;
  }
  return s;
}

/// ceil(keep_ratio * groups), at least 1. The small offset keeps products like
/// (2/3) * 3 from rounding up past the intended count.
inline std::size_t kept_group_count(double keep_ratio, std::size_t groups) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ValidationError("keep_ratio must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(groups) - 1e-9));
  return std::clamp<std::size_t>(k, 1, groups);
}

// Group indices sorted by descending score, ties by ascending index.
inline std::vector<std::size_t> rank_groups(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

inline ChannelMask mask_from_groups(const GroupScores& s, const std::vector<bool>& group_keep) {
  ChannelMask m{s.layer, s.site, s.group_size, std::vector<bool>(group_keep.size() * s.group_size)};
  for (std::size_t g = 0; g < group_keep.size(); ++g)
    for (std::size_t i = 0; i < s.group_size; ++i) m.keep[g * s.group_size + i] = group_keep[g];
  return m;
}

/// Keeps the ceil(keep_ratio * n) highest-scoring groups.
inline ChannelMask select_mask(const GroupScores& s, double keep_ratio) {
  if (s.scores.empty()) throw ValidationError("no groups to select from");
  const std::size_t k = kept_group_count(keep_ratio, s.scores.size());
  const auto order = rank_groups(s.scores);
  std::vector<bool> keep(s.scores.size(), false);
  for (std::size_t i = 0; i < k; ++i) keep[order[i]] = true;
  return mask_from_groups(s, keep);
}

/// Ranks every group of one site type model-wide and keeps the global top
/// ceil(keep_ratio * total). A layer left with nothing keeps its best group.
inline std::vector<ChannelMask> select_masks_global(const std::vector<GroupScores>& per_layer, double keep_ratio) {
  struct Entry {
    double score;
    std::size_t layer_slot;
    std::size_t group;
  };
  std::vector<Entry> all;
  for (std::size_t i = 0; i < per_layer.size(); ++i)
    for (std::size_t g = 0; g < per_layer[i].scores.size(); ++g) all.push_back({per_layer[i].scores[g], i, g});
  if (all.empty()) throw ValidationError("no groups to select from");
  const std::size_t k = kept_group_count(keep_ratio, all.size());
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> keep;
  for (const auto& s : per_layer) keep.emplace_back(s.scores.size(), false);
  for (std::size_t i = 0; i < k; ++i) keep[all[i].layer_slot][all[i].group] = true;

  std::vector<ChannelMask> masks;
  for (std::size_t i = 0; i < per_layer.size(); ++i) {
    if (std::none_of(keep[i].begin(), keep[i].end(), [](bool b) { return b; }))
      keep[i][rank_groups(per_layer[i].scores).front()] = true;
    masks.push_back(mask_from_groups(per_layer[i], keep[i]));
  }
  return masks;
}

}  // namespace prunekit
