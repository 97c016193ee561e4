#pragma once

// Layer-by-layer prune-and-reconstruct. For each layer in network order and
// each site (attn_out, then ffn_down) the calibration batch is forwarded
// through the model as updated so far, the site input is captured, a mask is
// chosen, the plan is computed, and surgery installs the plan's weights before
// moving on.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/criteria.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/metrics.hpp"
#include "prunekit/model.hpp"
#include "prunekit/reconstruct.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

enum class SiteSelection { heads, neurons, both };

inline SiteSelection parse_site_selection(const std::string& s) {
  if (s == "heads") return SiteSelection::heads;
  if (s == "neurons") return SiteSelection::neurons;
  if (s == "both") return SiteSelection::both;
  throw ValidationError("unknown site selection '" + s + "'");
}

inline const char* site_selection_name(SiteSelection s) {
  switch (s) {
    case SiteSelection::heads: return "heads";
    case SiteSelection::neurons: return "neurons";
    case SiteSelection::both: return "both";
  }
  return "?";
}

struct PruneConfig {
  double head_keep_ratio = 1.0;
  double neuron_keep_ratio = 1.0;
  Criterion criterion = Criterion::magnitude;
  ReconMethod method = ReconMethod::liar;
  bool global = false;
  std::uint64_t seed = 0;
  std::size_t snip_tokens = 5000;

  static PruneConfig for_sites(SiteSelection sel, double keep_ratio) {
    PruneConfig c;
    if (sel != SiteSelection::neurons) c.head_keep_ratio = keep_ratio;
    if (sel != SiteSelection::heads) c.neuron_keep_ratio = keep_ratio;
    return c;
  }

  double ratio(Site s) const { return s == Site::attn_out ? head_keep_ratio : neuron_keep_ratio; }

  void validate() const {
    for (double r : {head_keep_ratio, neuron_keep_ratio})
      if (!(r > 0.0 && r <= 1.0)) throw ValidationError("keep ratio must be in (0, 1]");
    if (snip_tokens == 0) throw ValidationError("snip_tokens must be >= 1");
  }
};

struct LayerSiteRecord {
  std::size_t layer = 0;
  Site site = Site::ffn_down;
  ChannelMask mask;
  std::optional<GroupScores> scores;  // absent when nothing was to be pruned
  ReconPlan plan;
  double layer_l2_error = 0.0;  // dense vs reconstructed, calibration set
  double naive_l2_error = 0.0;  // ||X_m W_m||^2
  std::optional<std::vector<double>> channel_errors;  // per dropped channel
};

struct PipelineResult {
  ToyTransformer model;
  std::vector<LayerSiteRecord> records;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

inline constexpr Site kSiteOrder[] = {Site::attn_out, Site::ffn_down};

inline bool check_constraint(const ToyTransformer& model, std::size_t budget) { return param_count(model) <= budget; }

/// Whole sequences drawn (seeded shuffle) until the token budget is reached;
/// at least one sequence.
inline TokenBatch snip_subset(const TokenBatch& calib, std::size_t max_tokens, std::uint64_t seed) {
  if (calib.token_count() <= max_tokens) return calib;
  std::vector<std::size_t> order(calib.n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(seed, 17));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t count = std::max<std::size_t>(1, max_tokens / calib.t);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  TokenBatch out{count, calib.t, {}, {}};
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = static_cast<std::ptrdiff_t>(order[i] * calib.t);
    const auto e = s + static_cast<std::ptrdiff_t>(calib.t);
    out.tokens.insert(out.tokens.end(), calib.tokens.begin() + s, calib.tokens.begin() + e);
    out.targets.insert(out.targets.end(), calib.targets.begin() + s, calib.targets.begin() + e);
  }
  return out;
}

namespace detail {

inline std::size_t slot(std::size_t layer, Site site) { return layer * 2 + (site == Site::attn_out ? 0 : 1); }

inline GroupScores score_site(const ToyTransformer& model, Criterion criterion, std::size_t layer, Site site,
                              const Batch3* activations, const TokenBatch* snip_batch) {
  const Linear& lin = site_linear(model, layer, site);
  const std::size_t gs = site_group_size(model, site);
  GroupScores s;
  switch (criterion) {
    case Criterion::magnitude: s = magnitude_scores(lin.weight, gs); break;
    case Criterion::fluctuation: s = fluctuation_scores(*activations, lin.weight, gs); break;
    case Criterion::snip: s = snip_scores(model, *snip_batch, site, layer); break;
  }
  s.layer = layer;
  s.site = site;
  return s;
}

}  // namespace detail

/// Prunes and reconstructs every layer. See the header comment for ordering.
/// SNIP scores come from the dense model (gates at 1); magnitude and
/// fluctuation are scored on the propagated state unless `global` is set, in
/// which case every criterion is scored on the dense model up front.
inline PipelineResult run_pipeline(const ToyTransformer& dense, const TokenBatch& calib, const PruneConfig& config) {
  config.validate();
  validate_model(dense);
  calib.validate(dense.config, config.criterion == Criterion::snip);
  const std::size_t layers = dense.blocks.size();

  PipelineResult result;
  result.model = dense;
  result.params_before = param_count(dense);

  std::vector<std::optional<GroupScores>> pre_scores(layers * 2);
  std::vector<std::optional<ChannelMask>> pre_masks(layers * 2);
  const bool any_pruning = config.head_keep_ratio < 1.0 || config.neuron_keep_ratio < 1.0;

  if (any_pruning && (config.criterion == Criterion::snip || config.global)) {
    std::optional<TokenBatch> snip_batch;
    if (config.criterion == Criterion::snip) snip_batch = snip_subset(calib, config.snip_tokens, config.seed);
    std::optional<HiddenTrace> trace;
    if (config.criterion == Criterion::fluctuation) trace = forward(dense, calib).trace;
    for (std::size_t l = 0; l < layers; ++l)
      for (Site site : kSiteOrder) {
        if (config.ratio(site) >= 1.0) continue;
        try {
          pre_scores[detail::slot(l, site)] = detail::score_site(
              dense, config.criterion, l, site, trace ? &trace->at(l, site) : nullptr,
              snip_batch ? &*snip_batch : nullptr);
        } catch (const Error& e) {
          throw Error("layer " + std::to_string(l) + " " + site_name(site) + ": " + e.what(), e.exit_code());
        }
      }
    if (config.global) {
      for (Site site : kSiteOrder) {
        if (config.ratio(site) >= 1.0) continue;
        std::vector<GroupScores> group;
        for (std::size_t l = 0; l < layers; ++l) group.push_back(*pre_scores[detail::slot(l, site)]);
        auto masks = select_masks_global(group, config.ratio(site));
        for (std::size_t l = 0; l < layers; ++l) pre_masks[detail::slot(l, site)] = std::move(masks[l]);
      }
    }
  }

  for (std::size_t l = 0; l < layers; ++l) {
    for (Site site : kSiteOrder) {
      try {
        const HiddenTrace trace = forward(result.model, calib).trace;
        const Batch3& x = trace.at(l, site);
        const Linear& lin = site_linear(result.model, l, site);
        const std::size_t gs = site_group_size(result.model, site);

        LayerSiteRecord rec;
        rec.layer = l;
        rec.site = site;
        if (config.ratio(site) >= 1.0) {
          rec.mask = ChannelMask::all_keep(l, site, lin.weight.rows(), gs);
        } else if (pre_masks[detail::slot(l, site)]) {
          rec.scores = pre_scores[detail::slot(l, site)];
          rec.mask = *pre_masks[detail::slot(l, site)];
        } else {
          rec.scores = pre_scores[detail::slot(l, site)];
          if (!rec.scores) rec.scores = detail::score_site(result.model, config.criterion, l, site, &x, nullptr);
          rec.mask = select_mask(*rec.scores, config.ratio(site));
        }
        rec.mask.validate(lin.weight.rows());

        const Matrix xf = x.flatten();
        const SplitView view = split(xf, lin.weight, rec.mask);
        rec.plan = reconstruct(config.method, view, lin.bias);

        const Matrix dense_out = layer_output(xf, lin.weight, lin.bias);
        rec.layer_l2_error = layer_l2_error(dense_out, layer_output(view.x_u, rec.plan.w_new, rec.plan.b_new));
        rec.naive_l2_error = view.dropped.empty() ? 0.0 : frobenius_sq(matmul(view.x_m, view.w_m));
        if (auto est = masked_input_estimate(view, rec.plan)) rec.channel_errors = channel_recon_error(*est, view.x_m);

        result.model = apply_surgery(result.model, rec.mask);
        install_weights(result.model, l, site, rec.plan.w_new, rec.plan.b_new);
        result.records.push_back(std::move(rec));
      } catch (const Error& e) {
        throw Error("layer " + std::to_string(l) + " " + site_name(site) + ": " + e.what(), e.exit_code());
      }
    }
  }
  result.params_after = param_count(result.model);
  return result;
}

}  // namespace prunekit
