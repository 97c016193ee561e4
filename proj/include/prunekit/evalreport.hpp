#pragma once

// Run reports (JSON), sweep tables (CSV + JSON) and the full-factorial sweep.
// The report schema lives in docs/report_schema.json.

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "prunekit/criteria.hpp"
#include "prunekit/metrics.hpp"
#include "prunekit/model.hpp"
#include "prunekit/pipeline.hpp"
#include "prunekit/reconstruct.hpp"

namespace prunekit {

inline constexpr const char* kRunReportSchema = "prunekit-run-report/1";
inline constexpr const char* kEvalReportSchema = "prunekit-eval-report/1";
inline constexpr const char* kProxyNote =
    "output_deviation and perplexity are proxies for downstream task metrics";

// +inf is written as the string "inf".
inline nlohmann::json json_number(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  if (!std::isfinite(v)) throw NumericError("cannot serialize non-finite value");
  return v;
}

inline std::string format_double(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

struct ErrorSummary {
  double mean = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

inline ErrorSummary summarize(std::span<const double> eps) {
  ErrorSummary s;
  s.count = eps.size();
  if (eps.empty()) return s;
  double sum = 0.0;
  for (double e : eps) {
    sum += e;
    s.max = std::max(s.max, e);
  }
  s.mean = sum / static_cast<double>(eps.size());
  return s;
}

struct EndToEnd {
  std::string token_set;  // "calibration" or "eval"
  double output_deviation = 0.0;
  double cross_entropy = 0.0;
  double dense_cross_entropy = 0.0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

struct RunReport {
  PruneConfig config;
  SiteSelection sites = SiteSelection::both;
  std::size_t calib_n = 0;
  std::size_t calib_t = 0;
  std::vector<LayerSiteRecord> records;
  EndToEnd end_to_end;
  ToyTransformer dense_shape;  // for before/after width counts
  ToyTransformer pruned_shape;
  std::optional<double> wall_clock_seconds;

  double total_layer_l2() const {
    double t = 0.0;
    for (const auto& r : records) t += r.layer_l2_error;
    return t;
  }
  double total_naive_l2() const {
    double t = 0.0;
    for (const auto& r : records) t += r.naive_l2_error;
    return t;
  }
  // Channel-weighted mean of the per-channel relative error over every dropped channel, if
  // the method has an input estimate.
  std::optional<double> mean_channel_error() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
      if (!r.channel_errors) return std::nullopt;
      for (double e : *r.channel_errors) sum += e;
      n += r.channel_errors->size();
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

inline RunReport build_run_report(const ToyTransformer& dense, const PipelineResult& result, const PruneConfig& config,
                                  SiteSelection sites, const TokenBatch& calib, const TokenBatch& tokens,
                                  const std::string& token_set) {
  RunReport r;
  r.config = config;
  r.sites = sites;
  r.calib_n = calib.n;
  r.calib_t = calib.t;
  r.records = result.records;
  r.dense_shape = dense;
  r.pruned_shape = result.model;
  r.end_to_end.token_set = token_set;
  r.end_to_end.output_deviation = end_to_end_deviation(result.model, dense, tokens);
  r.end_to_end.cross_entropy = eval_cross_entropy(result.model, tokens);
  r.end_to_end.dense_cross_entropy = eval_cross_entropy(dense, tokens);
  r.end_to_end.params_before = result.params_before;
  r.end_to_end.params_after = result.params_after;
  return r;
}

inline nlohmann::json to_json(const RunReport& r) {
  using nlohmann::json;
  json j;
  j["schema"] = kRunReportSchema;
  j["config"] = {{"criterion", criterion_name(r.config.criterion)},
                 {"method", method_name(r.config.method)},
                 {"sites", site_selection_name(r.sites)},
                 {"head_keep_ratio", r.config.head_keep_ratio},
                 {"neuron_keep_ratio", r.config.neuron_keep_ratio},
                 {"global", r.config.global},
                 {"seed", r.config.seed},
                 {"snip_tokens", r.config.snip_tokens},
                 {"calib_n", r.calib_n},
                 {"calib_t", r.calib_t}};
  json layers = json::array();
  for (const auto& rec : r.records) {
    json l;
    l["layer"] = rec.layer;
    l["site"] = site_name(rec.site);
    l["groups_total"] = rec.mask.group_count();
    l["kept_groups"] = rec.mask.kept_groups();
    l["dropped_groups"] = rec.mask.group_count() - rec.mask.kept_groups();
    l["kept_channels"] = rec.mask.kept_indices().size();
    l["dropped_channels"] = rec.mask.dropped_indices().size();
    l["layer_l2_error"] = json_number(rec.layer_l2_error);
    l["naive_l2_error"] = json_number(rec.naive_l2_error);
    if (rec.channel_errors) {
      const auto s = summarize(*rec.channel_errors);
      l["channel_error_mean"] = json_number(s.mean);
      l["channel_error_max"] = json_number(s.max);
    } else {
      l["channel_error_mean"] = nullptr;
      l["channel_error_max"] = nullptr;
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);

  auto widths = [](const ToyTransformer& m) {
    std::size_t heads = 0, neurons = 0;
    for (const auto& b : m.blocks) {
      heads += b.heads;
      neurons += b.ffn_width();
    }
    return std::pair{heads, neurons};
  };
  const auto [h0, n0] = widths(r.dense_shape);
  const auto [h1, n1] = widths(r.pruned_shape);
  const auto& e = r.end_to_end;
  j["end_to_end"] = {{"token_set", e.token_set},
                     {"output_deviation", json_number(e.output_deviation)},
                     {"cross_entropy", json_number(e.cross_entropy)},
                     {"perplexity", json_number(std::exp(e.cross_entropy))},
                     {"dense_cross_entropy", json_number(e.dense_cross_entropy)},
                     {"dense_perplexity", json_number(std::exp(e.dense_cross_entropy))},
                     {"params_before", e.params_before},
                     {"params_after", e.params_after},
                     {"heads_before", h0},
                     {"heads_after", h1},
                     {"neurons_before", n0},
                     {"neurons_after", n1},
                     {"total_layer_l2_error", json_number(r.total_layer_l2())},
                     {"total_naive_l2_error", json_number(r.total_naive_l2())},
                     {"note", kProxyNote}};
  const auto mce = r.mean_channel_error();
  j["end_to_end"]["mean_channel_error"] = mce ? json_number(*mce) : nlohmann::json(nullptr);
  j["wall_clock_seconds"] = r.wall_clock_seconds ? nlohmann::json(*r.wall_clock_seconds) : nlohmann::json(nullptr);
  return j;
}

struct EvalReport {
  std::size_t tokens = 0;
  std::size_t params = 0;
  double cross_entropy = 0.0;
  std::optional<double> output_deviation;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = kEvalReportSchema;
    j["tokens"] = tokens;
    j["params"] = params;
    j["cross_entropy"] = json_number(cross_entropy);
    j["perplexity"] = json_number(std::exp(cross_entropy));
    j["output_deviation"] = output_deviation ? json_number(*output_deviation) : nlohmann::json(nullptr);
    j["note"] = kProxyNote;
    return j;
  }
};

inline EvalReport evaluate(const ToyTransformer& model, const TokenBatch& eval, const ToyTransformer* baseline) {
  EvalReport r;
  r.tokens = eval.token_count();
  r.params = param_count(model);
  r.cross_entropy = eval_cross_entropy(model, eval);
  if (baseline) r.output_deviation = end_to_end_deviation(model, *baseline, eval);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
  std::vector<double> ratios;
  std::vector<Criterion> criteria;
  std::vector<ReconMethod> methods;
  SiteSelection sites = SiteSelection::both;
  bool global = false;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct SweepCell {
  double ratio = 1.0;
  Criterion criterion = Criterion::magnitude;
  ReconMethod method = ReconMethod::naive;
  std::optional<RunReport> report;  // empty when the cell failed
  std::string error;
};

/// Full-factorial ratio x criterion x method sweep, rows in that nesting order.
/// Failing cells are recorded and the sweep continues.
inline std::vector<SweepCell> compare_sweep(const ToyTransformer& model, const TokenBatch& calib,
                                            const TokenBatch& eval, const SweepSpec& spec) {
  if (spec.ratios.empty() || spec.criteria.empty() || spec.methods.empty())
    throw ValidationError("sweep grids must be non-empty");
  std::vector<SweepCell> cells;
  for (double r : spec.ratios)
    for (Criterion c : spec.criteria)
      for (ReconMethod m : spec.methods) cells.push_back({r, c, m, std::nullopt, {}});

  auto run_cell = [&](SweepCell& cell) {
    try {
      PruneConfig cfg = PruneConfig::for_sites(spec.sites, cell.ratio);
      cfg.criterion = cell.criterion;
      cfg.method = cell.method;
      cfg.global = spec.global;
      cfg.seed = spec.seed;
      const PipelineResult res = run_pipeline(model, calib, cfg);
      cell.report = build_run_report(model, res, cfg, spec.sites, calib, eval, "eval");
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(spec.jobs, cells.size()));
  if (workers == 1) {
    for (auto& cell : cells) run_cell(cell);
    return cells;
  }
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(cells[i]);
      });
  }
  return cells;
}

// RFC 4180: quote fields holding a comma, quote, CR or LF; double inner quotes.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::string out =
      "ratio,criterion,method,status,total_layer_l2_error,total_naive_l2_error,mean_channel_error,"
      "output_deviation,cross_entropy,perplexity,params_before,params_after,error\r\n";
  for (const auto& c : cells) {
    std::vector<std::string> f{format_double(c.ratio), criterion_name(c.criterion), method_name(c.method)};
    if (c.report) {
      const auto& r = *c.report;
      const auto mce = r.mean_channel_error();
      f.insert(f.end(), {"ok", format_double(r.total_layer_l2()), format_double(r.total_naive_l2()),
                         mce ? format_double(*mce) : "", format_double(r.end_to_end.output_deviation),
                         format_double(r.end_to_end.cross_entropy), format_double(std::exp(r.end_to_end.cross_entropy)),
                         std::to_string(r.end_to_end.params_before), std::to_string(r.end_to_end.params_after), ""});
    } else {
      f.insert(f.end(), {"failed", "", "", "", "", "", "", "", "", c.error});
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i) out += ',';
      out += csv_field(f[i]);
    }
    out += "\r\n";
  }
  return out;
}

/// Per dropped channel error for external histograms: one row per channel of
/// every site whose method has an input estimate.
inline std::string channel_error_csv(const std::vector<LayerSiteRecord>& records) {
  std::string out = "layer,site,channel,epsilon\r\n";
  for (const auto& r : records) {
    if (!r.channel_errors) continue;
    const auto dropped = r.mask.dropped_indices();
    for (std::size_t k = 0; k < dropped.size(); ++k)
      out += std::to_string(r.layer) + "," + site_name(r.site) + "," + std::to_string(dropped[k]) + "," +
             format_double((*r.channel_errors)[k]) + "\r\n";
  }
  return out;
}

inline nlohmann::json sweep_json(const std::vector<SweepCell>& cells) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json row = {{"ratio", c.ratio},
                          {"criterion", criterion_name(c.criterion)},
                          {"method", method_name(c.method)},
                          {"status", c.report ? "ok" : "failed"}};
    row["report"] = c.report ? to_json(*c.report) : nlohmann::json(nullptr);
    row["error"] = c.report ? nlohmann::json(nullptr) : nlohmann::json(c.error);
    rows.push_back(std::move(row));
  }
  return {{"schema", "prunekit-sweep/1"}, {"cells", std::move(rows)}};
}

}  // namespace prunekit
