#pragma once

// prunekit command line: gen | prune | eval | compare.
// Exit codes: 0 success, 1 usage, 2 validation, 3 I/O, 4 numeric failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "prunekit/errors.hpp"
#include "prunekit/evalreport.hpp"
#include "prunekit/model.hpp"
#include "prunekit/pipeline.hpp"
#include "prunekit/tensorio.hpp"

namespace prunekit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;

inline std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto log = std::make_shared<spdlog::logger>("prunekit", sink);
  log->set_pattern("[%l] %v");
  const char* env = std::getenv("PRUNEKIT_LOG");
  const std::string level = env ? env : "info";
  if (level == "error")
    log->set_level(spdlog::level::err);
  else if (level == "debug")
    log->set_level(spdlog::level::debug);
  else
    log->set_level(spdlog::level::info);
  return log;
}

inline void ensure_parent(const std::filesystem::path& file) {
  if (!file.has_parent_path()) return;
  std::error_code ec;
  std::filesystem::create_directories(file.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + file.parent_path().string() + "'");
}

inline TensorList masks_to_tensors(const std::vector<LayerSiteRecord>& records) {
  TensorList out;
  for (const auto& r : records) {
    Tensor t{layer_prefix(r.layer) + site_name(r.site) + ".keep", DType::f32, {r.mask.keep.size()}, {}};
    for (bool k : r.mask.keep) t.values.push_back(k ? 1.0 : 0.0);
    out.push_back(std::move(t));
  }
  return out;
}

struct GenArgs {
  std::string config, out;
  std::uint64_t seed = 0;
};

struct PruneArgs {
  std::string model, calib, criterion = "magnitude", reconstruct = "liar", site = "both", out, report;
  double ratio = 1.0;
  bool global = false;
  bool timing = false;
  std::uint64_t seed = 0;
};

struct EvalArgs {
  std::string model, eval, baseline, report;
};

struct CompareArgs {
  std::string model, calib, eval, out, report, site = "both";
  std::vector<double> ratios;
  std::vector<std::string> criteria, methods;
  bool global = false;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

inline int cmd_gen(const GenArgs& a, spdlog::logger& log) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(a.config));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  const GenConfig cfg = GenConfig::from_json(j);
  const SyntheticAssets assets = gen_synthetic(cfg, a.seed);
  const std::filesystem::path out(a.out);
  save_model(out, assets.model);
  save_tokens(out / "calib.bin", assets.calib);
  save_tokens(out / "eval.bin", assets.eval);
  log.info("wrote model ({} params), calib {}x{}, eval {}x{} to {}", param_count(assets.model), assets.calib.n,
           assets.calib.t, assets.eval.n, assets.eval.t, out.string());
  return kExitOk;
}

inline int cmd_prune(const PruneArgs& a, spdlog::logger& log) {
  const auto start = std::chrono::steady_clock::now();
  const ToyTransformer dense = load_model(a.model);
  const TokenBatch calib = load_tokens(a.calib);
  const SiteSelection sites = parse_site_selection(a.site);
  PruneConfig cfg = PruneConfig::for_sites(sites, a.ratio);
  cfg.criterion = parse_criterion(a.criterion);
  cfg.method = parse_method(a.reconstruct);
  cfg.global = a.global;
  cfg.seed = a.seed;

  const PipelineResult res = run_pipeline(dense, calib, cfg);
  for (const auto& r : res.records)
    log.debug("layer {} {}: kept {}/{} groups, layer l2 {} (naive {})", r.layer, site_name(r.site),
              r.mask.kept_groups(), r.mask.group_count(), r.layer_l2_error, r.naive_l2_error);

  const std::filesystem::path out(a.out);
  save_model(out, res.model);
  write_tensors(out / "masks.bin", masks_to_tensors(res.records));
  write_text(out / "channel_errors.csv", channel_error_csv(res.records));

  RunReport report = build_run_report(dense, res, cfg, sites, calib, calib, "calibration");
  if (a.timing)
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ensure_parent(a.report);
  write_text(a.report, to_json(report).dump(2) + "\n");
  log.info("params {} -> {}, output deviation {}", res.params_before, res.params_after,
           report.end_to_end.output_deviation);
  return kExitOk;
}

inline int cmd_eval(const EvalArgs& a, spdlog::logger& log) {
  const ToyTransformer model = load_model(a.model);
  const TokenBatch eval = load_tokens(a.eval);
  std::optional<ToyTransformer> baseline;
  if (!a.baseline.empty()) baseline = load_model(a.baseline);
  const EvalReport r = evaluate(model, eval, baseline ? &*baseline : nullptr);
  ensure_parent(a.report);
  write_text(a.report, r.to_json().dump(2) + "\n");
  log.info("perplexity {}", std::exp(r.cross_entropy));
  return kExitOk;
}

inline int cmd_compare(const CompareArgs& a, spdlog::logger& log) {
  const ToyTransformer model = load_model(a.model);
  const TokenBatch calib = load_tokens(a.calib);
  const TokenBatch eval = load_tokens(a.eval);
  SweepSpec spec;
  spec.ratios = a.ratios;
  for (const auto& c : a.criteria) spec.criteria.push_back(parse_criterion(c));
  for (const auto& m : a.methods) spec.methods.push_back(parse_method(m));
  spec.sites = parse_site_selection(a.site);
  spec.global = a.global;
  spec.seed = a.seed;
  spec.jobs = a.jobs;
  const auto cells = compare_sweep(model, calib, eval, spec);

  ensure_parent(a.out);
  write_text(a.out, sweep_csv(cells));
  if (!a.report.empty()) {
    ensure_parent(a.report);
    write_text(a.report, sweep_json(cells).dump(2) + "\n");
  }
  std::size_t ok = 0;
  for (const auto& c : cells) {
    if (c.report)
      ++ok;
    else
      log.error("cell ratio={} criterion={} method={} failed: {}", c.ratio, criterion_name(c.criterion),
                method_name(c.method), c.error);
  }
  log.info("{} of {} sweep cells succeeded", ok, cells.size());
  if (ok == 0) throw ValidationError("every sweep cell failed");
  return kExitOk;
}

/// Parses and runs one invocation. Usage text and logs go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"prunekit: retraining-free structured pruning with least-squares reconstruction", "prunekit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic model with calibration and eval tokens");
  g->add_option("--config", gen.config, "generator config JSON")->required();
  g->add_option("--seed", gen.seed, "RNG seed")->required();
  g->add_option("--out", gen.out, "output directory")->required();

  PruneArgs prune;
  auto* p = app.add_subcommand("prune", "prune and reconstruct a model layer by layer");
  p->add_option("--model", prune.model, "model directory")->required();
  p->add_option("--calib", prune.calib, "calibration token file")->required();
  p->add_option("--ratio", prune.ratio, "keep ratio in (0, 1]")->required();
  p->add_option("--criterion", prune.criterion, "magnitude|snip|fluctuation")
      ->check(CLI::IsMember({"magnitude", "snip", "fluctuation"}));
  p->add_option("--reconstruct", prune.reconstruct, "naive|bias|mask-tuning|liar|liar-direct")
      ->check(CLI::IsMember({"naive", "bias", "mask-tuning", "liar", "liar-direct", "liar-weight-only",
                             "liar-bias-only"}));
  p->add_option("--site", prune.site, "heads|neurons|both")->check(CLI::IsMember({"heads", "neurons", "both"}));
  p->add_flag("--global", prune.global, "rank groups model-wide per site type");
  p->add_flag("--timing", prune.timing, "record wall-clock seconds in the report");
  p->add_option("--seed", prune.seed, "RNG seed")->required();
  p->add_option("--out", prune.out, "output model directory")->required();
  p->add_option("--report", prune.report, "run report JSON path")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "perplexity and optional deviation against a baseline");
  e->add_option("--model", ev.model, "model directory")->required();
  e->add_option("--eval", ev.eval, "eval token file")->required();
  e->add_option("--baseline", ev.baseline, "baseline model directory");
  e->add_option("--report", ev.report, "eval report JSON path")->required();

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "full-factorial ratio x criterion x method sweep");
  c->add_option("--model", cmp.model, "model directory")->required();
  c->add_option("--calib", cmp.calib, "calibration token file")->required();
  c->add_option("--eval", cmp.eval, "eval token file")->required();
  c->add_option("--ratios", cmp.ratios, "comma-separated keep ratios")->required()->delimiter(',');
  c->add_option("--criteria", cmp.criteria, "comma-separated criteria")->required()->delimiter(',');
  c->add_option("--methods", cmp.methods, "comma-separated methods")->required()->delimiter(',');
  c->add_option("--site", cmp.site, "heads|neurons|both")->check(CLI::IsMember({"heads", "neurons", "both"}));
  c->add_flag("--global", cmp.global, "rank groups model-wide per site type");
  c->add_option("--seed", cmp.seed, "RNG seed")->required();
  c->add_option("--jobs", cmp.jobs, "concurrent sweep cells")->check(CLI::PositiveNumber);
  c->add_option("--out", cmp.out, "CSV output path")->required();
  c->add_option("--report", cmp.report, "optional JSON output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto log = make_logger(err);
  try {
    if (*g) return cmd_gen(gen, *log);
    if (*p) return cmd_prune(prune, *log);
    if (*e) return cmd_eval(ev, *log);
    return cmd_compare(cmp, *log);
  } catch (const Error& ex) {
    log->error("{}", ex.what());
    return ex.exit_code();
  } catch (const std::exception& ex) {
    log->error("{}", ex.what());
    return 4;
  }
}

}  // namespace prunekit::cli
