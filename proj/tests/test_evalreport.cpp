#include <gtest/gtest.h>

#include "prunekit/evalreport.hpp"
#include "schema_check.hpp"
#include "test_support.hpp"

using namespace prunekit;
using namespace prunekit::testing;

namespace {

const SchemaChecker& schema() {
  static const SchemaChecker s = SchemaChecker::from_file(PRUNEKIT_SCHEMA_PATH);
  return s;
}

ToyTransformer constant_head_model(std::size_t vocab, std::vector<double> bias) {
  ModelConfig c = small_config();
  c.vocab = vocab;
  ToyTransformer m = random_model(c, 1);
  m.lm_head.weight = Matrix(c.embed_dim, vocab);
  m.lm_head.bias = std::move(bias);
  return m;
}

SweepSpec spec(std::vector<double> ratios, std::vector<ReconMethod> methods) {
  SweepSpec s;
  s.ratios = std::move(ratios);
  s.criteria = {Criterion::magnitude};
  s.methods = std::move(methods);
  s.seed = 3;
  return s;
}

}  // namespace

TEST(LayerL2, Examples) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(layer_l2_error(a, a), 0.0);
  EXPECT_EQ(layer_l2_error(a, add(a, Matrix::from_rows({{1, 1}, {1, 1}}))), 4.0);
  EXPECT_THROW(layer_l2_error(a, Matrix(2, 3)), ShapeError);
}

TEST(LayerL2Property, NaiveEqualsDroppedProduct) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t cin = 2 + rng.below(12);
    const Matrix x = random_matrix(rng, 25, cin), w = random_matrix(rng, cin, 1 + rng.below(6));
    const auto b = random_vector(rng, w.cols());
    ChannelMask m = ChannelMask::all_keep(0, Site::ffn_down, cin, 1);
    for (std::size_t i = 0; i < cin; ++i) m.keep[i] = i == 0 || rng.uniform() < 0.5;
    const auto v = split(x, w, m);
    const double got = layer_l2_error(layer_output(x, w, b), layer_output(v.x_u, v.w_u, b));
    // Dropped partial product computed element by element.
    double want = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < cin; ++k)
          if (!m.keep[k]) s += x(t, k) * w(k, j);
        want += s * s;
      }
    ASSERT_NEAR(got, want, 1e-9 * std::max(1.0, want));
  }
}

TEST(Deviation, SelfIsZeroAndMatchesDualOracle) {
  const auto assets = gen_synthetic(small_gen(), 31);
  EXPECT_EQ(end_to_end_deviation(assets.model, assets.model, assets.eval), 0.0);
  const auto other = gen_synthetic(small_gen(), 32).model;
  const auto la = reference_logits(other, assets.eval), lb = reference_logits(assets.model, assets.eval);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < la.size(); ++i) num += (la[i] - lb[i]) * (la[i] - lb[i]), den += lb[i] * lb[i];
  const double want = std::sqrt(num) / std::sqrt(den);
  EXPECT_NEAR(end_to_end_deviation(other, assets.model, assets.eval), want, 1e-10 * want);
}

TEST(Deviation, ConfigMismatchIsRejected) {
  const auto assets = gen_synthetic(small_gen(), 33);
  GenConfig g = small_gen();
  g.model.vocab = 12;
  EXPECT_THROW(end_to_end_deviation(gen_synthetic(g, 33).model, assets.model, assets.eval), ValidationError);
}

TEST(Perplexity, UniformLogits) {
  const ToyTransformer m = constant_head_model(4, {0, 0, 0, 0});
  const TokenBatch b = sample_markov(markov_transitions(4, 2.0, 5), 3, 6, 6);
  EXPECT_NEAR(perplexity(m, b), 4.0, 1e-12);
}

TEST(Perplexity, LargeMarginApproachesOne) {
  Matrix logits(3, 5);
  const std::vector<std::int32_t> targets{2, 0, 4};
  for (std::size_t i = 0; i < 3; ++i) logits(i, targets[i]) = 20.0;
  EXPECT_LE(std::exp(cross_entropy(logits, targets)) - 1.0, 1e-3);
  EXPECT_GE(std::exp(cross_entropy(logits, targets)), 1.0);
}

TEST(Perplexity, MatchesDualOracle) {
  for (std::uint64_t seed : {41u, 42u, 43u}) {
    const auto assets = gen_synthetic(small_gen(), seed);
    const double want = std::exp(reference_cross_entropy(reference_logits(assets.model, assets.eval),
                                                         assets.eval.targets, assets.model.config.vocab));
    EXPECT_NEAR(perplexity(assets.model, assets.eval), want, 1e-9 * want);
  }
}

TEST(EvalReport, FieldsAndSchema) {
  const auto assets = gen_synthetic(small_gen(), 44);
  const EvalReport r = evaluate(assets.model, assets.eval, &assets.model);
  EXPECT_EQ(*r.output_deviation, 0.0);
  EXPECT_EQ(r.tokens, 64u);
  const auto j = r.to_json();
  EXPECT_EQ(j["perplexity"].get<double>(), std::exp(j["cross_entropy"].get<double>()));
  EXPECT_EQ(schema().check(j, "#/$defs/eval_report"), "");
  EXPECT_EQ(schema().check(evaluate(assets.model, assets.eval, nullptr).to_json()), "");
}

TEST(RunReport, InvariantsAndSchema) {
  const auto assets = gen_synthetic(small_gen(), 45);
  for (auto m : {ReconMethod::naive, ReconMethod::mask_tuning, ReconMethod::liar}) {
    PruneConfig cfg = PruneConfig::for_sites(SiteSelection::both, 0.5);
    cfg.method = m;
    const auto res = run_pipeline(assets.model, assets.calib, cfg);
    const auto rep = build_run_report(assets.model, res, cfg, SiteSelection::both, assets.calib, assets.eval, "eval");
    const auto j = to_json(rep);
    EXPECT_EQ(schema().check(j, "#/$defs/run_report"), "") << method_name(m);
    EXPECT_EQ(schema().check(j), "");
    EXPECT_EQ(j["layers"].size(), 4u);
    EXPECT_EQ(j["end_to_end"]["heads_before"], 8);
    EXPECT_EQ(j["end_to_end"]["heads_after"], 4);
    EXPECT_EQ(j["end_to_end"]["neurons_after"], 32);
    EXPECT_TRUE(j["wall_clock_seconds"].is_null());
    EXPECT_EQ(j["end_to_end"]["perplexity"].get<double>(), std::exp(j["end_to_end"]["cross_entropy"].get<double>()));
    for (const auto& l : j["layers"]) EXPECT_GE(l["layer_l2_error"].get<double>(), 0.0);
    EXPECT_EQ(j["end_to_end"]["mean_channel_error"].is_null(), m == ReconMethod::mask_tuning);
  }
}

TEST(Schema, RejectsMalformedDocuments) {
  const auto assets = gen_synthetic(small_gen(), 46);
  auto j = evaluate(assets.model, assets.eval, nullptr).to_json();
  auto extra = j;
  extra["surprise"] = 1;
  EXPECT_NE(schema().check(extra), "");
  auto missing = j;
  missing.erase("perplexity");
  EXPECT_NE(schema().check(missing), "");
  auto wrong = j;
  wrong["tokens"] = "many";
  EXPECT_NE(schema().check(wrong), "");
  EXPECT_EQ(schema().check(nlohmann::json{{"error", nlohmann::json::array({"inf"})}}, "#/$defs/run_report").empty(), false);
}

TEST(Sweep, SingleCellEqualsPipeline) {
  const auto assets = gen_synthetic(small_gen(), 47);
  const auto cells = compare_sweep(assets.model, assets.calib, assets.eval, spec({0.5}, {ReconMethod::liar}));
  ASSERT_EQ(cells.size(), 1u);
  ASSERT_TRUE(cells[0].report);
  PruneConfig cfg = PruneConfig::for_sites(SiteSelection::both, 0.5);
  cfg.seed = 3;
  const auto res = run_pipeline(assets.model, assets.calib, cfg);
  EXPECT_EQ(to_json(*cells[0].report).dump(),
            to_json(build_run_report(assets.model, res, cfg, SiteSelection::both, assets.calib, assets.eval, "eval")).dump());
}

TEST(Sweep, RowBookkeepingAndThreadingAgree) {
  const auto assets = gen_synthetic(small_gen(), 48);
  auto s = spec({0.25, 0.5, 1.0}, {ReconMethod::naive, ReconMethod::liar});
  const auto serial = compare_sweep(assets.model, assets.calib, assets.eval, s);
  ASSERT_EQ(serial.size(), 6u);
  EXPECT_EQ(serial[1].ratio, 0.25);
  EXPECT_EQ(serial[1].method, ReconMethod::liar);
  EXPECT_EQ(serial[2].ratio, 0.5);
  s.jobs = 4;
  const auto parallel = compare_sweep(assets.model, assets.calib, assets.eval, s);
  EXPECT_EQ(sweep_csv(serial), sweep_csv(parallel));
  const auto j = sweep_json(serial);
  EXPECT_EQ(schema().check(j, "#/$defs/sweep_report"), "");
  EXPECT_THROW(compare_sweep(assets.model, assets.calib, assets.eval, spec({}, {ReconMethod::liar})), ValidationError);
}

TEST(Sweep, FailedCellsAreRecorded) {
  const auto assets = gen_synthetic(small_gen(), 49);
  const auto cells = compare_sweep(assets.model, assets.calib, assets.eval, spec({0.0, 0.5}, {ReconMethod::liar}));
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_FALSE(cells[0].report);
  EXPECT_NE(cells[0].error.find("keep ratio"), std::string::npos);
  EXPECT_TRUE(cells[1].report);
  const std::string csv = sweep_csv(cells);
  EXPECT_NE(csv.find(",failed,"), std::string::npos);
  EXPECT_NE(csv.find(",ok,"), std::string::npos);
}

TEST(Sweep, NaiveMedianAtLeastLiarAtEveryRatio) {
  const std::vector<double> ratios{0.25, 0.5, 0.75};
  std::vector<std::vector<double>> naive(ratios.size()), liar(ratios.size());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto assets = gen_synthetic(small_gen(), 500 + seed);
    const auto cells =
        compare_sweep(assets.model, assets.calib, assets.eval, spec(ratios, {ReconMethod::naive, ReconMethod::liar}));
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      naive[r].push_back(cells[2 * r].report->total_layer_l2());
      liar[r].push_back(cells[2 * r + 1].report->total_layer_l2());
    }
  }
  for (std::size_t r = 0; r < ratios.size(); ++r) EXPECT_GE(median(naive[r]), median(liar[r])) << ratios[r];
}

TEST(Csv, Rfc4180Quoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
}

TEST(Summary, MeanAndMax) {
  const std::vector<double> e{0.5, 1.0, 0.0};
  const auto s = summarize(e);
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_EQ(s.max, 1.0);
  EXPECT_EQ(s.count, 3u);
  EXPECT_EQ(json_number(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_THROW(json_number(std::nan("")), NumericError);
}

TEST(ChannelErrorCsv, OneRowPerDroppedChannel) {
  const auto assets = gen_synthetic(small_gen(), 50);
  PruneConfig cfg = PruneConfig::for_sites(SiteSelection::neurons, 0.5);
  cfg.method = ReconMethod::naive;
  const auto naive = run_pipeline(assets.model, assets.calib, cfg);
  const std::string csv = channel_error_csv(naive.records);
  EXPECT_EQ(csv.rfind("layer,site,channel,epsilon\r\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 16);
  const auto first = naive.records[1].mask.dropped_indices()[0];
  EXPECT_NE(csv.find("0,ffn_down," + std::to_string(first) + ",1\r\n"), std::string::npos);
  cfg.method = ReconMethod::mask_tuning;
  EXPECT_EQ(channel_error_csv(run_pipeline(assets.model, assets.calib, cfg).records), "layer,site,channel,epsilon\r\n");
}
