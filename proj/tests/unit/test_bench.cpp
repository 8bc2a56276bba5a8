#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "nhgd/bench.hpp"
#include "nhgd/verify.hpp"
#include "test_support.hpp"

namespace nhgd {
namespace {

using testing::TempDir;

const char* kMinimal = R"(task:
  name: gaussian
  d_inner: 3
  d_outer: 2
methods:
  - method: NHGD
    alpha: 0.5
    inner_T: 5
    K_outer: 7
    eta: 0.2
seeds: [4]
wall_clock: false
)";

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

SpecError spec_error(const std::string& text) {
  try {
    parse_spec(text, "x.yaml");
  } catch (const SpecError& e) {
    return e;
  }
  ADD_FAILURE() << "spec was accepted:\n" << text;
  return SpecError("x.yaml", 0, 0, "");
}

TEST(Spec, MinimalParses) {
  const ExperimentSpec s = parse_spec(kMinimal);
  ASSERT_EQ(s.methods.size(), 1u);
  EXPECT_EQ(s.methods[0].k_outer, 7);
  EXPECT_EQ(s.methods[0].inner_t, 5);
  EXPECT_DOUBLE_EQ(s.methods[0].alpha, 0.5);
  EXPECT_FALSE(s.methods[0].record_wall_time);
  EXPECT_EQ(s.seeds, std::vector<std::uint64_t>{4});
  EXPECT_EQ(s.task["d_inner"], 3);
}

TEST(Spec, UnknownKeyReportsLineAndColumn) {
  const SpecError e = spec_error(std::string(kMinimal) + "colour: red\n");
  EXPECT_EQ(e.line(), 13);
  EXPECT_EQ(e.col(), 1);
  EXPECT_NE(std::string(e.what()).find("x.yaml:13:1: unknown key 'colour'"), std::string::npos) << e.what();
}

TEST(Spec, UnknownMethodKeyPointsAtKey) {
  std::string text = kMinimal;
  text.replace(text.find("    eta: 0.2"), 12, "    eta: 0.2\n    phi: 0.1");
  const SpecError e = spec_error(text);
  EXPECT_EQ(e.line(), 11);
  EXPECT_EQ(e.col(), 5);
}

TEST(Spec, BadValues) {
  std::string neg = kMinimal;
  neg.replace(neg.find("alpha: 0.5"), 10, "alpha: -2");
  EXPECT_EQ(spec_error(neg).line(), 6);

  std::string word = kMinimal;
  word.replace(word.find("K_outer: 7"), 10, "K_outer: many");
  EXPECT_NE(std::string(spec_error(word).what()).find("integer"), std::string::npos);

  EXPECT_EQ(spec_error("task: {name: gaussian, d_inner: 2}\nmethods: [{method: NHGD}]\nseeds: [0]\n").line(), 1);
  EXPECT_EQ(spec_error("task: {name: cubes}\nmethods: [{method: NHGD}]\nseeds: [0]\n").col(), 14);
  EXPECT_EQ(spec_error("task: {name: gaussian, d_inner: 2, d_outer: 2}\nmethods: [{method: Adam}]\nseeds: [0]\n").line(),
            2);
  EXPECT_EQ(spec_error("task: {name: gaussian, d_inner: 2, d_outer: 2}\nmethods: [{method: NHGD}]\nseeds: [0, 0]\n")
                .col(),
            12);
  EXPECT_EQ(spec_error("task: [1, 2\n").line(), 2);
}

TEST(Spec, LabelsMustBeCsvSafeAndUnique) {
  const std::string head = "task: {name: gaussian, d_inner: 2, d_outer: 2}\nseeds: [0]\nmethods:\n";
  EXPECT_NE(std::string(spec_error(head + "  - {method: NHGD, label: \"a,b\"}\n").what()).find("commas"),
            std::string::npos);
  EXPECT_NE(std::string(spec_error(head + "  - {method: NHGD}\n  - {method: NHGD}\n").what()).find("duplicate"),
            std::string::npos);
  EXPECT_NO_THROW(parse_spec(head + "  - {method: NHGD}\n  - {method: NHGD, label: NHGD-b}\n"));
}

TEST(Spec, AllMethodsWithOptions) {
  const char* text = R"(task: {name: data_cleaning, n_train: 40, d_feat: 3, n_classes: 2, rng_seed: 1}
seeds: [0]
methods:
  - method: NHGD
    efim: {mode: smoothed, beta: 0.9, damping: 0.01, per_sample_scaling: true}
    cross_partial: {mode: endpoint, m: 3}
    schedule: {type: diminishing, mu: 0.5, lip: 2}
  - {method: Neumann, K: 5, phi: 0.1}
  - {method: CG, K: 5, tol: 1e-8}
  - {method: AmIGO, K: 5, step: 0.1}
  - {method: stocBiO, K: 5, phi: 0.1, mu_s: 0.001, B: 10}
  - {method: TTSA, K: 5, phi: 0.1, c_in: 0.4, c_out: 0.6}
  - {method: SOBA, aux_step: 0.1}
  - {method: nhgd, label: exact, efim: {mode: exact}}
  - {method: NHGD, label: trajectory, cross_partial: {mode: trajectory}}
)";
  const ExperimentSpec s = parse_spec(text);
  ASSERT_EQ(s.methods.size(), 9u);
  EXPECT_EQ(s.methods[0].efim.mode, EfimMode::smoothed);
  EXPECT_DOUBLE_EQ(s.methods[0].efim.beta, 0.9);
  EXPECT_EQ(s.methods[0].cross_partial.mode, CrossPartialMode::endpoint);
  EXPECT_EQ(std::get<StocBiOMethod>(s.methods[4].method).b, 10u);
  EXPECT_DOUBLE_EQ(std::get<TtsaMethod>(s.methods[5].method).c_out, 0.6);
}

TEST(Run, MinimalSpecWritesOneRowPerOuterIteration) {
  TempDir tmp;
  spit(tmp.path() / "s.yaml", kMinimal);
  std::ostringstream out, err;
  const auto dir = tmp.path() / "deep" / "new" / "dir";
  ASSERT_EQ(cmd_run(tmp.path() / "s.yaml", {dir, std::nullopt}, out, err), 0) << err.str();
  const auto rows = read_metrics(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 7u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].record.k, static_cast<std::int64_t>(i));
    EXPECT_EQ(rows[i].seed, 4u);
    EXPECT_EQ(rows[i].method, "NHGD");
    EXPECT_EQ(rows[i].record.wall_nanos, 0);
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["spec_sha256"], sha256_hex(kMinimal));
  EXPECT_EQ(manifest["spec_text"], kMinimal);
  EXPECT_TRUE(manifest.contains("git_describe"));
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.csv"));
}

TEST(Run, RerunFromManifestIsByteIdentical) {
  TempDir tmp;
  std::string text = kMinimal;
  text.replace(text.find("seeds: [4]"), 10, "seeds: [4, 5]");
  text.replace(text.find("methods:\n"), 9, "methods:\n  - {method: CG, K: 3, inner_T: 5, K_outer: 7, eta: 0.2}\n");
  spit(tmp.path() / "s.yaml", text);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(tmp.path() / "s.yaml", {tmp.path() / "a", std::nullopt}, out, err), 0) << err.str();
  ASSERT_EQ(cmd_run(tmp.path() / "a" / "manifest.json", {tmp.path() / "b", std::nullopt}, out, err), 0) << err.str();
  ASSERT_EQ(cmd_run(tmp.path() / "s.yaml", {tmp.path() / "c", 3}, out, err), 0) << err.str();
  const std::string a = slurp(tmp.path() / "a" / "metrics.csv");
  EXPECT_EQ(read_metrics(tmp.path() / "a" / "metrics.csv").size(), 28u);
  EXPECT_EQ(a, slurp(tmp.path() / "b" / "metrics.csv"));
  EXPECT_EQ(a, slurp(tmp.path() / "c" / "metrics.csv"));
}

TEST(Run, BadInputsExitTwo) {
  TempDir tmp;
  spit(tmp.path() / "s.yaml", kMinimal);
  spit(tmp.path() / "file", "x");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_run(tmp.path() / "s.yaml", {tmp.path() / "file" / "sub", std::nullopt}, out, err), 2);
  EXPECT_EQ(cmd_run(tmp.path() / "missing.yaml", {tmp.path() / "o", std::nullopt}, out, err), 2);
  spit(tmp.path() / "bad.yaml", std::string(kMinimal) + "extra: 1\n");
  err.str("");
  EXPECT_EQ(cmd_run(tmp.path() / "bad.yaml", {tmp.path() / "o", std::nullopt}, out, err), 2);
  EXPECT_NE(err.str().find("bad.yaml:13:1:"), std::string::npos) << err.str();
  // the task constructor rejects it, reported at the task block
  std::string empty = kMinimal;
  empty.replace(empty.find("d_inner: 3"), 10, "d_inner: 0");
  spit(tmp.path() / "zero.yaml", empty);
  err.str("");
  EXPECT_EQ(cmd_run(tmp.path() / "zero.yaml", {tmp.path() / "o", std::nullopt}, out, err), 2);
  EXPECT_NE(err.str().find("zero.yaml:2:3:"), std::string::npos) << err.str();
}

TEST(Metrics, RoundTrip) {
  MetricsRow r;
  r.seed = 9;
  r.method = "CG10";
  r.record.k = 3;
  r.record.outer_loss = 0.1;
  r.record.test_metric = 1.0 / 3.0;
  r.record.hypergrad_norm = 2e-300;
  r.record.crosspartial_err = 5e-17;
  r.record.samples_used = 40;
  r.record.wall_nanos = 123;
  const std::string text = std::string(kMetricsHeader) + "\n" + format_metrics_row(r) + "\n";
  const auto rows = parse_metrics(text);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].record.test_metric, r.record.test_metric);
  EXPECT_EQ(rows[0].record.hypergrad_norm, r.record.hypergrad_norm);
  EXPECT_FALSE(rows[0].record.efim_err);
  EXPECT_EQ(rows[0].record.crosspartial_err, r.record.crosspartial_err);
  EXPECT_EQ(format_metrics_row(rows[0]), format_metrics_row(r));
}

TEST(Metrics, StrictReader) {
  EXPECT_THROW(parse_metrics(""), Error);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n"), Error);
  EXPECT_THROW(parse_metrics("k,seed\n0,0\n"), Error);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n0,0,NHGD,1,2,3,,,4\n"), Error);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n0,0,NHGD,1,x,3,,,4,5\n"), Error);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\r\n0,0,NHGD,1,2,3,,,4,5\r\n"), Error);
}

TEST(Summary, PoolsLastWindowOfEverySeed) {
  std::vector<MetricsRow> rows;
  for (std::uint64_t seed : {0, 1})
    for (int k = 0; k < 4; ++k) {
      MetricsRow r;
      r.seed = seed;
      r.method = "m";
      r.record.k = k;
      r.record.outer_loss = k + 10.0 * static_cast<double>(seed);
      rows.push_back(r);
    }
  const auto s = summarize(rows, 2);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].records, 4u);
  EXPECT_DOUBLE_EQ(s[0].outer_loss_mean, (2 + 3 + 12 + 13) / 4.0);
}

std::vector<MetricsRow> two_by_three() {
  std::vector<MetricsRow> rows;
  for (const char* m : {"alpha", "beta"})
    for (std::uint64_t seed : {0, 1, 2})
      for (int k = 0; k < 20; ++k) {
        MetricsRow r;
        r.seed = seed;
        r.method = m;
        r.record.k = k;
        r.record.outer_loss = 1.0 / (1 + k) + 0.01 * static_cast<double>(seed) + (k % 2 ? 0.05 : 0.0);
        r.record.test_metric = 0.5 + 0.01 * k;
        r.record.wall_nanos = 1000000LL * (k + 1);
        rows.push_back(r);
      }
  return rows;
}

TEST(Plot, OneBandAndLinePerMethod) {
  const auto rows = two_by_three();
  const std::string svg = render_svg(rows, PlotStyle::loss_vs_epoch, 1, "t");
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  EXPECT_NE(svg.find("version=\"1.1\""), std::string::npos);
  const std::regex band("class=\"band\"");
  const std::regex line("class=\"mean\"");
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), band), std::sregex_iterator()), 2);
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), line), std::sregex_iterator()), 2);
  EXPECT_NE(svg.find("data-method=\"alpha\""), std::string::npos);
  EXPECT_NE(svg.find("data-method=\"beta\""), std::string::npos);
  EXPECT_EQ(svg, render_svg(rows, PlotStyle::loss_vs_epoch, 1, "t"));
}

TEST(Plot, SmoothingChangesTheCurve) {
  const auto rows = two_by_three();
  EXPECT_NE(render_svg(rows, PlotStyle::loss_vs_epoch, 1, "t"), render_svg(rows, PlotStyle::loss_vs_epoch, 5, "t"));
  EXPECT_NE(render_svg(rows, PlotStyle::loss_vs_epoch, 1, "t"), render_svg(rows, PlotStyle::metric_vs_walltime, 1, "t"));
}

TEST(Plot, MovingAverage) {
  EXPECT_EQ(moving_average({1, 2, 3, 4}, 1), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(moving_average({1, 3, 5, 7}, 2), (std::vector<double>{1, 2, 4, 6}));
  EXPECT_THROW(moving_average({1}, 0), Error);
}

TEST(Plot, CommandErrorsAndOutput) {
  TempDir tmp;
  std::ostringstream out, err;
  spit(tmp.path() / "empty.csv", "");
  EXPECT_EQ(cmd_plot(tmp.path() / "empty.csv", PlotStyle::loss_vs_epoch, 1, std::nullopt, out, err), 2);
  spit(tmp.path() / "junk.csv", "a,b,c\n1,2,3\n");
  EXPECT_EQ(cmd_plot(tmp.path() / "junk.csv", PlotStyle::loss_vs_epoch, 1, std::nullopt, out, err), 2);

  std::string csv = std::string(kMetricsHeader) + "\n";
  for (const auto& r : two_by_three()) csv += format_metrics_row(r) + "\n";
  spit(tmp.path() / "metrics.csv", csv);
  ASSERT_EQ(cmd_plot(tmp.path() / "metrics.csv", PlotStyle::metric_vs_walltime, 3, std::nullopt, out, err), 0);
  const std::string a = slurp(tmp.path() / "metrics_metric_vs_walltime.svg");
  ASSERT_EQ(cmd_plot(tmp.path() / "metrics.csv", PlotStyle::metric_vs_walltime, 3, tmp.path() / "b.svg", out, err), 0);
  EXPECT_EQ(a, slurp(tmp.path() / "b.svg"));
}

TEST(Verify, UnknownSuiteListsNames) {
  std::ostringstream out, err;
  EXPECT_EQ(cmd_verify("everything", false, out, err), 2);
  for (const auto& n : suite_names()) EXPECT_NE(err.str().find(n), std::string::npos) << n;
  EXPECT_EQ(cmd_verify("sm_exact", false, out, err), 0);
  EXPECT_NE(out.str().find("[PASS] 1"), std::string::npos);
  EXPECT_EQ(suite_criteria("sm_exactness"), suite_criteria("sm_exact"));
  EXPECT_EQ(suite_criteria("efim_rate"), std::vector<int>{2});
  EXPECT_EQ(suite_criteria("all")->size(), static_cast<std::size_t>(kCriterionCount));
}

TEST(Hash, Sha256) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace nhgd
