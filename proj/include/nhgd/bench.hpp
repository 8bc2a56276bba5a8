#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "nhgd/drivers.hpp"

namespace nhgd {

/// Invalid experiment spec; what() reads "file:line:col: message".
class SpecError : public Error {
 public:
  SpecError(const std::string& origin, int line, int col, const std::string& message);
  int line() const { return line_; }
  int col() const { return col_; }

 private:
  int line_;
  int col_;
};

struct ExperimentSpec {
  nlohmann::json task;  // accepted by make_task_from_json
  std::vector<MethodConfig> methods;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;
  std::int64_t eval_every = 1;
  bool plot = false;
  std::size_t plot_smooth = 10;
  std::size_t threads = 1;
  bool wall_clock = true;  // false writes wall_nanos = 0, for byte-identical reruns
  std::size_t summary_window = 50;

  std::string source_text;  // the YAML as read
  std::string origin;       // file name used in error messages
};

/// Parses and validates a YAML experiment spec.
ExperimentSpec parse_spec(const std::string& text, const std::string& origin = "<spec>");
/// Reads a spec file, or the spec embedded in a run manifest (*.json).
ExperimentSpec load_spec(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader =
    "k,seed,method,outer_loss,test_metric,hypergrad_norm,efim_err,crosspartial_err,samples_used,wall_nanos";

struct MetricsRow {
  std::uint64_t seed = 0;
  std::string method;
  RunRecord record;
};

std::string format_metrics_row(const MetricsRow& row);
/// Strict reader: exact header, ten fields per row, LF endings.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);
std::vector<MetricsRow> parse_metrics(const std::string& text, const std::string& origin = "<metrics>");

struct SummaryRow {
  std::string method;
  std::size_t records = 0;
  double outer_loss_mean = 0.0;
  double outer_loss_std = 0.0;
  double test_metric_mean = 0.0;
  double test_metric_std = 0.0;
};

/// Mean and sample std over the last `window` records of every seed, per method.
std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows, std::size_t window = 50);

// ---------------------------------------------------------------------------
// Plots

enum class PlotStyle { loss_vs_epoch, metric_vs_walltime };

std::optional<PlotStyle> parse_plot_style(const std::string& s);
const char* plot_style_name(PlotStyle s);

/// Trailing moving average; window 1 is the identity.
std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window);

/// SVG 1.1 document with one mean line and one mean +/- std band per method.
std::string render_svg(const std::vector<MetricsRow>& rows, PlotStyle style, std::size_t smooth,
                       const std::string& title);

// ---------------------------------------------------------------------------
// Commands. Exit codes: 0 success, 1 run failure, 2 bad input.

struct RunOverrides {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::size_t> threads;
};

int cmd_run(const std::filesystem::path& spec_path, const RunOverrides& overrides, std::ostream& out,
            std::ostream& err);
int cmd_plot(const std::filesystem::path& metrics_path, PlotStyle style, std::size_t smooth,
             const std::optional<std::filesystem::path>& out_path, std::ostream& out, std::ostream& err);
int cmd_verify(const std::string& suite, bool verbose, std::ostream& out, std::ostream& err);

std::string sha256_hex(const std::string& bytes);

}  // namespace nhgd
