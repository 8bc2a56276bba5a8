#include "nhgd/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "nhgd/verify.hpp"

#ifndef NHGD_SOURCE_DIR
#define NHGD_SOURCE_DIR "."
#endif

namespace nhgd {

SpecError::SpecError(const std::string& origin, int line, int col, const std::string& message)
    : Error(fmt::format("{}:{}:{}: {}", origin, line, col, message)), line_(line), col_(col) {}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// ---------------------------------------------------------------------------
// YAML reading with positions

class SpecReader {
 public:
  explicit SpecReader(std::string origin) : origin_(std::move(origin)) {}

  [[noreturn]] void fail(const YAML::Node& at, const std::string& message) const {
    const YAML::Mark m = at.Mark();
    if (m.is_null()) throw SpecError(origin_, 1, 1, message);
    throw SpecError(origin_, m.line + 1, m.column + 1, message);
  }

  void require_map(const YAML::Node& n, const std::string& what) const {
    if (!n.IsMap()) fail(n, what + " must be a mapping");
  }

  void check_keys(const YAML::Node& map, const std::set<std::string>& allowed, const std::string& where) const {
    for (const auto& kv : map) {
      const std::string key = kv.first.as<std::string>();
      if (!allowed.count(key)) {
        std::string names;
        for (const auto& a : allowed) names += (names.empty() ? "" : ", ") + a;
        fail(kv.first, fmt::format("unknown key '{}' in {} (allowed: {})", key, where, names));
      }
    }
  }

  std::string string(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(n, fmt::format("'{}' must be a string", key));
    return n.as<std::string>();
  }

  double real(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(n, fmt::format("'{}' must be a number", key));
    double x = 0.0;
    if (!YAML::convert<double>::decode(n, x) || !std::isfinite(x)) {
      fail(n, fmt::format("'{}' must be a finite number, got '{}'", key, n.Scalar()));
    }
    return x;
  }

  std::int64_t integer(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(n, fmt::format("'{}' must be an integer", key));
    const std::string& s = n.Scalar();
    std::int64_t x = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      fail(n, fmt::format("'{}' must be an integer, got '{}'", key, s));
    }
    return x;
  }

  std::uint64_t natural(const YAML::Node& n, const std::string& key) const {
    const std::int64_t x = integer(n, key);
    if (x < 0) fail(n, fmt::format("'{}' must be nonnegative, got {}", key, x));
    return static_cast<std::uint64_t>(x);
  }

  bool boolean(const YAML::Node& n, const std::string& key) const {
    bool b = false;
    if (!n.IsScalar() || !YAML::convert<bool>::decode(n, b)) fail(n, fmt::format("'{}' must be true or false", key));
    return b;
  }

  nlohmann::json vector(const YAML::Node& n, const std::string& key) const {
    if (!n.IsSequence()) fail(n, fmt::format("'{}' must be a list of numbers", key));
    nlohmann::json out = nlohmann::json::array();
    for (const auto& x : n) out.push_back(real(x, key));
    return out;
  }

  nlohmann::json matrix(const YAML::Node& n, const std::string& key) const {
    if (!n.IsSequence() || n.size() == 0) fail(n, fmt::format("'{}' must be a list of rows", key));
    nlohmann::json out = nlohmann::json::array();
    std::size_t cols = 0;
    for (const auto& row : n) {
      nlohmann::json r = vector(row, key);
      if (out.empty()) cols = r.size();
      if (r.size() != cols || cols == 0) fail(row, fmt::format("'{}' rows must have equal nonzero length", key));
      out.push_back(std::move(r));
    }
    return out;
  }

  const std::string& origin() const { return origin_; }

 private:
  std::string origin_;
};

enum class Kind { natural, real, string, vector, matrix, boolean };

const std::map<std::string, std::map<std::string, Kind>>& task_keys() {
  static const std::map<std::string, std::map<std::string, Kind>> keys = {
      {"gaussian",
       {{"d_inner", Kind::natural},
        {"d_outer", Kind::natural},
        {"rng_seed", Kind::natural},
        {"b_norm", Kind::real},
        {"map_b", Kind::matrix},
        {"target_c", Kind::vector},
        {"mean", Kind::vector},
        {"initial_v", Kind::vector},
        {"noise_sigma", Kind::real},
        {"radius", Kind::real}}},
      {"data_cleaning",
       {{"n_train", Kind::natural},
        {"d_feat", Kind::natural},
        {"n_classes", Kind::natural},
        {"corruption_rate", Kind::real},
        {"lambda_reg", Kind::real},
        {"rng_seed", Kind::natural},
        {"val_fraction", Kind::real},
        {"test_fraction", Kind::real},
        {"initial_weight", Kind::real},
        {"synthetic_weight_scale", Kind::real},
        {"radius", Kind::real},
        {"idx_images", Kind::string},
        {"idx_labels", Kind::string}}},
      {"data_distillation",
       {{"n_per_class", Kind::natural},
        {"n_classes", Kind::natural},
        {"d_feat", Kind::natural},
        {"lambda_reg", Kind::real},
        {"rng_seed", Kind::natural},
        {"n_source", Kind::natural},
        {"n_test", Kind::natural},
        {"cluster_separation", Kind::real},
        {"init", Kind::string},
        {"radius", Kind::real},
        {"idx_images", Kind::string},
        {"idx_labels", Kind::string}}},
  };
  return keys;
}

nlohmann::json parse_task(const SpecReader& rd, const YAML::Node& node) {
  rd.require_map(node, "task");
  const YAML::Node name_node = node["name"];
  if (!name_node) rd.fail(node, "task needs a 'name' (gaussian, data_cleaning or data_distillation)");
  const std::string name = rd.string(name_node, "name");
  const auto it = task_keys().find(name);
  if (it == task_keys().end()) {
    rd.fail(name_node, fmt::format("unknown task '{}' (expected gaussian, data_cleaning or data_distillation)", name));
  }
  std::set<std::string> allowed{"name"};
  for (const auto& [k, kind] : it->second) allowed.insert(k);
  rd.check_keys(node, allowed, "task");

  nlohmann::json j;
  j["name"] = name;
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    if (key == "name") continue;
    switch (it->second.at(key)) {
      case Kind::natural:
        j[key] = rd.natural(kv.second, key);
        break;
      case Kind::real:
        j[key] = rd.real(kv.second, key);
        break;
      case Kind::string:
        j[key] = rd.string(kv.second, key);
        break;
      case Kind::vector:
        j[key] = rd.vector(kv.second, key);
        break;
      case Kind::matrix:
        j[key] = rd.matrix(kv.second, key);
        break;
      case Kind::boolean:
        j[key] = rd.boolean(kv.second, key);
        break;
    }
  }
  if (name == "gaussian") {
    const bool explicit_b = j.contains("map_b");
    if (explicit_b && !j.contains("target_c")) rd.fail(node, "gaussian task with map_b also needs target_c");
    if (!explicit_b && (!j.contains("d_inner") || !j.contains("d_outer"))) {
      rd.fail(node, "gaussian task needs d_inner and d_outer (or map_b and target_c)");
    }
  }
  if (j.contains("init") && j["init"] != "class_means" && j["init"] != "random") {
    rd.fail(node["init"], "init must be class_means or random");
  }
  if (j.contains("idx_images") != j.contains("idx_labels")) rd.fail(node, "idx_images and idx_labels go together");
  return j;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

MethodConfig parse_method(const SpecReader& rd, const YAML::Node& node) {
  rd.require_map(node, "method block");
  const YAML::Node kind_node = node["method"];
  if (!kind_node) rd.fail(node, "method block needs 'method' (NHGD, CG, Neumann, AmIGO, stocBiO, TTSA or SOBA)");
  const std::string kind = lower(rd.string(kind_node, "method"));

  std::set<std::string> allowed{"method",        "label",         "alpha",        "inner_T", "batch_size", "K_outer",
                                "schedule",      "eta",           "efim",         "cross_partial", "track_errors"};
  MethodConfig c;
  if (kind == "nhgd") {
    c.method = NhgdMethod{};
  } else if (kind == "neumann") {
    c.method = NeumannMethod{};
    allowed.insert({"K", "phi"});
  } else if (kind == "cg") {
    c.method = CgMethod{};
    allowed.insert({"K", "tol"});
  } else if (kind == "amigo") {
    c.method = AmigoMethod{};
    allowed.insert({"K", "step"});
  } else if (kind == "stocbio") {
    c.method = StocBiOMethod{};
    allowed.insert({"K", "phi", "mu_s", "B"});
  } else if (kind == "ttsa") {
    c.method = TtsaMethod{};
    allowed.insert({"K", "phi", "c_in", "c_out"});
  } else if (kind == "soba") {
    c.method = SobaMethod{};
    allowed.insert({"aux_step", "c_in", "c_out"});
  } else {
    rd.fail(kind_node, fmt::format("unknown method '{}' (expected NHGD, CG, Neumann, AmIGO, stocBiO, TTSA or SOBA)",
                                   kind_node.Scalar()));
  }
  rd.check_keys(node, allowed, "method block");

  auto get = [&](const char* key) { return node[key]; };
  if (auto n = get("label")) c.label = rd.string(n, "label");
  if (auto n = get("alpha")) c.alpha = rd.real(n, "alpha");
  if (auto n = get("inner_T")) c.inner_t = rd.integer(n, "inner_T");
  if (auto n = get("batch_size")) c.batch_size = rd.natural(n, "batch_size");
  if (auto n = get("K_outer")) c.k_outer = rd.integer(n, "K_outer");
  if (auto n = get("track_errors")) c.track_errors = rd.boolean(n, "track_errors");
  if (get("eta") && get("schedule")) rd.fail(get("eta"), "give either 'eta' or 'schedule', not both");
  if (auto n = get("eta")) c.schedule = StepSchedule(ConstantStep{rd.real(n, "eta")});

  auto guarded = [&](const YAML::Node& at, auto&& fn) {
    try {
      fn();
    } catch (const SpecError&) {
      throw;
    } catch (const Error& e) {
      rd.fail(at, e.what());
    }
  };

  if (auto s = get("schedule")) {
    rd.require_map(s, "schedule");
    const std::string type = s["type"] ? lower(rd.string(s["type"], "type")) : "";
    if (type == "constant") {
      rd.check_keys(s, {"type", "eta"}, "constant schedule");
      if (!s["eta"]) rd.fail(s, "constant schedule needs 'eta'");
      guarded(s, [&] { c.schedule = StepSchedule(ConstantStep{rd.real(s["eta"], "eta")}); });
    } else if (type == "diminishing") {
      rd.check_keys(s, {"type", "mu", "lip"}, "diminishing schedule");
      if (!s["mu"] || !s["lip"]) rd.fail(s, "diminishing schedule needs 'mu' and 'lip'");
      guarded(s, [&] { c.schedule = StepSchedule(DiminishingStep{rd.real(s["mu"], "mu"), rd.real(s["lip"], "lip")}); });
    } else {
      rd.fail(s, "schedule 'type' must be constant or diminishing");
    }
  }
  if (auto e = get("efim")) {
    rd.require_map(e, "efim");
    rd.check_keys(e, {"mode", "beta", "damping", "carry_counter", "per_sample_scaling"}, "efim");
    if (auto n = e["mode"]) {
      const std::string m = lower(rd.string(n, "mode"));
      if (m == "exact" || m == "exact_averaging") {
        c.efim.mode = EfimMode::exact_averaging;
      } else if (m == "smoothed") {
        c.efim.mode = EfimMode::smoothed;
      } else {
        rd.fail(n, "efim mode must be exact or smoothed");
      }
    }
    if (auto n = e["beta"]) c.efim.beta = rd.real(n, "beta");
    if (auto n = e["damping"]) c.efim.damping = rd.real(n, "damping");
    if (auto n = e["carry_counter"]) c.efim.carry_counter = rd.boolean(n, "carry_counter");
    if (auto n = e["per_sample_scaling"]) c.efim.per_sample_scaling = rd.boolean(n, "per_sample_scaling");
    guarded(e, [&] { EfimInverseState::make(1, c.efim); });
  }
  if (auto x = get("cross_partial")) {
    rd.require_map(x, "cross_partial");
    rd.check_keys(x, {"mode", "m", "carry_counter"}, "cross_partial");
    if (auto n = x["mode"]) {
      const std::string m = lower(rd.string(n, "mode"));
      if (m == "trajectory") {
        c.cross_partial.mode = CrossPartialMode::trajectory;
      } else if (m == "endpoint") {
        c.cross_partial.mode = CrossPartialMode::endpoint;
      } else {
        rd.fail(n, "cross_partial mode must be trajectory or endpoint");
      }
    }
    if (auto n = x["m"]) c.cross_partial.m = rd.natural(n, "m");
    if (auto n = x["carry_counter"]) c.cross_partial.carry_counter = rd.boolean(n, "carry_counter");
  }

  std::visit(Overloaded{[](NhgdMethod&) {},
                        [&](NeumannMethod& m) {
                          if (auto n = get("K")) m.k = rd.integer(n, "K");
                          if (auto n = get("phi")) m.phi = rd.real(n, "phi");
                        },
                        [&](CgMethod& m) {
                          if (auto n = get("K")) m.k = rd.integer(n, "K");
                          if (auto n = get("tol")) m.tol = rd.real(n, "tol");
                        },
                        [&](AmigoMethod& m) {
                          if (auto n = get("K")) m.k = rd.integer(n, "K");
                          if (auto n = get("step")) m.step = rd.real(n, "step");
                        },
                        [&](StocBiOMethod& m) {
                          if (auto n = get("K")) m.k = rd.integer(n, "K");
                          if (auto n = get("phi")) m.phi = rd.real(n, "phi");
                          if (auto n = get("mu_s")) m.mu_s = rd.real(n, "mu_s");
                          if (auto n = get("B")) m.b = rd.natural(n, "B");
                        },
                        [&](TtsaMethod& m) {
                          if (auto n = get("K")) m.k = rd.integer(n, "K");
                          if (auto n = get("phi")) m.phi = rd.real(n, "phi");
                          if (auto n = get("c_in")) m.c_in = rd.real(n, "c_in");
                          if (auto n = get("c_out")) m.c_out = rd.real(n, "c_out");
                        },
                        [&](SobaMethod& m) {
                          if (auto n = get("aux_step")) m.aux_step = rd.real(n, "aux_step");
                          if (auto n = get("c_in")) m.c_in = rd.real(n, "c_in");
                          if (auto n = get("c_out")) m.c_out = rd.real(n, "c_out");
                        }},
             c.method);

  const std::string label = c.display_label();
  if (label.empty() || label.find_first_of(",\"\r\n") != std::string::npos) {
    rd.fail(get("label") ? get("label") : node, fmt::format("label '{}' must be nonempty without commas, quotes or newlines", label));
  }
  guarded(node, [&] { c.validate(); });
  return c;
}

std::size_t positive_size(const SpecReader& rd, const YAML::Node& n, const std::string& key) {
  const std::uint64_t x = rd.natural(n, key);
  if (x == 0) rd.fail(n, fmt::format("'{}' must be at least 1", key));
  return static_cast<std::size_t>(x);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot read {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
}

std::string git_describe() {
  const std::string cmd = fmt::format("git -C '{}' describe --always --dirty 2>/dev/null", NHGD_SOURCE_DIR);
  std::string out;
  if (FILE* p = popen(cmd.c_str(), "r")) {
    char buf[256];
    while (std::fgets(buf, sizeof buf, p) != nullptr) out += buf;
    pclose(p);
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentSpec parse_spec(const std::string& text, const std::string& origin) {
  SpecReader rd(origin);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw SpecError(origin, e.mark.line + 1, e.mark.column + 1, e.msg);
  }
  if (!root.IsMap()) rd.fail(root, "spec must be a mapping with task, methods and seeds");
  rd.check_keys(root,
                {"task", "methods", "seeds", "output_dir", "eval_every", "plot", "plot_smooth", "threads", "wall_clock",
                 "summary_window"},
                "spec");

  ExperimentSpec spec;
  spec.source_text = text;
  spec.origin = origin;
  if (!root["task"]) rd.fail(root, "missing 'task' block");
  spec.task = parse_task(rd, root["task"]);

  const YAML::Node methods = root["methods"];
  if (!methods) rd.fail(root, "missing 'methods' (at least one method block)");
  if (!methods.IsSequence() || methods.size() == 0) rd.fail(methods, "'methods' must be a nonempty list");

  if (auto n = root["eval_every"]) spec.eval_every = static_cast<std::int64_t>(positive_size(rd, n, "eval_every"));
  std::set<std::string> labels;
  for (const auto& m : methods) {
    MethodConfig c = parse_method(rd, m);
    c.eval_every = spec.eval_every;
    if (!labels.insert(c.display_label()).second) {
      rd.fail(m, fmt::format("duplicate method label '{}'; set 'label' to tell them apart", c.display_label()));
    }
    spec.methods.push_back(std::move(c));
  }

  const YAML::Node seeds = root["seeds"];
  if (!seeds) rd.fail(root, "missing 'seeds' (nonempty list of integers)");
  if (!seeds.IsSequence() || seeds.size() == 0) rd.fail(seeds, "'seeds' must be a nonempty list of integers");
  std::set<std::uint64_t> seen;
  for (const auto& s : seeds) {
    const std::uint64_t x = rd.natural(s, "seeds");
    if (!seen.insert(x).second) rd.fail(s, fmt::format("seed {} is listed twice", x));
    spec.seeds.push_back(x);
  }

  if (auto n = root["output_dir"]) spec.output_dir = rd.string(n, "output_dir");
  if (auto n = root["plot"]) spec.plot = rd.boolean(n, "plot");
  if (auto n = root["plot_smooth"]) spec.plot_smooth = positive_size(rd, n, "plot_smooth");
  if (auto n = root["threads"]) spec.threads = positive_size(rd, n, "threads");
  if (auto n = root["wall_clock"]) spec.wall_clock = rd.boolean(n, "wall_clock");
  if (auto n = root["summary_window"]) spec.summary_window = positive_size(rd, n, "summary_window");
  for (auto& c : spec.methods) c.record_wall_time = spec.wall_clock;
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  if (path.extension() == ".json") {
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw SpecError(path.string(), 1, 1, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!manifest.contains("spec_text") || !manifest["spec_text"].is_string()) {
      throw SpecError(path.string(), 1, 1, "manifest has no embedded spec_text");
    }
    const std::string origin = manifest.value("spec_origin", path.string()) + " (from " + path.string() + ")";
    return parse_spec(manifest["spec_text"].get<std::string>(), origin);
  }
  return parse_spec(text, path.string());
}

// ---------------------------------------------------------------------------
// Metrics

std::string format_metrics_row(const MetricsRow& row) {
  const RunRecord& r = row.record;
  auto opt = [](const std::optional<double>& x) { return x ? fmt::format("{:.17g}", *x) : std::string(); };
  return fmt::format("{},{},{},{:.17g},{:.17g},{:.17g},{},{},{},{}", r.k, row.seed, row.method, r.outer_loss,
                     r.test_metric, r.hypergrad_norm, opt(r.efim_err), opt(r.crosspartial_err), r.samples_used,
                     r.wall_nanos);
}

namespace {

template <typename T>
T parse_field(const std::string& s, const std::string& origin, std::size_t line, const char* what) {
  T x{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(fmt::format("{}:{}: bad {} '{}'", origin, line, what, s));
  }
  return x;
}

}  // namespace

std::vector<MetricsRow> parse_metrics(const std::string& text, const std::string& origin) {
  if (text.find('\r') != std::string::npos) throw Error(origin + ": CR line endings are not allowed");
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      lines.push_back(text.substr(pos));
      break;
    }
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.empty()) throw Error(origin + ": empty metrics file");
  if (lines[0] != kMetricsHeader) throw Error(fmt::format("{}:1: header must be exactly '{}'", origin, kMetricsHeader));
  std::vector<MetricsRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string& l = lines[i];
    if (l.empty()) {
      if (i + 1 == lines.size()) break;
      throw Error(fmt::format("{}:{}: blank line", origin, i + 1));
    }
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = l.find(',', start);
      f.push_back(l.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const std::size_t line = i + 1;
    if (f.size() != 10) throw Error(fmt::format("{}:{}: expected 10 fields, got {}", origin, line, f.size()));
    MetricsRow row;
    row.record.k = parse_field<std::int64_t>(f[0], origin, line, "k");
    row.seed = parse_field<std::uint64_t>(f[1], origin, line, "seed");
    if (f[2].empty()) throw Error(fmt::format("{}:{}: empty method", origin, line));
    row.method = f[2];
    row.record.outer_loss = parse_field<double>(f[3], origin, line, "outer_loss");
    row.record.test_metric = parse_field<double>(f[4], origin, line, "test_metric");
    row.record.hypergrad_norm = parse_field<double>(f[5], origin, line, "hypergrad_norm");
    if (!f[6].empty()) row.record.efim_err = parse_field<double>(f[6], origin, line, "efim_err");
    if (!f[7].empty()) row.record.crosspartial_err = parse_field<double>(f[7], origin, line, "crosspartial_err");
    row.record.samples_used = parse_field<std::int64_t>(f[8], origin, line, "samples_used");
    row.record.wall_nanos = parse_field<std::int64_t>(f[9], origin, line, "wall_nanos");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(origin + ": metrics file has a header but no records");
  return rows;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  return parse_metrics(read_file(path), path.string());
}

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

/// method -> seed -> rows sorted by k, both in order of first appearance
using Grouped = std::vector<std::pair<std::string, std::vector<std::pair<std::uint64_t, std::vector<RunRecord>>>>>;

Grouped group_rows(const std::vector<MetricsRow>& rows) {
  Grouped g;
  for (const auto& r : rows) {
    auto mit = std::find_if(g.begin(), g.end(), [&](const auto& p) { return p.first == r.method; });
    if (mit == g.end()) mit = g.insert(g.end(), {r.method, {}});
    auto sit = std::find_if(mit->second.begin(), mit->second.end(), [&](const auto& p) { return p.first == r.seed; });
    if (sit == mit->second.end()) sit = mit->second.insert(mit->second.end(), {r.seed, {}});
    sit->second.push_back(r.record);
  }
  for (auto& [m, seeds] : g)
    for (auto& [s, recs] : seeds)
      std::stable_sort(recs.begin(), recs.end(), [](const RunRecord& a, const RunRecord& b) { return a.k < b.k; });
  return g;
}

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows, std::size_t window) {
  if (window == 0) throw Error("summary window must be at least 1");
  std::vector<SummaryRow> out;
  for (const auto& [method, seeds] : group_rows(rows)) {
    std::vector<double> loss, metric;
    for (const auto& [seed, recs] : seeds) {
      const std::size_t from = recs.size() > window ? recs.size() - window : 0;
      for (std::size_t i = from; i < recs.size(); ++i) {
        loss.push_back(recs[i].outer_loss);
        metric.push_back(recs[i].test_metric);
      }
    }
    out.push_back({method, loss.size(), mean_of(loss), sample_std(loss), mean_of(metric), sample_std(metric)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG

std::optional<PlotStyle> parse_plot_style(const std::string& s) {
  if (s == "loss_vs_epoch") return PlotStyle::loss_vs_epoch;
  if (s == "metric_vs_walltime") return PlotStyle::metric_vs_walltime;
  return std::nullopt;
}

const char* plot_style_name(PlotStyle s) {
  return s == PlotStyle::loss_vs_epoch ? "loss_vs_epoch" : "metric_vs_walltime";
}

std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window) {
  if (window == 0) throw Error("smoothing window must be at least 1");
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

/// Round step for about `target` ticks across [lo, hi].
double nice_step(double lo, double hi, int target) {
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

std::string tick_label(double x) {
  if (x == 0.0) return "0";
  const double a = std::abs(x);
  if (a >= 1e5 || a < 1e-3) return fmt::format("{:.1e}", x);
  return fmt::format("{:.4g}", x);
}

struct Series {
  std::string method;
  std::vector<double> x, mean, lo, hi;
};

}  // namespace

std::string render_svg(const std::vector<MetricsRow>& rows, PlotStyle style, std::size_t smooth,
                       const std::string& title) {
  if (rows.empty()) throw Error("no records to plot");
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::vector<Series> series;
  for (const auto& [method, seeds] : group_rows(rows)) {
    std::size_t n = std::numeric_limits<std::size_t>::max();
    for (const auto& [s, recs] : seeds) n = std::min(n, recs.size());
    std::vector<std::vector<double>> ys;
    for (const auto& [s, recs] : seeds) {
      std::vector<double> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = style == PlotStyle::loss_vs_epoch ? recs[i].outer_loss : recs[i].test_metric;
      }
      ys.push_back(moving_average(y, smooth));
    }
    Series sr;
    sr.method = method;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> at;
      std::vector<double> wall;
      for (std::size_t j = 0; j < ys.size(); ++j) {
        at.push_back(ys[j][i]);
        wall.push_back(static_cast<double>(seeds[j].second[i].wall_nanos) * 1e-9);
      }
      const double m = mean_of(at);
      const double sd = sample_std(at);
      sr.x.push_back(style == PlotStyle::loss_vs_epoch ? static_cast<double>(seeds[0].second[i].k) : mean_of(wall));
      sr.mean.push_back(m);
      sr.lo.push_back(m - sd);
      sr.hi.push_back(m + sd);
    }
    series.push_back(std::move(sr));
  }

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.lo[i]);
      ymax = std::max(ymax, s.hi[i]);
    }
  }
  if (!(xmax > xmin)) xmax = xmin + 1.0;
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double xstep = nice_step(xmin, xmax, 6), ystep = nice_step(ymin, ymax, 6);
  xmin = std::floor(xmin / xstep) * xstep;
  xmax = std::ceil(xmax / xstep) * xstep;
  ymin = std::floor(ymin / ystep) * ystep;
  ymax = std::ceil(ymax / ystep) * ystep;

  constexpr double W = 760, H = 460, L = 80, R = 190, T = 40, B = 60;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return T + (ymax - y) / (ymax - ymin) * ph; };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      W, H);
  svg += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  svg += fmt::format("<text x=\"{:.2f}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", L + pw / 2,
                     xml_escape(title));
  // grid and ticks
  for (double x = xmin; x <= xmax + 0.5 * xstep; x += xstep) {
    svg += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"#e0e0e0\"/>\n", px(x),
                       T, T + ph);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{}</text>\n", px(x), T + ph + 16,
                       tick_label(x));
  }
  for (double y = ymin; y <= ymax + 0.5 * ystep; y += ystep) {
    svg += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\" stroke=\"#e0e0e0\"/>\n", L,
                       py(y), L + pw);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\">{}</text>\n", L - 6, py(y) + 4,
                       tick_label(y));
  }
  svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", L, T, pw, ph);
  const char* xlabel = style == PlotStyle::loss_vs_epoch ? "outer iteration" : "wall-clock (s)";
  const char* ylabel = style == PlotStyle::loss_vs_epoch ? "outer loss" : "test metric";
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{}</text>\n", L + pw / 2, H - 18, xlabel);
  svg += fmt::format(
      "<text x=\"18\" y=\"{0:.2f}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0:.2f})\">{1}</text>\n",
      T + ph / 2, ylabel);

  for (std::size_t s = 0; s < series.size(); ++s) {
    const Series& sr = series[s];
    const char* color = palette[s % std::size(palette)];
    svg += fmt::format("<g class=\"series\" data-method=\"{}\">\n", xml_escape(sr.method));
    std::string band = "M";
    for (std::size_t i = 0; i < sr.x.size(); ++i) band += fmt::format(" {:.2f},{:.2f}", px(sr.x[i]), py(sr.hi[i]));
    for (std::size_t i = sr.x.size(); i-- > 0;) band += fmt::format(" {:.2f},{:.2f}", px(sr.x[i]), py(sr.lo[i]));
    band += " Z";
    svg += fmt::format("<path class=\"band\" d=\"{}\" fill=\"{}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n", band, color);
    std::string pts;
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      pts += fmt::format("{}{:.2f},{:.2f}", i ? " " : "", px(sr.x[i]), py(sr.mean[i]));
    }
    svg += fmt::format("<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n", pts,
                       color);
    svg += "</g>\n";
    const double ly = T + 10 + 20 * static_cast<double>(s);
    svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"14\" height=\"10\" fill=\"{}\"/>\n", L + pw + 14, ly,
                       color);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\">{}</text>\n", L + pw + 34, ly + 9, xml_escape(sr.method));
  }
  if (smooth > 1) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"10\">moving average, window {}</text>\n", L + pw + 14,
                       T + ph, smooth);
  }
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

namespace {

std::optional<std::size_t> env_threads(std::ostream& err, bool& bad) {
  const char* s = std::getenv("NHGD_THREADS");
  if (s == nullptr || *s == '\0') return std::nullopt;
  std::size_t x = 0;
  const std::string str(s);
  const auto [ptr, ec] = std::from_chars(str.data(), str.data() + str.size(), x);
  if (ec != std::errc() || ptr != str.data() + str.size() || x == 0) {
    err << "NHGD_THREADS must be a positive integer, got '" << str << "'\n";
    bad = true;
    return std::nullopt;
  }
  return x;
}

struct CellResult {
  bool done = false;
  std::optional<RunResult> run;
  std::string error;
};

}  // namespace

int cmd_run(const std::filesystem::path& spec_path, const RunOverrides& overrides, std::ostream& out,
            std::ostream& err) {
  ExperimentSpec spec;
  try {
    spec = load_spec(spec_path);
  } catch (const Error& e) {
    err << e.what() << '\n';
    return 2;
  }
  bool bad_env = false;
  if (const char* o = std::getenv("NHGD_OUT"); o != nullptr && *o != '\0') spec.output_dir = o;
  if (auto t = env_threads(err, bad_env)) spec.threads = *t;
  if (bad_env) return 2;
  if (overrides.output_dir) spec.output_dir = *overrides.output_dir;
  if (overrides.threads) spec.threads = *overrides.threads;
  if (spec.output_dir.empty()) {
    err << spec.origin << ": no output_dir (set output_dir, NHGD_OUT or --out)\n";
    return 2;
  }

  std::unique_ptr<BilevelTask> task;
  try {
    task = make_task_from_json(spec.task);
  } catch (const std::exception& e) {
    // point at the task block
    try {
      const YAML::Node root = YAML::Load(spec.source_text);
      SpecReader(spec.origin).fail(root["task"], std::string("task: ") + e.what());
    } catch (const SpecError& se) {
      err << se.what() << '\n';
    }
    return 2;
  }

  const std::filesystem::path dir = spec.output_dir;
  std::ofstream csv;
  try {
    std::filesystem::create_directories(dir);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "cannot create output directory " << dir.string() << ": " << e.code().message() << '\n';
    return 2;
  }
  csv.open(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!csv) {
    err << "cannot write " << (dir / "metrics.csv").string() << '\n';
    return 2;
  }

  const std::string started = utc_now();
  struct Cell {
    std::size_t method;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t m = 0; m < spec.methods.size(); ++m)
    for (std::uint64_t s : spec.seeds) cells.push_back({m, s});

  std::vector<CellResult> results(cells.size());
  std::mutex mu;
  std::size_t next_to_write = 0;
  csv << kMetricsHeader << '\n';
  // single writer: whoever finishes a cell flushes every completed cell in order
  auto flush_ready = [&] {
    while (next_to_write < cells.size() && results[next_to_write].done) {
      const CellResult& r = results[next_to_write];
      if (r.run) {
        const std::string label = spec.methods[cells[next_to_write].method].display_label();
        for (const auto& rec : r.run->records) {
          csv << format_metrics_row({cells[next_to_write].seed, label, rec}) << '\n';
        }
      }
      ++next_to_write;
    }
    csv.flush();
  };

  std::atomic<std::size_t> next_cell{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next_cell.fetch_add(1);
      if (i >= cells.size()) return;
      MethodConfig c = spec.methods[cells[i].method];
      c.seed = cells[i].seed;
      CellResult r;
      try {
        r.run = run_method(*task, c);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      r.done = true;
      std::lock_guard lock(mu);
      results[i] = std::move(r);
      flush_ready();
    }
  };
  const std::size_t n_threads = std::min(spec.threads, cells.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  csv.close();
  const std::string finished = utc_now();

  int failures = 0;
  nlohmann::json cell_json = nlohmann::json::array();
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string label = spec.methods[cells[i].method].display_label();
    nlohmann::json cj{{"method", label}, {"seed", cells[i].seed}};
    if (results[i].run) {
      cj["status"] = "ok";
      cj["records"] = results[i].run->records.size();
      cj["efim_skipped"] = results[i].run->efim_skipped;
      for (const auto& rec : results[i].run->records) rows.push_back({cells[i].seed, label, rec});
    } else {
      ++failures;
      cj["status"] = "failed";
      cj["error"] = results[i].error;
      err << fmt::format("method {} seed {}: {}\n", label, cells[i].seed, results[i].error);
    }
    cell_json.push_back(cj);
  }

  nlohmann::json manifest;
  manifest["spec_origin"] = spec.origin;
  manifest["spec_sha256"] = sha256_hex(spec.source_text);
  manifest["spec_text"] = spec.source_text;
  manifest["git_describe"] = git_describe();
  manifest["started_at"] = started;
  manifest["finished_at"] = finished;
  manifest["threads"] = n_threads;
  manifest["hardware_threads"] = std::thread::hardware_concurrency();
  manifest["metrics"] = "metrics.csv";
  manifest["task"] = task->name();
  manifest["cells"] = cell_json;
  {
    std::ofstream mf(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!mf) {
      err << "cannot write " << (dir / "manifest.json").string() << '\n';
      return 2;
    }
    mf << manifest.dump(2) << '\n';
  }

  if (!rows.empty()) {
    const auto summary = summarize(rows, spec.summary_window);
    std::ofstream sf(dir / "summary.csv", std::ios::binary | std::ios::trunc);
    sf << "method,records,outer_loss_mean,outer_loss_std,test_metric_mean,test_metric_std\n";
    out << fmt::format("{:<16} {:>8} {:>24} {:>24}\n", "method", "records", "outer_loss", "test_metric");
    for (const auto& s : summary) {
      sf << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", s.method, s.records, s.outer_loss_mean,
                        s.outer_loss_std, s.test_metric_mean, s.test_metric_std);
      out << fmt::format("{:<16} {:>8} {:>12.6g} +/- {:<8.3g} {:>12.6g} +/- {:<8.3g}\n", s.method, s.records,
                         s.outer_loss_mean, s.outer_loss_std, s.test_metric_mean, s.test_metric_std);
    }
    if (spec.plot) {
      for (PlotStyle st : {PlotStyle::loss_vs_epoch, PlotStyle::metric_vs_walltime}) {
        std::ofstream pf(dir / fmt::format("{}_{}.svg", task->name(), plot_style_name(st)), std::ios::binary);
        pf << render_svg(rows, st, spec.plot_smooth, fmt::format("{}: {}", task->name(), plot_style_name(st)));
      }
    }
  }
  out << "wrote " << (dir / "metrics.csv").string() << '\n';
  return failures > 0 ? 1 : 0;
}

int cmd_plot(const std::filesystem::path& metrics_path, PlotStyle style, std::size_t smooth,
             const std::optional<std::filesystem::path>& out_path, std::ostream& out, std::ostream& err) {
  std::vector<MetricsRow> rows;
  try {
    rows = read_metrics(metrics_path);
  } catch (const Error& e) {
    err << e.what() << '\n';
    return 2;
  }
  if (smooth == 0) {
    err << "--smooth must be at least 1\n";
    return 2;
  }
  const std::filesystem::path target =
      out_path ? *out_path
               : metrics_path.parent_path() /
                     fmt::format("{}_{}.svg", metrics_path.stem().string(), plot_style_name(style));
  std::ofstream f(target, std::ios::binary | std::ios::trunc);
  if (!f) {
    err << "cannot write " << target.string() << '\n';
    return 2;
  }
  f << render_svg(rows, style, smooth, fmt::format("{}: {}", metrics_path.stem().string(), plot_style_name(style)));
  out << "wrote " << target.string() << '\n';
  return 0;
}

int cmd_verify(const std::string& suite, bool verbose, std::ostream& out, std::ostream& err) {
  const auto ids = suite_criteria(suite);
  if (!ids) {
    std::string names;
    for (const auto& n : suite_names()) names += (names.empty() ? "" : ", ") + n;
    err << fmt::format("unknown suite '{}'; valid suites: {}\n", suite, names);
    return 2;
  }
  bool failed = false;
  for (int id : *ids) {
    const CriterionResult r = run_criterion(id, [&](const std::string& line) {
      if (verbose) out << "  " << line << std::endl;
    });
    out << format_result(r) << std::endl;
    failed = failed || r.verdict == Verdict::fail;
  }
  return failed ? 1 : 0;
}

}  // namespace nhgd
