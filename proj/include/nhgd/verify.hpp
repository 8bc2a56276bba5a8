#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nhgd {

enum class Verdict { pass, fail, skip };

const char* verdict_name(Verdict v);

struct CriterionResult {
  int id = 0;
  std::string name;
  Verdict verdict = Verdict::fail;
  std::string detail;  // measured values against thresholds
  double seconds = 0.0;
  double time_limit = 0.0;  // exceeding it fails the criterion
};

/// Progress lines from long-running checks.
using VerifyLog = std::function<void(const std::string&)>;

/// Runs acceptance check `id` (1..11).
CriterionResult run_criterion(int id, const VerifyLog& log = {});

/// Number of acceptance checks.
inline constexpr int kCriterionCount = 11;

/// Suite names accepted by `verify`, in display order. "all" runs everything;
/// the result names (efim_rate, ...) are accepted as well.
const std::vector<std::string>& suite_names();
/// Criterion ids behind a suite; nullopt for an unknown name.
std::optional<std::vector<int>> suite_criteria(const std::string& suite);

/// One-line summary, e.g. "[PASS] 1 sm_exactness: ... (0.21 s / 5 s)".
std::string format_result(const CriterionResult& r);

}  // namespace nhgd
