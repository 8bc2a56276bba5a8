// Regenerates tests/golden/data_cleaning_fd.json: central-difference
// hypergradient of a small data-cleaning instance at interior weights.
//
//   make_golden <output.json>

#include <cstdio>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "json.hpp"
#include "nhgd/oracles.hpp"
#include "nhgd/softmax_tasks.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_golden <output.json>\n";
    return 2;
  }
  using namespace nhgd;
  DataCleaningParams p;
  p.n_train = 24;
  p.d_feat = 3;
  p.n_classes = 3;
  p.corruption_rate = 0.3;
  p.lambda_reg = 0.1;
  p.rng_seed = 11;
  p.val_fraction = 0.5;
  p.test_fraction = 0.25;
  const auto task = make_data_cleaning_task(p);

  // weights strictly inside (0, 1) so the clip is differentiable
  DenseVector v(task->metadata().d_outer);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.2 + 0.6 * static_cast<double>(i % 7) / 6.0;

  constexpr double h = 1e-4;
  InnerSolveOptions opts;
  opts.tol = 1e-13;
  opts.kind = InnerSolverKind::newton;
  const DenseVector fd = fd_hypergradient(*task, v, h, opts);

  nlohmann::json out;
  out["task"] = task->describe();
  out["v"] = v.values();
  out["hypergradient"] = fd.values();
  out["provenance"] = {{"command", "make_golden tests/golden/data_cleaning_fd.json"},
                       {"method", "central differences of the outer objective"},
                       {"h", h},
                       {"inner_solver", "newton"},
                       {"inner_tol", opts.tol}};
  std::ofstream f(argv[1]);
  if (!f) {
    std::cerr << "cannot write " << argv[1] << '\n';
    return 1;
  }
  f << out.dump(2) << '\n';
  std::cout << fmt::format("wrote {} ({} weights)\n", argv[1], v.size());
  return 0;
}
