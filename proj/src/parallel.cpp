#include "nhgd/parallel.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/core.h>
#include "json.hpp"

#include "nhgd/channel.hpp"

namespace nhgd {

namespace {

using Clock = std::chrono::steady_clock;

/// Raised by a worker whose peer went away; the peer's own error is the real cause.
class PeerGone : public Error {
 public:
  using Error::Error;
};

class Tracer {
 public:
  explicit Tracer(const std::optional<std::filesystem::path>& path) {
    if (path) {
      out_.open(*path, std::ios::trunc);
      if (!out_) throw Error(fmt::format("cannot open message trace {}", path->string()));
    }
  }

  void log(const char* from, const char* to, const char* type, std::int64_t k, std::int64_t t = -1) {
    if (!out_.is_open()) return;
    std::lock_guard lock(mu_);
    nlohmann::json j;
    j["seq"] = seq_++;
    j["from"] = from;
    j["to"] = to;
    j["type"] = type;
    j["k"] = k;
    if (t >= 0) j["t"] = t;
    out_ << j.dump() << '\n';
  }

 private:
  std::ofstream out_;
  std::mutex mu_;
  std::atomic<std::int64_t> seq_{0};
};

struct Channels {
  Channel<InnerMessage> inner;
  Channel<BoundaryMessage> boundary;
  Channel<OuterMessage> outer;

  explicit Channels(std::size_t capacity) : inner(capacity), boundary(capacity), outer(capacity) {}

  void close_all() {
    inner.close();
    boundary.close();
    outer.close();
  }
};

}  // namespace

ParallelResult run_parallel_nhgd(const BilevelTask& task, const MethodConfig& config, const ParallelOptions& options,
                                 const RunHooks& hooks) {
  if (!std::holds_alternative<NhgdMethod>(config.method)) {
    throw Error("run_parallel_nhgd: method is " + method_name(config.method));
  }
  if (options.channel_capacity == 0) throw Error("run_parallel_nhgd: channel capacity must be at least 1");
  config.validate();

  const RngFactory rngs(config.seed);
  const DenseVector v0 = initial_outer_for(task, config);
  const auto k_outer = static_cast<std::size_t>(config.k_outer);
  const bool trajectory = config.cross_partial.mode == CrossPartialMode::trajectory;

  Channels ch(options.channel_capacity);
  Tracer tracer(options.trace_path);
  std::mutex hook_mu;
  ParallelResult result;
  MessageCensus& census = result.census;
  census.inner.assign(k_outer, 0);
  census.boundary.assign(k_outer, 0);
  census.outer.assign(k_outer, 0);
  std::atomic<std::int64_t> order_violations{0};
  std::exception_ptr optimizer_error;
  std::exception_ptr approximator_error;

  // Device 1: sampling, inner SGD, outer derivatives at theta_T, evaluation.
  auto optimizer = [&] {
    try {
      DenseVector v = v0;
      DenseVector theta = task.initial_inner();
      std::int64_t samples = 0;
      std::int64_t wall = 0;
      for (std::int64_t k = 0; k < config.k_outer; ++k) {
        const auto start = Clock::now();
        const InnerObserver send_inner = [&](std::int64_t t, const DenseVector& g, const DenseMatrix* cross) {
          if (ch.outer.size() != 0) ++census.reverse_during_inner;
          InnerMessage msg{k, t, g, std::nullopt};
          if (cross != nullptr) msg.cross_partial = *cross;
          tracer.log("optimizer", "approximator", "inner", k, t);
          if (!ch.inner.send(std::move(msg))) throw PeerGone("approximator stopped receiving");
        };
        OptimizerOutput opt = nhgd_optimizer_step(task, config, rngs, k, v, theta, send_inner);
        tracer.log("optimizer", "approximator", "boundary", k);
        if (!ch.boundary.send(BoundaryMessage{k, opt.grad_theta_f, opt.grad_v_f, std::move(opt.endpoint_cross)})) {
          throw PeerGone("approximator stopped receiving");
        }
        auto reply = ch.outer.recv();
        if (!reply) throw PeerGone("approximator closed the outer channel");
        if (reply->k != k) {
          ++order_violations;
          throw Error(fmt::format("outer message for k={} arrived while waiting for k={}", reply->k, k));
        }
        ++census.outer[static_cast<std::size_t>(k)];
        tracer.log("approximator", "optimizer", "outer-received", k);
        wall += std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
        samples += opt.samples;
        if (should_record(config, k)) {
          RunRecord r = evaluate_record(task, k, v, opt.theta_t, reply->hypergrad);
          r.efim_err = reply->efim_err;
          r.crosspartial_err = reply->crosspartial_err;
          r.samples_used = samples;
          r.wall_nanos = config.record_wall_time ? wall : 0;
          result.run.records.push_back(r);
        }
        if (hooks.on_outer) {
          std::lock_guard lock(hook_mu);
          hooks.on_outer(k, v, opt.theta_t, reply->hypergrad);
        }
        v = std::move(reply->next_v);  // authoritative copy from the approximator
        theta = std::move(opt.theta_t);
      }
      result.run.final_v = std::move(v);
      result.run.final_theta = std::move(theta);
      ch.inner.close();
      ch.boundary.close();
    } catch (...) {
      optimizer_error = std::current_exception();
      ch.close_all();
    }
  };

  // Device 2: estimator updates, hypergradient assembly, outer step.
  auto approximator = [&] {
    try {
      NhgdApproximator approx(task, config, v0);
      for (std::int64_t k = 0; k < config.k_outer; ++k) {
        approx.begin_outer(k);
        for (std::int64_t t = 0; t < config.inner_t; ++t) {
          auto msg = ch.inner.recv();
          if (!msg) throw PeerGone("optimizer closed the inner channel");
          if (msg->k != k || msg->t != t) {
            ++order_violations;
            throw Error(fmt::format("inner message (k={}, t={}) arrived, expected (k={}, t={})", msg->k, msg->t, k, t));
          }
          ++census.inner[static_cast<std::size_t>(k)];
          if (trajectory && !msg->cross_partial) throw Error("inner message lacks its cross-partial");
          if (approx.observe(t, msg->g_theta, msg->cross_partial ? &*msg->cross_partial : nullptr) ==
                  ObserveStatus::skipped &&
              hooks.on_event) {
            std::lock_guard lock(hook_mu);
            hooks.on_event(fmt::format("k={} t={}: EFIM update skipped (safeguard)", k, t));
          }
        }
        auto boundary = ch.boundary.recv();
        if (!boundary) throw PeerGone("optimizer closed the boundary channel");
        if (boundary->k != k) {
          ++order_violations;
          throw Error(fmt::format("boundary message for k={} arrived, expected k={}", boundary->k, k));
        }
        ++census.boundary[static_cast<std::size_t>(k)];
        auto outcome = approx.finish(k, boundary->grad_theta_f, boundary->grad_v_f,
                                     boundary->endpoint_cross_partial ? &*boundary->endpoint_cross_partial : nullptr);
        tracer.log("approximator", "optimizer", "outer", k);
        if (!ch.outer.send(OuterMessage{k, std::move(outcome.hypergrad), std::move(outcome.next_v), outcome.efim_err,
                                        outcome.crosspartial_err})) {
          throw PeerGone("optimizer stopped receiving");
        }
      }
      result.run.efim_skipped = approx.efim().skipped;
      // anything still queued would mean the optimizer ran ahead of the protocol
      if (ch.inner.recv()) throw Error("optimizer sent inner messages past the last outer iteration");
      ch.outer.close();
    } catch (...) {
      approximator_error = std::current_exception();
      ch.close_all();
    }
  };

  std::thread device1(optimizer);
  std::thread device2(approximator);
  device1.join();
  device2.join();
  census.order_violations = order_violations.load();

  auto is_secondary = [](const std::exception_ptr& e) {
    try {
      std::rethrow_exception(e);
    } catch (const PeerGone&) {
      return true;
    } catch (...) {
      return false;
    }
  };
  auto rethrow_as = [](const std::exception_ptr& e, const char* role) {
    try {
      std::rethrow_exception(e);
    } catch (const std::exception& ex) {
      throw Error(fmt::format("parallel run failed in the {} worker: {}", role, ex.what()));
    } catch (...) {
      throw Error(fmt::format("parallel run failed in the {} worker: unknown error", role));
    }
  };
  if (optimizer_error && !is_secondary(optimizer_error)) rethrow_as(optimizer_error, "optimizer");
  if (approximator_error && !is_secondary(approximator_error)) rethrow_as(approximator_error, "approximator");
  if (optimizer_error) rethrow_as(optimizer_error, "optimizer");
  if (approximator_error) rethrow_as(approximator_error, "approximator");
  return result;
}

}  // namespace nhgd
