#pragma once

#include <cstdint>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "speckv/config.hpp"
#include "speckv/core.hpp"

namespace speckv {

enum class ScheduleKind { Staggered, Lockstep, SequentialVerify, FullKvBaseline };

std::string_view to_string(ScheduleKind k);
ScheduleKind schedule_from_string(std::string_view s);

// Discrete event; processed in nondecreasing time with ties broken by
// (kind order, request id, insertion serial).
struct SimEvent {
  enum class Kind {
    RequestArrival = 0,
    TransferComplete = 1,
    IterationTick = 2,
    VerifyComplete = 3,
    RequestDone = 4,
  };

  double time = 0.0;
  Kind kind = Kind::IterationTick;
  RequestId request = 0;
  std::int64_t payload = 0;
  std::uint64_t serial = 0;  // assigned by the queue
};

class EventQueue {
 public:
  void push(SimEvent event);
  SimEvent pop();
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const;
  };
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> heap_;
  std::uint64_t next_serial_ = 0;
};

struct SimMetrics {
  double tokens_emitted = 0.0;
  double sim_time = 0.0;
  double throughput = 0.0;       // tokens_emitted / sim_time
  double warm_throughput = 0.0;  // first and last 10% of sim time excluded
  std::vector<double> latencies;
  double p50_latency = 0.0;
  double p99_latency = 0.0;
  Bytes peak_hbm = 0;
  Bytes hbm_excess = 0;  // peak above capacity (lock-step may exceed)
  double interconnect_busy = 0.0;
  std::vector<int> verify_counts;  // per-iteration
  std::int64_t late_transfers = 0;
  std::int64_t completed = 0;
  std::int64_t unserved = 0;           // requests that can never fit (baseline)
  double per_cycle_transfer = 0.0;     // serialized link seconds per verify cycle
  std::uint64_t seed = 0;
  std::string schedule;
  std::string scenario;

  static std::string csv_header();
  std::string csv_row(int batch, int draft_length, double compression) const;
};

// Staggered / lock-step / sequential-verify / full-KV simulation of the
// single-GPU long-context pipeline.
SimMetrics simulate_long_context(const SystemConfig& config, const std::vector<Request>& workload,
                                 ScheduleKind schedule, std::uint64_t seed);

// Two-pool remote-prefix pipeline: compressed KV to the remote drafter over
// the slow link, full KV to the local verifier over the fast link.
SimMetrics simulate_remote_prefix(const SystemConfig& config, const std::vector<Request>& workload,
                                  std::uint64_t seed);

// No speculation: full caches resident, batch capped by GPU memory.
SimMetrics simulate_baseline_full_kv(const SystemConfig& config,
                                     const std::vector<Request>& workload);

// Dispatch on scenario + schedule; validates the combination.
SimMetrics simulate(const SystemConfig& config, const std::vector<Request>& workload,
                    ScheduleKind schedule, std::uint64_t seed);

// One row per schedule on the same workload and seed (long-context only).
std::vector<SimMetrics> compare_schedules(const SystemConfig& config,
                                          const std::vector<Request>& workload,
                                          std::uint64_t seed);

}  // namespace speckv
