#include "speckv/sim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <sstream>

#include "speckv/analytics.hpp"
#include "speckv/scheduler.hpp"
#include "speckv/util.hpp"

namespace speckv {

namespace {
constexpr double kTimeEps = 1e-12;
}

std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Staggered: return "staggered";
    case ScheduleKind::Lockstep: return "lockstep";
    case ScheduleKind::SequentialVerify: return "sequential-verify";
    case ScheduleKind::FullKvBaseline: return "full-kv-baseline";
  }
  return "?";
}

ScheduleKind schedule_from_string(std::string_view s) {
  if (s == "staggered") return ScheduleKind::Staggered;
  if (s == "lockstep") return ScheduleKind::Lockstep;
  if (s == "sequential-verify") return ScheduleKind::SequentialVerify;
  if (s == "full-kv-baseline") return ScheduleKind::FullKvBaseline;
  throw ConfigError(
      "schedule must be one of {staggered, lockstep, sequential-verify, full-kv-baseline}");
}

bool EventQueue::Later::operator()(const SimEvent& a, const SimEvent& b) const {
  if (a.time != b.time) return a.time > b.time;
  if (a.kind != b.kind) return static_cast<int>(a.kind) > static_cast<int>(b.kind);
  if (a.request != b.request) return a.request > b.request;
  return a.serial > b.serial;
}

void EventQueue::push(SimEvent event) {
  event.serial = next_serial_++;
  heap_.push(event);
}

SimEvent EventQueue::pop() {
  if (heap_.empty()) throw ContractError("EventQueue::pop on empty queue");
  SimEvent e = heap_.top();
  heap_.pop();
  return e;
}

std::string SimMetrics::csv_header() {
  return "schedule,B,x,c,throughput_tok_s,p50_latency_s,p99_latency_s,peak_hbm_bytes,"
         "interconnect_busy";
}

std::string SimMetrics::csv_row(int batch, int draft_length, double compression) const {
  std::ostringstream out;
  out << schedule << ',' << batch << ',' << draft_length << ',' << format_double(compression)
      << ',' << format_double(throughput) << ',' << format_double(p50_latency) << ','
      << format_double(p99_latency) << ',' << peak_hbm << ','
      << format_double(interconnect_busy);
  return out.str();
}

namespace {

// ---------------------------------------------------------------------------
// Shared metric plumbing
// ---------------------------------------------------------------------------

struct EmissionLog {
  std::vector<std::pair<double, double>> events;  // (time, tokens)
  double total = 0.0;

  void add(double time, double tokens) {
    if (tokens <= 0.0) return;
    events.push_back({time, tokens});
    total += tokens;
  }
};

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(values.size())));
  rank = std::min(std::max<std::size_t>(rank, 1), values.size());
  return values[rank - 1];
}

void finalize_metrics(SimMetrics& m, const EmissionLog& log, double end_time,
                      Bytes hbm_capacity) {
  m.tokens_emitted = log.total;
  m.sim_time = end_time;
  m.throughput = end_time > 0.0 ? log.total / end_time : 0.0;
  double lo = 0.1 * end_time;
  double hi = 0.9 * end_time;
  double warm_tokens = 0.0;
  for (const auto& [t, tokens] : log.events) {
    if (t >= lo - kTimeEps && t <= hi + kTimeEps) warm_tokens += tokens;
  }
  m.warm_throughput = hi > lo ? warm_tokens / (hi - lo) : 0.0;
  m.p50_latency = percentile(m.latencies, 0.50);
  m.p99_latency = percentile(m.latencies, 0.99);
  m.hbm_excess = std::max<Bytes>(0, m.peak_hbm - hbm_capacity);
}

Bytes resident_bytes_for(const Request& r) {
  if (!r.speculating) return r.kv_full_bytes;
  return static_cast<Bytes>(std::ceil(r.compression_ratio * static_cast<double>(r.kv_full_bytes)));
}

std::vector<Request> sorted_by_arrival(std::vector<Request> workload) {
  std::stable_sort(workload.begin(), workload.end(), [](const Request& a, const Request& b) {
    if (a.arrival != b.arrival) return a.arrival < b.arrival;
    return a.id < b.id;
  });
  return workload;
}

std::unique_ptr<RoundSampler> make_sampler(const SystemConfig& cfg, std::uint64_t seed) {
  if (cfg.acceptance_realization == AcceptanceRealization::DeterministicMean) {
    return std::make_unique<MeanRoundSampler>(cfg.acceptance);
  }
  return std::make_unique<GeometricRoundSampler>(cfg.acceptance, seed);
}

// Serialized FIFO link; completion times never decrease.
struct LinkTimeline {
  double bandwidth = 1.0;
  double free_time = 0.0;
  double busy_total = 0.0;
  std::deque<std::pair<ReservationId, double>> pending;

  double enqueue(ReservationId id, Bytes bytes, double now) {
    double begin = std::max(now, free_time);
    double duration = static_cast<double>(bytes) / bandwidth;
    free_time = begin + duration;
    busy_total += duration;
    pending.push_back({id, free_time});
    return free_time;
  }

  std::vector<ReservationId> completed_through(double t) {
    std::vector<ReservationId> out;
    while (!pending.empty() && pending.front().second <= t + kTimeEps) {
      out.push_back(pending.front().first);
      pending.pop_front();
    }
    return out;
  }
};

double compressor_overhead(const SystemConfig& cfg) {
  if (cfg.compressor && cfg.compressor->mode == CompressorMode::Online) {
    return cfg.compressor->per_iteration_overhead;
  }
  return 0.0;
}

// Eq.-(1)-style planning iteration time at the current batch; the ring's
// booking capacity, distinct from the realized per-iteration wall time.
double planning_time(const SystemConfig& cfg, int batch) {
  if (cfg.iteration_time_mode == IterationTimeMode::Fixed) return *cfg.iteration_time;
  int b = std::max(1, batch);
  return t_iter_staggered(cfg.model.weights_bytes, b, cfg.kv_full_bytes, cfg.compression_ratio,
                          cfg.draft_length, cfg.hardware.hbm_bandwidth,
                          *cfg.hardware.interconnect_bandwidth);
}

// ---------------------------------------------------------------------------
// Long-context, staggered (scheduler-driven)
// ---------------------------------------------------------------------------

SimMetrics simulate_staggered(const SystemConfig& cfg, const std::vector<Request>& workload,
                              std::uint64_t seed) {
  auto sampler = make_sampler(cfg, seed);
  SpecScheduler scheduler(cfg, *sampler);
  LinkTimeline link;
  link.bandwidth = *cfg.hardware.interconnect_bandwidth;
  const double overhead = compressor_overhead(cfg);

  std::vector<Request> arrivals = sorted_by_arrival(workload);
  std::map<RequestId, const Request*> by_id;
  for (const Request& r : arrivals) {
    by_id[r.id] = &r;
    if (cfg.model.weights_bytes + resident_bytes_for(r) > cfg.hardware.gpu_mem) {
      throw ConfigError("request " + std::to_string(r.id) + " can never fit in GPU memory");
    }
  }
  {
    // A reload span wider than the horizon would wait forever.
    double t_est = planning_time(cfg, static_cast<int>(arrivals.size()));
    for (const Request& r : arrivals) {
      if (!r.speculating) continue;
      ReloadSpan span = reload_span(r.kv_full_bytes, link.bandwidth, t_est);
      if (span.windows > cfg.lookahead_window - 1) {
        throw ConfigError("lookahead_window too small for request " + std::to_string(r.id) +
                          "'s reload span");
      }
    }
  }

  SimMetrics metrics;
  metrics.seed = seed;
  metrics.schedule = std::string(to_string(ScheduleKind::Staggered));
  metrics.scenario = std::string(to_string(cfg.scenario));
  EmissionLog log;

  std::size_t next_arrival = 0;
  double t_wall = 0.0;
  Bytes actual_resident = 0;
  std::map<ReservationId, Bytes> inflight;
  Bytes inflight_total = 0;
  std::map<RequestId, ReservationId> load_of;
  std::int64_t no_progress = 0;
  const std::int64_t progress_guard =
      10000 + 20LL * (cfg.lookahead_window + cfg.draft_length);

  while (next_arrival < arrivals.size() || !scheduler.idle()) {
    if (scheduler.idle() && arrivals[next_arrival].arrival > t_wall + kTimeEps) {
      t_wall = arrivals[next_arrival].arrival;
    }

    StepEvents events;
    while (next_arrival < arrivals.size() &&
           arrivals[next_arrival].arrival <= t_wall + kTimeEps) {
      events.arrivals.push_back(arrivals[next_arrival++]);
    }

    double plan = planning_time(cfg, scheduler.active_batch());
    scheduler.set_planning_iteration_time(plan);

    // Start this iteration's transfers before stepping so a short transfer
    // can complete within the very iteration it was kicked in.
    for (const Reservation& res : scheduler.pending_kickoffs()) {
      link.enqueue(res.id, res.transfer_bytes, t_wall);
      Bytes alloc = res.bytes > 0 ? res.bytes : res.transfer_bytes;
      inflight.emplace(res.id, alloc);
      inflight_total += alloc;
      if (res.bytes == 0) load_of[res.request_id] = res.id;
    }
    events.completed_transfers = link.completed_through(t_wall + plan);

    StepResult step = scheduler.execution_step(events);

    double wall = cfg.iteration_time_mode == IterationTimeMode::Fixed
                      ? *cfg.iteration_time
                      : static_cast<double>(step.hbm_read_bytes) / cfg.hardware.hbm_bandwidth;
    wall += overhead;
    double step_end = t_wall + wall;

    metrics.peak_hbm = std::max(
        metrics.peak_hbm, cfg.model.weights_bytes + actual_resident + inflight_total);

    if (step.tokens_emitted > 0.0) log.add(step_end, step.tokens_emitted);
    metrics.verify_counts.push_back(step.verify_count);
    metrics.late_transfers += static_cast<std::int64_t>(step.late_transfers.size());

    for (const VerifyOutcome& v : step.verifies) {
      auto it = inflight.find(v.reservation);
      if (it != inflight.end()) {
        inflight_total -= it->second;
        inflight.erase(it);
      }
    }
    for (RequestId id : step.activated) {
      auto load = load_of.find(id);
      if (load != load_of.end()) {
        auto it = inflight.find(load->second);
        if (it != inflight.end()) {
          inflight_total -= it->second;
          inflight.erase(it);
        }
        load_of.erase(load);
      }
      actual_resident += resident_bytes_for(*by_id.at(id));
    }
    for (RequestId id : step.completed) {
      const Request& r = *by_id.at(id);
      actual_resident -= resident_bytes_for(r);
      metrics.latencies.push_back(step_end - r.arrival);
      metrics.completed += 1;
    }

    bool progressed = !step.verifies.empty() || !step.activated.empty() ||
                      !step.admitted.empty() || !events.arrivals.empty() ||
                      step.tokens_emitted > 0.0;
    no_progress = progressed ? 0 : no_progress + 1;
    if (no_progress > progress_guard) {
      throw ConfigError("staggered simulation stalled: no progress for " +
                        std::to_string(no_progress) + " iterations");
    }
    t_wall = step_end;
  }

  metrics.interconnect_busy = t_wall > 0.0 ? link.busy_total / t_wall : 0.0;
  finalize_metrics(metrics, log, t_wall, cfg.hardware.gpu_mem);
  return metrics;
}

// ---------------------------------------------------------------------------
// Long-context, lock-step and sequential-verify (cycle loops)
// ---------------------------------------------------------------------------

struct CycleRequest {
  const Request* req;
  double remaining;
};

SimMetrics simulate_cycles(const SystemConfig& cfg, const std::vector<Request>& workload,
                           ScheduleKind schedule, std::uint64_t seed) {
  auto sampler = make_sampler(cfg, seed);
  const bool lockstep = schedule == ScheduleKind::Lockstep;
  const double bw_hbm = cfg.hardware.hbm_bandwidth;
  const double bw_inter = *cfg.hardware.interconnect_bandwidth;
  const double overhead = compressor_overhead(cfg);
  const int x = cfg.draft_length;
  const Bytes weights = cfg.model.weights_bytes;

  SimMetrics metrics;
  metrics.seed = seed;
  metrics.schedule = std::string(to_string(schedule));
  metrics.scenario = std::string(to_string(cfg.scenario));
  EmissionLog log;

  std::vector<Request> arrivals = sorted_by_arrival(workload);
  std::size_t next_arrival = 0;
  std::vector<CycleRequest> active;
  double t = 0.0;
  double link_busy = 0.0;

  while (next_arrival < arrivals.size() || !active.empty()) {
    while (next_arrival < arrivals.size() &&
           arrivals[next_arrival].arrival <= t + kTimeEps) {
      active.push_back({&arrivals[next_arrival], static_cast<double>(
                                                     arrivals[next_arrival].output_tokens)});
      ++next_arrival;
    }
    if (active.empty()) {
      t = arrivals[next_arrival].arrival;
      continue;
    }

    Bytes compressed_sum = 0;
    Bytes full_sum = 0;
    Bytes max_full = 0;
    for (const CycleRequest& cr : active) {
      compressed_sum += resident_bytes_for(*cr.req);
      full_sum += cr.req->kv_full_bytes;
      max_full = std::max(max_full, cr.req->kv_full_bytes);
    }

    double t_draft = static_cast<double>(weights + compressed_sum) / bw_hbm + overhead;
    double transfer = static_cast<double>(full_sum) / bw_inter;
    double cycle;
    if (lockstep) {
      // All verifies batch at the cycle end: the link serializes every full
      // KV, and HBM spikes to weights + all full caches (compressed caches
      // offloaded for the verify pass).
      double t_verify = static_cast<double>(weights + full_sum) / bw_hbm;
      cycle = x * t_draft + transfer + t_verify;
      metrics.peak_hbm = std::max(metrics.peak_hbm, weights + full_sum);
      for (int i = 0; i < x; ++i) metrics.verify_counts.push_back(0);
      metrics.verify_counts.push_back(static_cast<int>(active.size()));
    } else {
      // One verify per iteration after drafting: a single full cache on GPU
      // at a time, but the same serialized transfer total on the link.
      cycle = x * t_draft;
      for (const CycleRequest& cr : active) {
        cycle += static_cast<double>(cr.req->kv_full_bytes) / bw_inter +
                 static_cast<double>(weights + cr.req->kv_full_bytes) / bw_hbm;
      }
      metrics.peak_hbm = std::max(metrics.peak_hbm, weights + compressed_sum + max_full);
      for (int i = 0; i < x; ++i) metrics.verify_counts.push_back(0);
      for (std::size_t i = 0; i < active.size(); ++i) metrics.verify_counts.push_back(1);
    }
    metrics.peak_hbm = std::max(metrics.peak_hbm, weights + compressed_sum);
    metrics.per_cycle_transfer = std::max(metrics.per_cycle_transfer, transfer);
    link_busy += transfer;

    double cycle_end = t + cycle;
    double emitted_this_cycle = 0.0;
    std::vector<CycleRequest> still_active;
    for (CycleRequest& cr : active) {
      double accepted = sampler->accepted_drafted(x, cr.req->compression_ratio);
      double emitted = std::min(accepted + 1.0, cr.remaining);
      cr.remaining -= emitted;
      emitted_this_cycle += emitted;
      if (cr.remaining <= 1e-9) {
        metrics.latencies.push_back(cycle_end - cr.req->arrival);
        metrics.completed += 1;
      } else {
        still_active.push_back(cr);
      }
    }
    log.add(cycle_end, emitted_this_cycle);
    active.swap(still_active);
    t = cycle_end;
  }

  metrics.interconnect_busy = t > 0.0 ? link_busy / t : 0.0;
  finalize_metrics(metrics, log, t, cfg.hardware.gpu_mem);
  return metrics;
}

// ---------------------------------------------------------------------------
// Long-context, full-KV baseline
// ---------------------------------------------------------------------------

SimMetrics baseline_full_kv(const SystemConfig& cfg, const std::vector<Request>& workload) {
  const Bytes weights = cfg.model.weights_bytes;
  const double bw_hbm = cfg.hardware.hbm_bandwidth;

  SimMetrics metrics;
  metrics.schedule = std::string(to_string(ScheduleKind::FullKvBaseline));
  metrics.scenario = std::string(to_string(cfg.scenario));
  EmissionLog log;

  std::vector<Request> arrivals = sorted_by_arrival(workload);
  std::deque<const Request*> waiting;
  std::size_t next_arrival = 0;
  struct Active {
    const Request* req;
    std::int64_t remaining;
  };
  std::vector<Active> active;
  Bytes resident = 0;
  double t = 0.0;

  for (const Request& r : arrivals) {
    if (weights + r.kv_full_bytes > cfg.hardware.gpu_mem) metrics.unserved += 1;
  }
  if (metrics.unserved == static_cast<std::int64_t>(arrivals.size()) && !arrivals.empty()) {
    // zero-throughput signal: nothing fits next to the weights
    metrics.peak_hbm = weights;
    finalize_metrics(metrics, log, 0.0, cfg.hardware.gpu_mem);
    return metrics;
  }

  while (next_arrival < arrivals.size() || !waiting.empty() || !active.empty()) {
    while (next_arrival < arrivals.size() &&
           arrivals[next_arrival].arrival <= t + kTimeEps) {
      const Request& r = arrivals[next_arrival++];
      if (weights + r.kv_full_bytes > cfg.hardware.gpu_mem) continue;  // counted above
      waiting.push_back(&r);
    }
    while (!waiting.empty() &&
           weights + resident + waiting.front()->kv_full_bytes <= cfg.hardware.gpu_mem) {
      const Request* r = waiting.front();
      waiting.pop_front();
      active.push_back({r, r->output_tokens});
      resident += r->kv_full_bytes;
    }
    if (active.empty()) {
      if (next_arrival < arrivals.size()) {
        t = std::max(t, arrivals[next_arrival].arrival);
        continue;
      }
      break;
    }

    metrics.peak_hbm = std::max(metrics.peak_hbm, weights + resident);
    double t_iter = static_cast<double>(weights + resident) / bw_hbm;
    double step_end = t + t_iter;
    double emitted = 0.0;
    std::vector<Active> still;
    for (Active& a : active) {
      a.remaining -= 1;
      emitted += 1.0;
      if (a.remaining == 0) {
        metrics.latencies.push_back(step_end - a.req->arrival);
        metrics.completed += 1;
        resident -= a.req->kv_full_bytes;
      } else {
        still.push_back(a);
      }
    }
    log.add(step_end, emitted);
    metrics.verify_counts.push_back(0);
    active.swap(still);
    t = step_end;
  }

  finalize_metrics(metrics, log, t, cfg.hardware.gpu_mem);
  return metrics;
}

// ---------------------------------------------------------------------------
// Remote prefix caching (event-driven, two pools)
// ---------------------------------------------------------------------------

struct RemoteState {
  const Request* req = nullptr;
  double remaining = 0.0;
  int remote_gpu = -1;
  bool active = false;         // compressed KV arrived, drafting possible
  bool kv_on_local = false;    // cached verification KV present
  double draft_done = 0.0;
  double prefetch_done = 0.0;
};

SimMetrics remote_prefix(const SystemConfig& cfg, const std::vector<Request>& workload,
                         std::uint64_t seed, bool force_baseline) {
  if (cfg.hardware.local_gpus < 1) throw ConfigError("remote-prefix requires local_gpus >= 1");
  if (!force_baseline && cfg.hardware.remote_gpus < 1) {
    throw ConfigError("remote-prefix requires remote_gpus >= 1");
  }
  auto sampler = make_sampler(cfg, seed);
  const double bw_l = *cfg.hardware.storage_remote_bandwidth;
  const double bw_h = *cfg.hardware.storage_local_bandwidth;
  const double bw_hbm = cfg.hardware.hbm_bandwidth;
  const Bytes weights = cfg.model.weights_bytes;
  const int x = cfg.draft_length;

  SimMetrics metrics;
  metrics.seed = seed;
  metrics.schedule = std::string(
      to_string(force_baseline ? ScheduleKind::FullKvBaseline : ScheduleKind::Staggered));
  metrics.scenario = std::string(to_string(cfg.scenario));
  EmissionLog log;

  std::map<RequestId, RemoteState> states;
  EventQueue queue;
  for (const Request& r : workload) {
    RemoteState st;
    st.req = &r;
    st.remaining = static_cast<double>(r.output_tokens);
    states[r.id] = st;
    queue.push({r.arrival, SimEvent::Kind::RequestArrival, r.id, 0});
  }

  LinkTimeline slow;
  slow.bandwidth = bw_l;
  LinkTimeline fast;
  fast.bandwidth = bw_h;
  std::vector<double> local_free(std::max(1, cfg.hardware.local_gpus), 0.0);
  std::vector<int> remote_occupancy(std::max(1, cfg.hardware.remote_gpus), 0);
  Bytes local_inflight = 0;
  double end_time = 0.0;

  // payload codes for TransferComplete / VerifyComplete events
  constexpr std::int64_t kCompressedLoaded = 0;
  constexpr std::int64_t kVerifyReady = 2;
  constexpr std::int64_t kBaselineDone = 3;

  auto decode_time = [&](const RemoteState& st) {
    if (cfg.decode_time) return *cfg.decode_time;
    int occ = std::max(1, remote_occupancy[st.remote_gpu]);
    return t_tok(weights, occ, st.req->kv_full_bytes, bw_hbm);
  };
  auto forward_time = [&](const RemoteState& st) {
    if (cfg.verify_forward_time) return *cfg.verify_forward_time;
    return t_tok(weights, 1, st.req->kv_full_bytes, bw_hbm);
  };

  auto start_cycle = [&](RemoteState& st, double now) {
    st.draft_done = now + x * decode_time(st);
    if (st.kv_on_local) {
      st.prefetch_done = now;
    } else {
      st.prefetch_done = fast.enqueue(static_cast<ReservationId>(st.req->id),
                                      st.req->kv_full_bytes, now);
      local_inflight += st.req->kv_full_bytes;
      st.kv_on_local = true;
      metrics.peak_hbm = std::max(metrics.peak_hbm, weights + local_inflight);
    }
    double ready = std::max(st.draft_done, st.prefetch_done);
    queue.push({ready, SimEvent::Kind::TransferComplete, st.req->id, kVerifyReady});
  };

  while (!queue.empty()) {
    SimEvent ev = queue.pop();
    RemoteState& st = states.at(ev.request);
    end_time = std::max(end_time, ev.time);
    switch (ev.kind) {
      case SimEvent::Kind::RequestArrival: {
        bool speculate = st.req->speculating && !force_baseline;
        Bytes payload = speculate
                            ? static_cast<Bytes>(std::ceil(st.req->compression_ratio *
                                                           static_cast<double>(st.req->kv_full_bytes)))
                            : st.req->kv_full_bytes;
        double done = slow.enqueue(static_cast<ReservationId>(st.req->id), payload, ev.time);
        queue.push({done, SimEvent::Kind::TransferComplete, st.req->id, kCompressedLoaded});
        break;
      }
      case SimEvent::Kind::TransferComplete: {
        if (ev.payload == kCompressedLoaded) {
          // place on the least-loaded remote GPU (baseline decodes there too)
          int best = 0;
          for (int g = 1; g < static_cast<int>(remote_occupancy.size()); ++g) {
            if (remote_occupancy[g] < remote_occupancy[best]) best = g;
          }
          st.remote_gpu = best;
          remote_occupancy[best] += 1;
          st.active = true;
          bool speculate = st.req->speculating && !force_baseline;
          if (speculate) {
            start_cycle(st, ev.time);
          } else {
            double done = ev.time + st.remaining * decode_time(st);
            queue.push({done, SimEvent::Kind::VerifyComplete, st.req->id, kBaselineDone});
          }
        } else {  // verify-ready: draft and prefetch both finished
          int g = 0;
          for (int i = 1; i < static_cast<int>(local_free.size()); ++i) {
            if (local_free[i] < local_free[g]) g = i;
          }
          double start = std::max(ev.time, local_free[g]);
          double done = start + forward_time(st);
          local_free[g] = done;
          queue.push({done, SimEvent::Kind::VerifyComplete, st.req->id, 0});
        }
        break;
      }
      case SimEvent::Kind::VerifyComplete: {
        double emitted;
        if (ev.payload == kBaselineDone) {
          emitted = st.remaining;
        } else {
          double accepted = sampler->accepted_drafted(x, st.req->compression_ratio);
          emitted = std::min(accepted, st.remaining);
          // a rejected-everything round still costs a cycle; progress comes
          // from the corrected token
          if (emitted <= 0.0) emitted = std::min(1.0, st.remaining);
          if (!cfg.verify_cached) {
            st.kv_on_local = false;
            local_inflight -= st.req->kv_full_bytes;
          }
        }
        st.remaining -= emitted;
        log.add(ev.time, emitted);
        if (st.remaining <= 1e-9) {
          queue.push({ev.time, SimEvent::Kind::RequestDone, st.req->id, 0});
        } else {
          start_cycle(st, ev.time);
        }
        break;
      }
      case SimEvent::Kind::RequestDone: {
        metrics.latencies.push_back(ev.time - st.req->arrival);
        metrics.completed += 1;
        if (st.remote_gpu >= 0) remote_occupancy[st.remote_gpu] -= 1;
        if (st.kv_on_local) {
          st.kv_on_local = false;
          local_inflight -= st.req->kv_full_bytes;
        }
        break;
      }
      case SimEvent::Kind::IterationTick:
        break;
    }
  }

  metrics.interconnect_busy = end_time > 0.0 ? fast.busy_total / end_time : 0.0;
  finalize_metrics(metrics, log, end_time, cfg.hardware.gpu_mem);
  return metrics;
}

}  // namespace

SimMetrics simulate_long_context(const SystemConfig& cfg, const std::vector<Request>& workload,
                                 ScheduleKind schedule, std::uint64_t seed) {
  if (cfg.scenario != Scenario::LongContext) {
    throw ConfigError("simulate_long_context requires scenario=long-context");
  }
  switch (schedule) {
    case ScheduleKind::Staggered: return simulate_staggered(cfg, workload, seed);
    case ScheduleKind::Lockstep:
    case ScheduleKind::SequentialVerify: return simulate_cycles(cfg, workload, schedule, seed);
    case ScheduleKind::FullKvBaseline: return baseline_full_kv(cfg, workload);
  }
  throw ContractError("unreachable schedule");
}

SimMetrics simulate_remote_prefix(const SystemConfig& cfg, const std::vector<Request>& workload,
                                  std::uint64_t seed) {
  if (cfg.scenario != Scenario::RemotePrefix) {
    throw ConfigError("simulate_remote_prefix requires scenario=remote-prefix");
  }
  return remote_prefix(cfg, workload, seed, /*force_baseline=*/false);
}

SimMetrics simulate_baseline_full_kv(const SystemConfig& cfg,
                                     const std::vector<Request>& workload) {
  if (cfg.scenario == Scenario::LongContext) return baseline_full_kv(cfg, workload);
  return remote_prefix(cfg, workload, 0, /*force_baseline=*/true);
}

SimMetrics simulate(const SystemConfig& cfg, const std::vector<Request>& workload,
                    ScheduleKind schedule, std::uint64_t seed) {
  if (cfg.scenario == Scenario::RemotePrefix) {
    if (schedule == ScheduleKind::Lockstep || schedule == ScheduleKind::SequentialVerify) {
      throw ConfigError("remote-prefix excludes the " + std::string(to_string(schedule)) +
                        " schedule");
    }
    if (schedule == ScheduleKind::FullKvBaseline) return simulate_baseline_full_kv(cfg, workload);
    return simulate_remote_prefix(cfg, workload, seed);
  }
  return simulate_long_context(cfg, workload, schedule, seed);
}

std::vector<SimMetrics> compare_schedules(const SystemConfig& cfg,
                                          const std::vector<Request>& workload,
                                          std::uint64_t seed) {
  if (cfg.scenario != Scenario::LongContext) {
    throw ConfigError("compare_schedules requires scenario=long-context");
  }
  std::vector<SimMetrics> rows;
  for (ScheduleKind k : {ScheduleKind::Staggered, ScheduleKind::Lockstep,
                         ScheduleKind::SequentialVerify, ScheduleKind::FullKvBaseline}) {
    rows.push_back(simulate(cfg, workload, k, seed));
  }
  return rows;
}

}  // namespace speckv
