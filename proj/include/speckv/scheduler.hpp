#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "speckv/config.hpp"
#include "speckv/core.hpp"

namespace speckv {

using ReservationId = std::uint64_t;

// Iteration-equivalent duration and window span of one full-KV reload.
struct ReloadSpan {
  double iterations = 0.0;  // l_r = bytes / (BW * T_iter)
  int windows = 1;          // S_r = max(1, ceil(l_r))
};

ReloadSpan reload_span(Bytes kv_full_bytes, double bandwidth, double iteration_time);

struct Reservation {
  ReservationId id = 0;
  RequestId request_id = 0;
  int verify_window = 0;           // d_r relative to window 0 at admit time
  int span_windows = 1;            // S_r
  std::int64_t verify_iteration = 0;  // absolute iteration of d_r
  std::int64_t span_begin = 0;        // absolute iteration of the first span window
  double per_window_bw = 0.0;      // seconds charged to each span window
  Bytes bytes = 0;                 // HBM in-flight charge per span window
  Bytes transfer_bytes = 0;        // bytes actually moved on the link
};

// Records the candidate windows admit examined, in order.
struct AdmitProbe {
  std::vector<int> examined;
};

// Lookahead reserve rings over W future iterations: per-window reserved link
// seconds (BW ring) and in-flight KV bytes (HBM ring). Window 0 is the
// current iteration; advance() retires it and opens a fresh window at W-1.
//
// Per-window totals are kept equal to the canonical sum of their live
// entries in reservation-id order, so releasing a reservation restores the
// exact previous values and conservation checks are bit-exact.
class ReserveRings {
 public:
  ReserveRings(int window, double iteration_time, double bandwidth, Bytes hbm_capacity,
               Bytes weights_bytes);

  // Algorithm-1 placement: examine anchor, anchor-1, anchor+1, ... clamped to
  // [S_r, W-1]; reserve the first candidate whose whole span fits both rings.
  // Returns the reservation, or nullopt for the waiting-queue outcome (rings
  // unchanged). hbm_bytes defaults to transfer_bytes; arrival loads pass 0
  // because their bytes are accounted as committed residency instead.
  std::optional<Reservation> admit(RequestId request, Bytes transfer_bytes, int anchor_x,
                                   AdmitProbe* probe = nullptr,
                                   std::optional<Bytes> hbm_bytes = std::nullopt);

  // Undo a live reservation exactly. Unknown or already-consumed id is a
  // contract error.
  void release(const Reservation& reservation);

  struct Retired {
    std::vector<Reservation> consumed;  // reservations whose span ended here
  };

  // Slide the window forward one iteration.
  Retired advance();

  void set_iteration_time(double t);
  double iteration_time() const { return iteration_time_; }
  double bandwidth() const { return bandwidth_; }
  int window() const { return window_; }
  std::int64_t base_iteration() const { return base_; }
  double bw_reserved(int i) const;
  Bytes hbm_inflight(int i) const;
  Bytes kv_resident() const { return kv_resident_; }
  Bytes hbm_capacity() const { return hbm_capacity_; }
  Bytes weights_bytes() const { return weights_bytes_; }
  void add_resident(Bytes bytes);
  void remove_resident(Bytes bytes);
  std::size_t live_reservations() const { return live_.size(); }

  // Verifies both ring constraints on every window, the bit-exact agreement
  // of cached totals with their canonical sums, and that every live
  // reservation's mass appears exactly once per remaining span window.
  // Throws ContractError on any violation.
  void check_invariants() const;

 private:
  struct Charge {
    ReservationId id;
    double bw;
    Bytes bytes;
  };
  struct WindowLedger {
    std::map<ReservationId, Charge> entries;
    double bw_sum = 0.0;
    Bytes byte_sum = 0;

    void recompute();
  };

  bool span_fits(int first, int last, double per_window_bw, Bytes bytes) const;

  int window_;
  double iteration_time_;
  double capacity_time_;  // high-water T_iter while the live set persists
  double bandwidth_;
  Bytes hbm_capacity_;
  Bytes weights_bytes_;
  Bytes kv_resident_ = 0;
  std::int64_t base_ = 0;
  ReservationId next_id_ = 1;
  std::deque<WindowLedger> ledgers_;
  std::map<ReservationId, Reservation> live_;
};

// ---------------------------------------------------------------------------
// Execution loop
// ---------------------------------------------------------------------------

enum class SessionMode { Speculative, Waiting, NonSpeculating };

struct SpecSession {
  RequestId id = 0;
  SessionMode mode = SessionMode::Waiting;
  double tokens_emitted = 0.0;
  int drafted_in_round = 0;
  std::optional<Reservation> pending;       // verify reservation
  std::optional<Reservation> arrival_load;  // initial KV transfer
  Bytes kv_full_bytes = 0;
  double compression_ratio = 1.0;
  std::int64_t output_tokens = 0;
  bool speculating = true;
  bool loaded = false;        // resident KV present (drafting possible)
  bool stalled = false;       // verify deferred to its transfer completion
  Seconds arrival = 0.0;

  Bytes resident_bytes() const;
};

// Number of drafted tokens a verify round keeps (before the +1 correction or
// bonus token). Seeded draws use the truncated-geometric run implied by the
// acceptance model; the mean flavor returns the expectation.
class RoundSampler {
 public:
  virtual ~RoundSampler() = default;
  virtual double accepted_drafted(int drafted, double compression_ratio) = 0;
};

class MeanRoundSampler : public RoundSampler {
 public:
  explicit MeanRoundSampler(const AcceptanceModel& model) : model_(&model) {}
  double accepted_drafted(int drafted, double c) override;

 private:
  const AcceptanceModel* model_;
};

class GeometricRoundSampler : public RoundSampler {
 public:
  GeometricRoundSampler(const AcceptanceModel& model, std::uint64_t seed);
  double accepted_drafted(int drafted, double c) override;

 private:
  const AcceptanceModel* model_;
  std::uint64_t state_;
  std::map<std::pair<int, double>, double> implied_p_;
};

struct StepEvents {
  std::vector<Request> arrivals;
  std::vector<ReservationId> completed_transfers;  // newly completed this step
};

struct VerifyOutcome {
  RequestId request = 0;
  ReservationId reservation = 0;
  int drafted = 0;
  double emitted = 0.0;  // accepted drafted tokens + the correction/bonus
  bool finished = false;
  bool was_late = false;
};

struct StepResult {
  std::vector<Reservation> reload_starts;     // transfers to kick off now
  std::vector<VerifyOutcome> verifies;
  std::vector<RequestId> admitted;            // got a reservation this step
  std::vector<RequestId> to_waiting;
  std::vector<RequestId> completed;
  std::vector<ReservationId> late_transfers;  // spans retired before completion
  std::vector<Reservation> consumed;          // reservations retired by advance
  std::vector<RequestId> activated;           // arrival loads that finished
  int drafting_count = 0;
  int verify_count = 0;
  double tokens_emitted = 0.0;  // verify emissions plus non-speculating decode
  Bytes hbm_read_bytes = 0;  // weights + drafted compressed KV + verified full KV
};

// Single serving-instance state machine: admissions, reload kickoffs,
// drafting, verification, and window advance, one call per iteration. The
// caller supplies wall-clock concerns (which transfers completed) and
// consumes reload starts.
class SpecScheduler {
 public:
  SpecScheduler(const SystemConfig& config, RoundSampler& sampler);

  StepResult execution_step(const StepEvents& events);

  // Reservations whose span begins at the current iteration. Admissions
  // never place a span's first window at the admit iteration itself, so this
  // is stable across the admissions phase and callers may start the physical
  // transfers before invoking execution_step.
  std::vector<Reservation> pending_kickoffs() const;

  const ReserveRings& rings() const { return rings_; }
  std::int64_t iteration() const { return iteration_; }
  const std::map<RequestId, SpecSession>& sessions() const { return sessions_; }
  std::size_t waiting_size() const { return waiting_.size(); }
  bool idle() const;
  void set_planning_iteration_time(double t) { rings_.set_iteration_time(t); }

  // Active loaded speculating sessions; the derived-mode planning batch.
  int active_batch() const;

 private:
  void admit_verify(SpecSession& session, StepResult& result);
  void admit_arrival(SpecSession& session, StepResult& result);
  void fire_verify(SpecSession& session, StepResult& result, bool was_late);

  const SystemConfig* config_;
  RoundSampler* sampler_;
  ReserveRings rings_;
  std::int64_t iteration_ = 0;
  std::map<RequestId, SpecSession> sessions_;
  std::deque<RequestId> waiting_;           // FIFO, one attempt per iteration
  std::vector<RequestId> pending_readmit_;  // verified last step, re-admit now
  std::set<ReservationId> completed_transfers_;
};

}  // namespace speckv
