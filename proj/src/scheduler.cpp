#include "speckv/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include "speckv/util.hpp"

namespace speckv {

namespace {
// Guard against a rounding whisker rejecting a mathematically exact fit.
constexpr double kBwFitTol = 1e-9;
}

ReloadSpan reload_span(Bytes kv_full_bytes, double bandwidth, double iteration_time) {
  if (kv_full_bytes <= 0 || bandwidth <= 0 || iteration_time <= 0) {
    throw ContractError("reload_span: inputs must be positive");
  }
  ReloadSpan span;
  span.iterations = static_cast<double>(kv_full_bytes) / (bandwidth * iteration_time);
  span.windows = std::max(1, static_cast<int>(std::ceil(span.iterations)));
  return span;
}

void ReserveRings::WindowLedger::recompute() {
  // std::map iterates in id order, which is also insertion order because ids
  // are monotonic; cached sums stay bit-identical to this canonical order.
  bw_sum = 0.0;
  byte_sum = 0;
  for (const auto& [id, charge] : entries) {
    bw_sum += charge.bw;
    byte_sum += charge.bytes;
  }
}

ReserveRings::ReserveRings(int window, double iteration_time, double bandwidth,
                           Bytes hbm_capacity, Bytes weights_bytes)
    : window_(window),
      iteration_time_(iteration_time),
      capacity_time_(iteration_time),
      bandwidth_(bandwidth),
      hbm_capacity_(hbm_capacity),
      weights_bytes_(weights_bytes) {
  if (window < 2) throw ContractError("ReserveRings: window must be >= 2");
  if (iteration_time <= 0 || bandwidth <= 0) {
    throw ContractError("ReserveRings: iteration_time and bandwidth must be positive");
  }
  if (weights_bytes > hbm_capacity) {
    throw ContractError("ReserveRings: weights do not fit in HBM");
  }
  ledgers_.resize(window_);
}

void ReserveRings::set_iteration_time(double t) {
  if (t <= 0) throw ContractError("set_iteration_time: must be positive");
  iteration_time_ = t;
  // Reservations booked while T_iter was larger stay legal until they drain;
  // capacity checks use the high-water mark over the lifetime of the current
  // live set, while new bookings are held to the current value.
  if (live_.empty()) {
    capacity_time_ = t;
  } else {
    capacity_time_ = std::max(capacity_time_, t);
  }
}

double ReserveRings::bw_reserved(int i) const {
  if (i < 0 || i >= window_) throw ContractError("bw_reserved: window index out of range");
  return ledgers_[i].bw_sum;
}

Bytes ReserveRings::hbm_inflight(int i) const {
  if (i < 0 || i >= window_) throw ContractError("hbm_inflight: window index out of range");
  return ledgers_[i].byte_sum;
}

void ReserveRings::add_resident(Bytes bytes) {
  if (bytes < 0) throw ContractError("add_resident: negative bytes");
  kv_resident_ += bytes;
}

void ReserveRings::remove_resident(Bytes bytes) {
  if (bytes < 0 || bytes > kv_resident_) throw ContractError("remove_resident: underflow");
  kv_resident_ -= bytes;
}

bool ReserveRings::span_fits(int first, int last, double per_window_bw, Bytes bytes) const {
  for (int i = first; i <= last; ++i) {
    const WindowLedger& w = ledgers_[i];
    if (w.bw_sum + per_window_bw > iteration_time_ * (1.0 + kBwFitTol)) return false;
    if (weights_bytes_ + kv_resident_ + w.byte_sum + bytes > hbm_capacity_) return false;
  }
  return true;
}

std::optional<Reservation> ReserveRings::admit(RequestId request, Bytes transfer_bytes,
                                               int anchor_x, AdmitProbe* probe,
                                               std::optional<Bytes> hbm_bytes) {
  if (anchor_x < 1) throw ContractError("admit: anchor_x must be >= 1");
  ReloadSpan span = reload_span(transfer_bytes, bandwidth_, iteration_time_);
  const int s_r = span.windows;
  if (s_r > window_ - 1) return std::nullopt;  // span cannot fit the horizon

  const Bytes bytes = hbm_bytes.value_or(transfer_bytes);
  const double per_window_bw = static_cast<double>(transfer_bytes) / (bandwidth_ * s_r);
  const int anchor = std::clamp(anchor_x, s_r, window_ - 1);

  auto try_candidate = [&](int d) -> std::optional<Reservation> {
    if (probe) probe->examined.push_back(d);
    int first = d - s_r + 1;
    if (!span_fits(first, d, per_window_bw, bytes)) return std::nullopt;
    Reservation res;
    res.id = next_id_++;
    res.request_id = request;
    res.verify_window = d;
    res.span_windows = s_r;
    res.verify_iteration = base_ + d;
    res.span_begin = base_ + first;
    res.per_window_bw = per_window_bw;
    res.bytes = bytes;
    res.transfer_bytes = transfer_bytes;
    for (int i = first; i <= d; ++i) {
      ledgers_[i].entries.emplace(res.id, Charge{res.id, per_window_bw, bytes});
      ledgers_[i].bw_sum += per_window_bw;
      ledgers_[i].byte_sum += bytes;
    }
    live_.emplace(res.id, res);
    return res;
  };

  // anchor, anchor-1, anchor+1, anchor-2, anchor+2, ... earlier-first at
  // each distance, out-of-range candidates skipped.
  if (auto res = try_candidate(anchor)) return res;
  for (int k = 1;; ++k) {
    int lo = anchor - k;
    int hi = anchor + k;
    bool lo_ok = lo >= s_r;
    bool hi_ok = hi <= window_ - 1;
    if (!lo_ok && !hi_ok) break;
    if (lo_ok) {
      if (auto res = try_candidate(lo)) return res;
    }
    if (hi_ok) {
      if (auto res = try_candidate(hi)) return res;
    }
  }
  return std::nullopt;
}

void ReserveRings::release(const Reservation& reservation) {
  auto it = live_.find(reservation.id);
  if (it == live_.end()) {
    throw ContractError("release: unknown or already-consumed reservation");
  }
  const Reservation& live = it->second;
  std::int64_t first = std::max(live.span_begin, base_);
  for (std::int64_t abs = first; abs <= live.verify_iteration; ++abs) {
    WindowLedger& w = ledgers_[abs - base_];
    w.entries.erase(live.id);
    w.recompute();
  }
  live_.erase(it);
}

ReserveRings::Retired ReserveRings::advance() {
  Retired retired;
  const WindowLedger& front = ledgers_.front();
  for (const auto& [id, charge] : front.entries) {
    auto it = live_.find(id);
    if (it == live_.end()) throw ContractError("advance: ledger entry without live reservation");
    if (it->second.verify_iteration == base_) {
      retired.consumed.push_back(it->second);
      live_.erase(it);
    }
  }
  ledgers_.pop_front();
  ledgers_.emplace_back();
  ++base_;
  return retired;
}

void ReserveRings::check_invariants() const {
  std::map<ReservationId, int> seen;
  for (int i = 0; i < window_; ++i) {
    const WindowLedger& w = ledgers_[i];
    double bw = 0.0;
    Bytes bytes = 0;
    for (const auto& [id, charge] : w.entries) {
      bw += charge.bw;
      bytes += charge.bytes;
      seen[id] += 1;
      auto it = live_.find(id);
      if (it == live_.end()) throw ContractError("ring invariant: entry without reservation");
      std::int64_t abs = base_ + i;
      if (abs < it->second.span_begin || abs > it->second.verify_iteration) {
        throw ContractError("ring invariant: charge outside its reservation span");
      }
    }
    if (bw != w.bw_sum || bytes != w.byte_sum) {
      throw ContractError("ring invariant: cached totals diverged from canonical sums");
    }
    if (w.bw_sum > capacity_time_ * (1.0 + kBwFitTol)) {
      throw ContractError("ring invariant: BW ring over-reserved (T[i] > T_iter)");
    }
    if (weights_bytes_ + kv_resident_ + w.byte_sum > hbm_capacity_) {
      throw ContractError("ring invariant: HBM ring over capacity");
    }
  }
  for (const auto& [id, res] : live_) {
    std::int64_t first = std::max(res.span_begin, base_);
    int expected = static_cast<int>(res.verify_iteration - first + 1);
    auto it = seen.find(id);
    int actual = it == seen.end() ? 0 : it->second;
    if (actual != expected) {
      throw ContractError("ring invariant: reservation mass leaked or duplicated");
    }
  }
  for (const auto& [id, count] : seen) {
    if (!live_.count(id)) throw ContractError("ring invariant: orphaned charge");
  }
}

// ---------------------------------------------------------------------------

Bytes SpecSession::resident_bytes() const {
  if (!speculating) return kv_full_bytes;
  double compressed = std::ceil(compression_ratio * static_cast<double>(kv_full_bytes));
  return static_cast<Bytes>(compressed);
}

double MeanRoundSampler::accepted_drafted(int drafted, double c) {
  if (drafted < 1) return 0.0;
  return expected_gamma(*model_, drafted, c) * drafted;
}

GeometricRoundSampler::GeometricRoundSampler(const AcceptanceModel& model, std::uint64_t seed)
    : model_(&model), state_(splitmix64(seed ^ 0x5bd1e995u)) {}

double GeometricRoundSampler::accepted_drafted(int drafted, double c) {
  if (drafted < 1) return 0.0;
  auto key = std::make_pair(drafted, c);
  auto it = implied_p_.find(key);
  if (it == implied_p_.end()) {
    it = implied_p_.emplace(key, implied_per_token_prob(*model_, drafted, c)).first;
  }
  const double p = it->second;
  state_ = splitmix64(state_);
  if (p >= 1.0) return drafted;
  if (p <= 0.0) return 0.0;
  double u = static_cast<double>(state_ >> 11) * 0x1.0p-53;
  // P(N >= k) = p^k; invert one uniform into the leading-success run length.
  u = std::max(u, 1e-300);
  double run = std::floor(std::log(u) / std::log(p));
  return std::min(static_cast<double>(drafted), std::max(0.0, run));
}

// ---------------------------------------------------------------------------

namespace {

double planning_bandwidth(const SystemConfig& cfg) {
  if (cfg.scenario == Scenario::LongContext) return *cfg.hardware.interconnect_bandwidth;
  return *cfg.hardware.storage_local_bandwidth;  // verify reload link
}

double initial_iteration_time(const SystemConfig& cfg) {
  if (cfg.iteration_time_mode == IterationTimeMode::Fixed) return *cfg.iteration_time;
  // derived floor: a weights-only iteration; recomputed per step from batch
  return static_cast<double>(cfg.model.weights_bytes) / cfg.hardware.hbm_bandwidth;
}

}  // namespace

SpecScheduler::SpecScheduler(const SystemConfig& config, RoundSampler& sampler)
    : config_((config.validate(), &config)),
      sampler_(&sampler),
      rings_(config.lookahead_window, initial_iteration_time(config), planning_bandwidth(config),
             config.hardware.gpu_mem, config.model.weights_bytes) {}

bool SpecScheduler::idle() const {
  return sessions_.empty() && waiting_.empty() && pending_readmit_.empty();
}

std::vector<Reservation> SpecScheduler::pending_kickoffs() const {
  std::vector<Reservation> out;
  for (const auto& [id, s] : sessions_) {
    if (s.pending && s.pending->span_begin == iteration_) out.push_back(*s.pending);
    if (s.arrival_load && s.arrival_load->span_begin == iteration_) {
      out.push_back(*s.arrival_load);
    }
  }
  return out;
}

int SpecScheduler::active_batch() const {
  int n = 0;
  for (const auto& [id, s] : sessions_) {
    if (s.loaded) ++n;
  }
  return n;
}

void SpecScheduler::admit_verify(SpecSession& session, StepResult& result) {
  auto res = rings_.admit(session.id, session.kv_full_bytes, config_->draft_length);
  if (res) {
    session.mode = SessionMode::Speculative;
    session.pending = *res;
    session.drafted_in_round = 0;
    session.stalled = false;
    result.admitted.push_back(session.id);
  } else {
    session.mode = SessionMode::Waiting;
    waiting_.push_back(session.id);
    result.to_waiting.push_back(session.id);
  }
}

void SpecScheduler::admit_arrival(SpecSession& session, StepResult& result) {
  const Bytes resident = session.resident_bytes();
  // Residency must fit under every window's in-flight bytes before the load
  // is booked; the bytes count as committed residency from here on.
  Bytes worst_inflight = 0;
  for (int i = 0; i < rings_.window(); ++i) {
    worst_inflight = std::max(worst_inflight, rings_.hbm_inflight(i));
  }
  bool fits = rings_.weights_bytes() + rings_.kv_resident() + resident + worst_inflight <=
              rings_.hbm_capacity();
  std::optional<Reservation> res;
  if (fits) {
    // anchor 1 clamps to S_r: the earliest feasible slot wins.
    res = rings_.admit(session.id, resident, 1, nullptr, Bytes{0});
  }
  if (res) {
    rings_.add_resident(resident);
    session.arrival_load = *res;
    session.mode = SessionMode::Waiting;  // loading; drafting starts on completion
    result.admitted.push_back(session.id);
  } else {
    session.mode = SessionMode::Waiting;
    waiting_.push_back(session.id);
    result.to_waiting.push_back(session.id);
  }
}

void SpecScheduler::fire_verify(SpecSession& session, StepResult& result, bool was_late) {
  VerifyOutcome outcome;
  outcome.request = session.id;
  outcome.reservation = session.pending ? session.pending->id : 0;
  outcome.drafted = session.drafted_in_round;
  outcome.was_late = was_late;
  double accepted = sampler_->accepted_drafted(session.drafted_in_round,
                                               session.compression_ratio);
  double remaining = static_cast<double>(session.output_tokens) - session.tokens_emitted;
  outcome.emitted = std::min(accepted + 1.0, remaining);  // +1: correction or bonus
  session.tokens_emitted += outcome.emitted;
  session.drafted_in_round = 0;
  session.stalled = false;
  if (session.pending) {
    completed_transfers_.erase(session.pending->id);
    session.pending.reset();
  }
  outcome.finished = session.tokens_emitted >= static_cast<double>(session.output_tokens) - 1e-9;
  result.verifies.push_back(outcome);
  result.verify_count += 1;
  result.tokens_emitted += outcome.emitted;
  result.hbm_read_bytes += session.kv_full_bytes;
  if (outcome.finished) {
    rings_.remove_resident(session.resident_bytes());
    result.completed.push_back(session.id);
    sessions_.erase(session.id);
  } else {
    pending_readmit_.push_back(session.id);
  }
}

StepResult SpecScheduler::execution_step(const StepEvents& events) {
  StepResult result;
  for (ReservationId id : events.completed_transfers) completed_transfers_.insert(id);

  // Admissions: re-admits from last step's verifies, then waiting-queue
  // retries (FIFO, one attempt each), then new arrivals.
  std::vector<RequestId> readmits;
  readmits.swap(pending_readmit_);
  for (RequestId id : readmits) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) continue;
    admit_verify(it->second, result);
  }
  std::deque<RequestId> retry;
  retry.swap(waiting_);
  for (RequestId id : retry) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) continue;
    SpecSession& s = it->second;
    if (!s.loaded && !s.arrival_load) {
      admit_arrival(s, result);
    } else if (s.loaded) {
      admit_verify(s, result);
    } else {
      waiting_.push_back(id);  // load still in flight
    }
  }
  for (const Request& r : events.arrivals) {
    SpecSession session;
    session.id = r.id;
    session.kv_full_bytes = r.kv_full_bytes;
    session.compression_ratio = r.compression_ratio;
    session.output_tokens = r.output_tokens;
    session.speculating = r.speculating;
    session.arrival = r.arrival;
    auto [it, inserted] = sessions_.emplace(r.id, std::move(session));
    if (!inserted) throw ContractError("execution_step: duplicate request id");
    admit_arrival(it->second, result);
  }

  // Kick off transfers whose span starts at this iteration.
  for (const auto& [id, s] : sessions_) {
    if (s.pending && s.pending->span_begin == iteration_) result.reload_starts.push_back(*s.pending);
    if (s.arrival_load && s.arrival_load->span_begin == iteration_) {
      result.reload_starts.push_back(*s.arrival_load);
    }
  }

  // Draft and verify.
  result.hbm_read_bytes = config_->model.weights_bytes;
  std::vector<RequestId> ids;
  ids.reserve(sessions_.size());
  for (const auto& [id, s] : sessions_) ids.push_back(id);
  for (RequestId id : ids) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) continue;
    SpecSession& s = it->second;
    if (!s.speculating && s.loaded) {
      // plain decode: one token per iteration off the full cache
      double remaining = static_cast<double>(s.output_tokens) - s.tokens_emitted;
      double emitted = std::min(1.0, remaining);
      s.tokens_emitted += emitted;
      result.tokens_emitted += emitted;
      result.hbm_read_bytes += s.kv_full_bytes;
      if (s.tokens_emitted >= static_cast<double>(s.output_tokens) - 1e-9) {
        rings_.remove_resident(s.resident_bytes());
        result.completed.push_back(id);
        sessions_.erase(it);
      }
      continue;
    }
    if (s.mode != SessionMode::Speculative || !s.pending) continue;
    if (s.stalled) {
      if (completed_transfers_.count(s.pending->id)) fire_verify(s, result, true);
      continue;
    }
    if (iteration_ < s.pending->verify_iteration) {
      if (s.drafted_in_round < config_->draft_length) {
        s.drafted_in_round += 1;
        result.drafting_count += 1;
        result.hbm_read_bytes += s.resident_bytes();
      }
      continue;
    }
    // verify due this iteration
    if (completed_transfers_.count(s.pending->id)) {
      fire_verify(s, result, false);
    } else {
      result.late_transfers.push_back(s.pending->id);
      s.stalled = true;
    }
  }

  // Advance the lookahead window.
  ReserveRings::Retired retired = rings_.advance();
  for (const Reservation& res : retired.consumed) {
    result.consumed.push_back(res);
    auto it = sessions_.find(res.request_id);
    if (it == sessions_.end()) continue;
    SpecSession& s = it->second;
    if (s.arrival_load && s.arrival_load->id == res.id) {
      if (completed_transfers_.count(res.id)) {
        completed_transfers_.erase(res.id);
        s.arrival_load.reset();
        s.loaded = true;
        result.activated.push_back(s.id);
        if (s.speculating) {
          pending_readmit_.push_back(s.id);  // first verify admission next step
        } else {
          s.mode = SessionMode::NonSpeculating;
        }
      } else {
        result.late_transfers.push_back(res.id);
        // activation deferred; completion is checked next steps
      }
    }
  }
  // Loads whose span retired earlier and whose transfer completed this step.
  for (auto& [id, s] : sessions_) {
    if (!s.loaded && s.arrival_load && s.arrival_load->verify_iteration < iteration_ &&
        completed_transfers_.count(s.arrival_load->id)) {
      completed_transfers_.erase(s.arrival_load->id);
      s.arrival_load.reset();
      s.loaded = true;
      result.activated.push_back(id);
      if (s.speculating) {
        pending_readmit_.push_back(id);
      } else {
        s.mode = SessionMode::NonSpeculating;
      }
    }
  }

  rings_.check_invariants();
  ++iteration_;
  return result;
}

}  // namespace speckv
