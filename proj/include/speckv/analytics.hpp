#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "speckv/core.hpp"

namespace speckv {

// ---------------------------------------------------------------------------
// Intra-request model: one GPU, B homogeneous speculating requests, full KV
// offloaded to CPU for B_c of them.
// ---------------------------------------------------------------------------

// Average GPU KV footprint per offloaded request across one draft/verify
// cycle: kv_full * (x*c + 1) / (x + 1).
double kv_avg(int x, double c, Bytes kv_full);

// Staggered iteration time: the longer of the HBM read (weights + compressed
// drafts + the ~B/x full-KV verifies) and the overlapped CPU-GPU transfer.
double t_iter_staggered(Bytes weights, int batch, Bytes kv_full, double c, int x,
                        double bw_hbm, double bw_inter);

// Per-request remote-prefix latency: compressed-KV startup plus K/(x*gamma)
// draft-verify cycles of max(draft, full-KV prefetch) + verify forward pass.
double t_req_remote(Bytes kv_full, double c, std::int64_t output_tokens, int x, double gamma,
                    double bw_l, double bw_h, double t_decode, double t_fwd);

// Per-request per-token decode time at batch occupancy B:
// (M/B + kv_full) / bw_hbm.
double t_tok(Bytes weights, int batch, Bytes kv_full, double bw_hbm);

struct IntraKnobs {
  int offloaded_count = 0;   // B_c
  int draft_length = 1;      // x
  double compression = 1.0;  // c
  int cycles_per_load = 1;   // l

  auto operator<=>(const IntraKnobs&) const = default;
};

// Throughput objective at one knob setting, or nullopt when the memory or
// load constraint rejects it. offloaded_count == 0 is the full-KV baseline
// (no speculation, one token per request per iteration).
std::optional<double> intra_throughput(const IntraKnobs& knobs, const HardwareProfile& hw,
                                       Bytes weights, Bytes kv_full, int batch,
                                       const AcceptanceModel& gamma_model);

struct IntraGrids {
  std::vector<int> draft_length;      // x values
  std::vector<double> compression;    // c values
  std::vector<int> cycles_per_load;   // l values
  std::vector<int> offloaded_count;   // B_c values

  static IntraGrids defaults(int batch);
};

struct IntraOptimum {
  IntraKnobs knobs;
  double throughput = 0.0;
};

struct IntraSweepRow {
  IntraKnobs knobs;
  bool feasible = false;
  double throughput = 0.0;
};

// Exhaustive feasible-grid search; ties resolve to the lexicographically
// smallest (B_c, x, c, l) tuple. nullopt when nothing on the grid is
// feasible.
std::optional<IntraOptimum> optimize_intra(const HardwareProfile& hw, Bytes weights,
                                           Bytes kv_full, int batch,
                                           const AcceptanceModel& gamma_model,
                                           const IntraGrids& grids);

// Every grid point with its feasibility and objective; rows in grid order.
std::vector<IntraSweepRow> intra_sweep(const HardwareProfile& hw, Bytes weights, Bytes kv_full,
                                       int batch, const AcceptanceModel& gamma_model,
                                       const IntraGrids& grids);

// ---------------------------------------------------------------------------
// Inter-request model: six serving paths over a local and a remote GPU pool.
// ---------------------------------------------------------------------------

enum class ServingPath { B1, B2, P1Cached, P1Stateless, P2Cached, P2Stateless };
inline constexpr std::array<ServingPath, 6> kAllPaths = {
    ServingPath::B1,         ServingPath::B2,       ServingPath::P1Cached,
    ServingPath::P1Stateless, ServingPath::P2Cached, ServingPath::P2Stateless};

std::string_view to_string(ServingPath p);

struct ResourceCost {
  double net = 0.0;  // seconds of link time
  double gpu = 0.0;  // seconds of GPU compute
  double mem = 0.0;  // slot-seconds of memory occupancy
};

struct PathCost {
  ServingPath path = ServingPath::B1;
  ResourceCost local;
  ResourceCost remote;
};

struct PathParams {
  std::int64_t output_tokens = 1;  // K
  int draft_length = 1;            // x
  double gamma = 1.0;              // gamma(x, c)
  double compression = 1.0;        // c
  Bytes kv_full = 1;
  double bw_h = 1.0;               // storage -> local
  double bw_l = 1.0;               // storage -> remote
  double t_tok_local = 0.0;        // decode time at the declared occupancy
  double t_tok_remote = 0.0;

  static PathParams with_uniform_t_tok(std::int64_t K, int x, double gamma, double c,
                                       Bytes kv_full, double bw_h, double bw_l, double t_tok);
};

// Per-request resource costs for one serving path, Appendix-style closed
// forms (N1 = ceil(K/(gamma x)), N_draft = min(T_l_rem/T_tok, K/gamma), ...).
PathCost path_costs(ServingPath path, const PathParams& params);

struct PoolCapacities {
  int local_gpus = 0;   // G_L
  int remote_gpus = 0;  // G_R
  int b_max = 1;        // memory slots per GPU
};

struct LPSolution {
  std::map<ServingPath, double> rates;  // n_i, requests/s
  double throughput = 0.0;              // K * sum n_i, tokens/s
  std::vector<std::string> binding;     // constraints tight at the optimum
};

// Exact LP: max K * sum n_i subject to the six pool-capacity constraints,
// n >= 0. Solved by dense simplex with Bland's rule. A path with no positive
// resource cost makes the program unbounded and raises ConfigError naming it.
LPSolution optimize_inter(const std::array<PathCost, 6>& costs, const PoolCapacities& caps,
                          std::int64_t output_tokens);

// Outer fixed-point variant: re-evaluates T_tok at the batch occupancies
// implied by the solution's rates and re-solves, up to max_rounds or until
// the objective moves less than 1e-9 relative.
LPSolution optimize_inter_fixed_point(const PathParams& base, const PoolCapacities& caps,
                                      Bytes weights, double bw_hbm, int max_rounds = 50);

// ---------------------------------------------------------------------------
// Composition with an auxiliary drafter.
// ---------------------------------------------------------------------------

// Expected accepted draft length per cycle when an auxiliary drafter
// proposes d_e - 1 extra tokens per outer position:
// gamma(x,c) * x * (1 + gamma_e(d_e) * (d_e - 1)).
double composed_accept_length(int x, double c, int d_e, const AcceptanceModel& gamma_model,
                              const std::function<double(int)>& gamma_e);

}  // namespace speckv
