#include "speckv/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace speckv {

double kv_avg(int x, double c, Bytes kv_full) {
  if (x < 1) throw ContractError("kv_avg: x must be >= 1");
  if (!(c > 0.0 && c <= 1.0)) throw ContractError("kv_avg: c out of (0,1]");
  return static_cast<double>(kv_full) * (x * c + 1.0) / (x + 1.0);
}

double t_iter_staggered(Bytes weights, int batch, Bytes kv_full, double c, int x,
                        double bw_hbm, double bw_inter) {
  if (weights <= 0 || batch < 1 || kv_full <= 0 || x < 1 || bw_hbm <= 0 || bw_inter <= 0) {
    throw ContractError("t_iter_staggered: inputs must be positive");
  }
  double t_gpu = (weights + batch * static_cast<double>(kv_full) * (c + 1.0 / x)) / bw_hbm;
  double t_xfer = batch * static_cast<double>(kv_full) / (x * bw_inter);
  return std::max(t_gpu, t_xfer);
}

double t_req_remote(Bytes kv_full, double c, std::int64_t output_tokens, int x, double gamma,
                    double bw_l, double bw_h, double t_decode, double t_fwd) {
  if (kv_full <= 0 || output_tokens < 1 || x < 1 || bw_l <= 0 || bw_h <= 0) {
    throw ContractError("t_req_remote: inputs must be positive");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("t_req_remote: gamma out of (0,1]");
  double startup = c * static_cast<double>(kv_full) / bw_l;
  double cycles = static_cast<double>(output_tokens) / (x * gamma);
  double t_cycle = std::max(x * t_decode, static_cast<double>(kv_full) / bw_h) + t_fwd;
  return startup + cycles * t_cycle;
}

double t_tok(Bytes weights, int batch, Bytes kv_full, double bw_hbm) {
  if (batch < 1) throw ContractError("t_tok: batch must be >= 1");
  if (weights <= 0 || kv_full <= 0 || bw_hbm <= 0) {
    throw ContractError("t_tok: inputs must be positive");
  }
  return (static_cast<double>(weights) / batch + static_cast<double>(kv_full)) / bw_hbm;
}

std::optional<double> intra_throughput(const IntraKnobs& knobs, const HardwareProfile& hw,
                                       Bytes weights, Bytes kv_full, int batch,
                                       const AcceptanceModel& gamma_model) {
  const int b_c = knobs.offloaded_count;
  const int x = knobs.draft_length;
  const double c = knobs.compression;
  const int l = knobs.cycles_per_load;
  if (b_c < 0 || b_c > batch) throw ContractError("intra_throughput: B_c out of [0, B]");
  if (x < 1 || l < 1) throw ContractError("intra_throughput: x and l must be >= 1");

  // B_c = 0 is the no-speculation baseline: full KV resident for everyone,
  // one token per request per iteration.
  if (b_c == 0) {
    double mem = static_cast<double>(weights) + static_cast<double>(batch) * kv_full;
    if (mem > static_cast<double>(hw.gpu_mem)) return std::nullopt;
    double t_gpu = (weights + static_cast<double>(batch) * kv_full) / hw.hbm_bandwidth;
    return batch / t_gpu;
  }

  if (!(c > 0.0 && c < 1.0)) throw ContractError("intra_throughput: c out of (0,1) for B_c > 0");
  if (!hw.interconnect_bandwidth) return std::nullopt;  // nothing to offload over

  // load constraint: one in-flight reload at a time
  if (static_cast<double>(b_c) / (x + 1.0) * l > 1.0 + 1e-12) return std::nullopt;

  const double avg = kv_avg(x, c, kv_full);
  const int b_g = batch - b_c;
  // memory constraint
  double mem = static_cast<double>(weights) + static_cast<double>(b_g) * kv_full + b_c * avg;
  if (mem > static_cast<double>(hw.gpu_mem)) return std::nullopt;

  double t_gpu = (weights + batch * avg) / hw.hbm_bandwidth;
  double t_xfer = b_c * (1.0 - c) * static_cast<double>(kv_full) /
                  ((x + 1.0) * (*hw.interconnect_bandwidth) * l);
  double gamma = expected_gamma(gamma_model, x, c);
  double tokens_per_iter = batch * (gamma * x + 1.0) / (x + 1.0);
  return tokens_per_iter / std::max(t_gpu, t_xfer);
}

IntraGrids IntraGrids::defaults(int batch) {
  IntraGrids g;
  for (int x = 1; x <= 64; ++x) g.draft_length.push_back(x);
  for (int i = 1; i <= 9; ++i) g.compression.push_back(i / 10.0);
  for (int l = 1; l <= 8; ++l) g.cycles_per_load.push_back(l);
  for (int b = 0; b <= batch; ++b) g.offloaded_count.push_back(b);
  return g;
}

namespace {

// Grid search treats acceptance-model lookup misses (no tabulated entry for
// this c) as infeasible points rather than aborting the sweep.
std::optional<double> grid_throughput(const IntraKnobs& knobs, const HardwareProfile& hw,
                                      Bytes weights, Bytes kv_full, int batch,
                                      const AcceptanceModel& gamma_model) {
  try {
    return intra_throughput(knobs, hw, weights, kv_full, batch, gamma_model);
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<IntraSweepRow> intra_sweep(const HardwareProfile& hw, Bytes weights, Bytes kv_full,
                                       int batch, const AcceptanceModel& gamma_model,
                                       const IntraGrids& grids) {
  std::vector<IntraSweepRow> rows;
  for (int b_c : grids.offloaded_count) {
    for (int x : grids.draft_length) {
      for (double c : grids.compression) {
        for (int l : grids.cycles_per_load) {
          IntraSweepRow row;
          row.knobs = IntraKnobs{b_c, x, c, l};
          auto value = grid_throughput(row.knobs, hw, weights, kv_full, batch, gamma_model);
          row.feasible = value.has_value();
          row.throughput = value.value_or(0.0);
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

std::optional<IntraOptimum> optimize_intra(const HardwareProfile& hw, Bytes weights,
                                           Bytes kv_full, int batch,
                                           const AcceptanceModel& gamma_model,
                                           const IntraGrids& grids) {
  std::optional<IntraOptimum> best;
  for (int b_c : grids.offloaded_count) {
    for (int x : grids.draft_length) {
      for (double c : grids.compression) {
        for (int l : grids.cycles_per_load) {
          IntraKnobs knobs{b_c, x, c, l};
          auto value = grid_throughput(knobs, hw, weights, kv_full, batch, gamma_model);
          if (!value) continue;
          // strict > keeps the lexicographically smallest knob tuple on ties
          // because the loops enumerate tuples in lexicographic order
          if (!best || *value > best->throughput) best = IntraOptimum{knobs, *value};
        }
      }
    }
  }
  return best;
}

std::string_view to_string(ServingPath p) {
  switch (p) {
    case ServingPath::B1: return "B1";
    case ServingPath::B2: return "B2";
    case ServingPath::P1Cached: return "P1-cached";
    case ServingPath::P1Stateless: return "P1-stateless";
    case ServingPath::P2Cached: return "P2-cached";
    case ServingPath::P2Stateless: return "P2-stateless";
  }
  return "?";
}

PathParams PathParams::with_uniform_t_tok(std::int64_t K, int x, double gamma, double c,
                                          Bytes kv_full, double bw_h, double bw_l,
                                          double t_tok) {
  PathParams p;
  p.output_tokens = K;
  p.draft_length = x;
  p.gamma = gamma;
  p.compression = c;
  p.kv_full = kv_full;
  p.bw_h = bw_h;
  p.bw_l = bw_l;
  p.t_tok_local = t_tok;
  p.t_tok_remote = t_tok;
  return p;
}

PathCost path_costs(ServingPath path, const PathParams& params) {
  if (!(params.gamma > 0.0 && params.gamma <= 1.0)) {
    throw ContractError("path_costs: gamma out of (0,1]");
  }
  if (params.draft_length < 1 || params.output_tokens < 1) {
    throw ContractError("path_costs: x and K must be >= 1");
  }
  const double K = static_cast<double>(params.output_tokens);
  const double x = params.draft_length;
  const double gamma = params.gamma;
  const double kv = static_cast<double>(params.kv_full);
  const double t_h = kv / params.bw_h;
  const double t_l = kv / params.bw_l;
  const double t_l_c = params.compression * kv / params.bw_l;
  const double t_l_rem = (1.0 - params.compression) * kv / params.bw_l;
  const double tok_l = params.t_tok_local;
  const double tok_r = params.t_tok_remote;

  PathCost cost;
  cost.path = path;
  switch (path) {
    case ServingPath::B1:
      cost.local = {t_h, K * tok_l, t_h + K * tok_l};
      break;
    case ServingPath::B2:
      cost.remote = {t_l, K * tok_r, t_l + K * tok_r};
      break;
    case ServingPath::P1Cached:
    case ServingPath::P1Stateless: {
      double n1 = std::ceil(K / (gamma * x));
      cost.remote = {t_l_c, (K / gamma) * tok_r, t_l_c + (K / gamma) * tok_r};
      if (path == ServingPath::P1Cached) {
        cost.local = {t_h, n1 * tok_l, t_h + (K / gamma) * tok_l};
      } else {
        cost.local = {n1 * t_h, n1 * tok_l, n1 * (t_h + tok_l)};
      }
      break;
    }
    case ServingPath::P2Cached:
    case ServingPath::P2Stateless: {
      // Tokens draftable while the remaining KV streams to the remote GPU;
      // may be fractional (a ratio of times).
      double n_draft = tok_r > 0.0 ? std::min(t_l_rem / tok_r, K / gamma) : K / gamma;
      double k2 = std::max(0.0, K - gamma * n_draft);
      double n2 = std::ceil(n_draft / x);
      cost.remote = {t_l_c + t_l_rem, (n_draft + k2) * tok_r,
                     t_l_c + std::max(n_draft * tok_r, t_l_rem) + k2 * tok_r};
      if (path == ServingPath::P2Cached) {
        cost.local = {t_h, n2 * tok_l, t_h + n_draft * tok_l};
      } else {
        cost.local = {n2 * t_h, n2 * tok_l, n2 * (t_h + tok_l)};
      }
      break;
    }
  }
  return cost;
}

namespace {

// Dense tableau simplex for max c.x s.t. Ax <= b, x >= 0, with b >= 0 so the
// slack basis starts feasible. Bland's rule on both choices prevents cycling.
struct SimplexOutcome {
  enum class Status { Optimal, Unbounded } status = Status::Optimal;
  std::vector<double> solution;
  double objective = 0.0;
  int unbounded_var = -1;
};

SimplexOutcome simplex_max(const std::vector<std::vector<double>>& a,
                           const std::vector<double>& b, const std::vector<double>& c) {
  const int m = static_cast<int>(a.size());
  const int n = static_cast<int>(c.size());
  constexpr double kEps = 1e-12;

  // columns: n structural vars + m slacks + rhs
  std::vector<std::vector<double>> tab(m + 1, std::vector<double>(n + m + 1, 0.0));
  std::vector<int> basis(m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) tab[i][j] = a[i][j];
    tab[i][n + i] = 1.0;
    tab[i][n + m] = b[i];
    basis[i] = n + i;
  }
  for (int j = 0; j < n; ++j) tab[m][j] = -c[j];

  for (;;) {
    int pivot_col = -1;
    for (int j = 0; j < n + m; ++j) {
      if (tab[m][j] < -kEps) {
        pivot_col = j;
        break;  // Bland: smallest improving index
      }
    }
    if (pivot_col < 0) break;

    int pivot_row = -1;
    double best_ratio = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
      if (tab[i][pivot_col] > kEps) {
        double ratio = tab[i][n + m] / tab[i][pivot_col];
        if (ratio < best_ratio - kEps ||
            (ratio < best_ratio + kEps && (pivot_row < 0 || basis[i] < basis[pivot_row]))) {
          best_ratio = ratio;
          pivot_row = i;
        }
      }
    }
    if (pivot_row < 0) {
      SimplexOutcome out;
      out.status = SimplexOutcome::Status::Unbounded;
      out.unbounded_var = pivot_col;
      return out;
    }

    double pv = tab[pivot_row][pivot_col];
    for (double& v : tab[pivot_row]) v /= pv;
    for (int i = 0; i <= m; ++i) {
      if (i == pivot_row) continue;
      double factor = tab[i][pivot_col];
      if (factor == 0.0) continue;
      for (int j = 0; j <= n + m; ++j) tab[i][j] -= factor * tab[pivot_row][j];
    }
    basis[pivot_row] = pivot_col;
  }

  SimplexOutcome out;
  out.solution.assign(n, 0.0);
  for (int i = 0; i < m; ++i) {
    if (basis[i] < n) out.solution[basis[i]] = std::max(0.0, tab[i][n + m]);
  }
  out.objective = 0.0;
  for (int j = 0; j < n; ++j) out.objective += c[j] * out.solution[j];
  return out;
}

}  // namespace

LPSolution optimize_inter(const std::array<PathCost, 6>& costs, const PoolCapacities& caps,
                          std::int64_t output_tokens) {
  if (caps.local_gpus < 0 || caps.remote_gpus < 0 || caps.b_max < 0) {
    throw ContractError("optimize_inter: capacities must be >= 0");
  }
  if (output_tokens < 1) throw ContractError("optimize_inter: K must be >= 1");

  const char* row_names[6] = {"local.net", "local.gpu", "local.mem",
                              "remote.net", "remote.gpu", "remote.mem"};
  std::vector<std::vector<double>> a(6, std::vector<double>(6, 0.0));
  for (int j = 0; j < 6; ++j) {
    const PathCost& pc = costs[j];
    for (double v : {pc.local.net, pc.local.gpu, pc.local.mem, pc.remote.net, pc.remote.gpu,
                     pc.remote.mem}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ContractError("optimize_inter: path costs must be finite and >= 0");
      }
    }
    bool any_positive = pc.local.net > 0 || pc.local.gpu > 0 || pc.local.mem > 0 ||
                        pc.remote.net > 0 || pc.remote.gpu > 0 || pc.remote.mem > 0;
    if (!any_positive) {
      throw ConfigError(std::string("optimize_inter: path ") + std::string(to_string(pc.path)) +
                        " has zero resource cost; the program is unbounded");
    }
    a[0][j] = pc.local.net;
    a[1][j] = pc.local.gpu;
    a[2][j] = pc.local.mem;
    a[3][j] = pc.remote.net;
    a[4][j] = pc.remote.gpu;
    a[5][j] = pc.remote.mem;
  }
  std::vector<double> b = {static_cast<double>(caps.local_gpus),
                           static_cast<double>(caps.local_gpus),
                           static_cast<double>(caps.local_gpus) * caps.b_max,
                           static_cast<double>(caps.remote_gpus),
                           static_cast<double>(caps.remote_gpus),
                           static_cast<double>(caps.remote_gpus) * caps.b_max};
  std::vector<double> obj(6, static_cast<double>(output_tokens));

  SimplexOutcome res = simplex_max(a, b, obj);
  if (res.status == SimplexOutcome::Status::Unbounded) {
    std::string which = res.unbounded_var < 6
                            ? std::string(to_string(costs[res.unbounded_var].path))
                            : "slack";
    throw ConfigError("optimize_inter: unbounded along path " + which);
  }

  LPSolution sol;
  for (int j = 0; j < 6; ++j) sol.rates[costs[j].path] = res.solution[j];
  sol.throughput = res.objective;
  for (int i = 0; i < 6; ++i) {
    double used = 0.0;
    for (int j = 0; j < 6; ++j) used += a[i][j] * res.solution[j];
    if (b[i] - used <= 1e-9 * std::max(1.0, b[i])) sol.binding.push_back(row_names[i]);
  }
  return sol;
}

LPSolution optimize_inter_fixed_point(const PathParams& base, const PoolCapacities& caps,
                                      Bytes weights, double bw_hbm, int max_rounds) {
  PathParams params = base;
  LPSolution sol;
  double prev_objective = -1.0;
  for (int round = 0; round < max_rounds; ++round) {
    std::array<PathCost, 6> costs;
    for (std::size_t i = 0; i < kAllPaths.size(); ++i) {
      costs[i] = path_costs(kAllPaths[i], params);
    }
    sol = optimize_inter(costs, caps, params.output_tokens);
    if (prev_objective >= 0.0 &&
        std::abs(sol.throughput - prev_objective) <= 1e-9 * std::max(1.0, prev_objective)) {
      break;
    }
    prev_objective = sol.throughput;

    // Implied average occupancy per pool: memory-time per second per GPU.
    double local_mem = 0.0, remote_mem = 0.0;
    for (std::size_t i = 0; i < kAllPaths.size(); ++i) {
      double n = sol.rates.at(kAllPaths[i]);
      local_mem += costs[i].local.mem * n;
      remote_mem += costs[i].remote.mem * n;
    }
    auto occupancy = [&](double mem_time, int gpus) {
      if (gpus <= 0) return 1;
      double slots = mem_time / gpus;
      return std::clamp(static_cast<int>(std::llround(slots)), 1, caps.b_max);
    };
    params.t_tok_local = t_tok(weights, occupancy(local_mem, caps.local_gpus), params.kv_full,
                               bw_hbm);
    params.t_tok_remote = t_tok(weights, occupancy(remote_mem, caps.remote_gpus), params.kv_full,
                                bw_hbm);
  }
  return sol;
}

double composed_accept_length(int x, double c, int d_e, const AcceptanceModel& gamma_model,
                              const std::function<double(int)>& gamma_e) {
  if (d_e < 1) throw ContractError("composed_accept_length: d_e must be >= 1");
  double gamma = expected_gamma(gamma_model, x, c);
  double ge = d_e == 1 ? 0.0 : gamma_e(d_e);
  if (d_e > 1 && !(ge >= 0.0 && ge <= 1.0)) {
    throw ContractError("composed_accept_length: gamma_e out of [0,1]");
  }
  return gamma * x * (1.0 + ge * (d_e - 1.0));
}

}  // namespace speckv
