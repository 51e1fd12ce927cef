#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace speckv {

using Bytes = std::int64_t;
using Seconds = double;
using RequestId = std::int64_t;

// Raised when a document or value fails validation; the message names the
// violated invariant.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a caller breaks an API precondition (wrong lengths, double
// release, ...). These are programming errors, not input errors.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Scenario { LongContext, RemotePrefix };

std::string_view to_string(Scenario s);
Scenario scenario_from_string(std::string_view s);

// Bandwidths are bytes/second; capacities and sizes are whole bytes.
// Scenario-dependent links are optional: long-context needs the CPU-GPU
// interconnect, remote-prefix needs the two storage links.
struct HardwareProfile {
  double hbm_bandwidth = 0.0;                            // BW_hbm
  std::optional<double> interconnect_bandwidth;          // BW_inter
  std::optional<double> storage_local_bandwidth;         // BW_h (fast)
  std::optional<double> storage_remote_bandwidth;        // BW_l (slow)
  Bytes gpu_mem = 0;
  int local_gpus = 0;
  int remote_gpus = 0;

  bool operator==(const HardwareProfile&) const = default;
  void validate(Scenario scenario) const;
};

struct ModelSpec {
  Bytes weights_bytes = 0;        // M
  Bytes kv_bytes_per_token = 0;

  bool operator==(const ModelSpec&) const = default;
  void validate() const;
};

struct Request {
  RequestId id = 0;
  Seconds arrival = 0.0;
  Bytes kv_full_bytes = 0;
  double compression_ratio = 1.0;   // c in (0,1]; 1 means no compression
  std::int64_t output_tokens = 1;   // K
  bool speculating = true;

  bool operator==(const Request&) const = default;
  void validate() const;
};

// Acceptance-rate model gamma(x, c).
//
// per-token-iid: a per-token acceptance probability p(c); a round of x
// drafted tokens keeps a truncated-geometric run, so
//   gamma(x, c) = (sum_{k=1..x} p(c)^k) / x.
// tabulated: measured gamma values keyed by (x, c); lookups use the nearest
// tabulated x and require an exact match on c.
struct AcceptanceModel {
  enum class Kind { PerTokenIid, Tabulated };

  Kind kind = Kind::PerTokenIid;
  std::map<double, double> per_token_prob;          // c -> p(c)
  std::map<double, std::map<int, double>> table;    // c -> (x -> gamma)

  bool operator==(const AcceptanceModel&) const = default;
  void validate() const;
};

// gamma(x, c) under the model above. Tabulated lookups with no entry for c
// raise ConfigError; no interpolation is performed.
double expected_gamma(const AcceptanceModel& model, int x, double c);

// Per-token acceptance probability implied by the model at (x, c): for the
// iid kind this is p(c); for tabulated it is the p solving
// sum_{k=1..x} p^k = gamma(x,c) * x (bisection).
double implied_per_token_prob(const AcceptanceModel& model, int x, double c);

// context_tokens * kv_bytes_per_token, exact integer arithmetic.
Bytes kv_full_bytes(const ModelSpec& model, std::int64_t context_tokens);

// Workload trace: header line `arrival_s,kv_full_bytes,compression_ratio,
// output_tokens`, one request per line, ids assigned in file order.
std::vector<Request> parse_trace(std::string_view text);
std::vector<Request> load_trace_file(const std::string& path);
std::string serialize_trace(const std::vector<Request>& requests);

// Homogeneous batch arriving at t=0; used by tests and synthetic sweeps.
std::vector<Request> homogeneous_workload(int batch, Bytes kv_full, double compression_ratio,
                                          std::int64_t output_tokens);

}  // namespace speckv
