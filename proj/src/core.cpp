#include "speckv/core.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "speckv/util.hpp"

namespace speckv {

namespace {

constexpr double kRatioLookupTol = 1e-9;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::LongContext: return "long-context";
    case Scenario::RemotePrefix: return "remote-prefix";
  }
  return "?";
}

Scenario scenario_from_string(std::string_view s) {
  if (s == "long-context") return Scenario::LongContext;
  if (s == "remote-prefix") return Scenario::RemotePrefix;
  throw ConfigError("scenario must be one of {long-context, remote-prefix}, got '" +
                    std::string(s) + "'");
}

void HardwareProfile::validate(Scenario scenario) const {
  require(hbm_bandwidth > 0, "hbm_bandwidth must be > 0");
  require(gpu_mem > 0, "gpu_mem must be > 0");
  require(local_gpus >= 0 && remote_gpus >= 0, "gpu counts must be >= 0");
  require(local_gpus + remote_gpus >= 1, "local_gpus + remote_gpus must be >= 1");
  for (const auto& [name, value] :
       {std::pair{"interconnect_bandwidth", interconnect_bandwidth},
        std::pair{"storage_local_bandwidth", storage_local_bandwidth},
        std::pair{"storage_remote_bandwidth", storage_remote_bandwidth}}) {
    if (value) require(*value > 0, std::string(name) + " must be > 0");
  }
  if (scenario == Scenario::LongContext) {
    require(interconnect_bandwidth.has_value(),
            "interconnect_bandwidth is required under scenario=long-context");
  } else {
    require(storage_local_bandwidth.has_value(),
            "storage_local_bandwidth (BW_h) is required under scenario=remote-prefix");
    require(storage_remote_bandwidth.has_value(),
            "storage_remote_bandwidth (BW_l) is required under scenario=remote-prefix");
    require(*storage_local_bandwidth > *storage_remote_bandwidth,
            "remote-prefix requires storage_local_bandwidth > storage_remote_bandwidth");
  }
}

void ModelSpec::validate() const {
  require(weights_bytes > 0, "weights_bytes must be > 0");
  require(kv_bytes_per_token > 0, "kv_bytes_per_token must be > 0");
}

void Request::validate() const {
  require(kv_full_bytes > 0, "kv_full_bytes must be > 0");
  require(compression_ratio > 0.0 && compression_ratio <= 1.0,
          "compression_ratio out of (0,1]");
  require(output_tokens >= 1, "output_tokens must be >= 1");
}

void AcceptanceModel::validate() const {
  if (kind == Kind::PerTokenIid) {
    require(!per_token_prob.empty(), "per-token-iid acceptance model needs per_token_prob");
    for (const auto& [c, p] : per_token_prob) {
      require(c > 0.0 && c <= 1.0, "per_token_prob key out of (0,1]");
      require(p >= 0.0 && p <= 1.0, "per_token_prob value out of [0,1]");
      if (c == 1.0) require(p == 1.0, "per_token_prob at c=1 must be 1 (no compression)");
    }
  } else {
    require(!table.empty(), "tabulated acceptance model needs a table");
    for (const auto& [c, by_x] : table) {
      require(c > 0.0 && c <= 1.0, "tabulated c out of (0,1]");
      double prev = std::numeric_limits<double>::infinity();
      for (const auto& [x, gamma] : by_x) {
        require(x >= 1, "tabulated x must be >= 1");
        require(gamma >= 0.0 && gamma <= 1.0, "tabulated gamma out of [0,1]");
        require(gamma <= prev, "tabulated gamma must be non-increasing in x for fixed c");
        if (c == 1.0) require(gamma == 1.0, "tabulated gamma at c=1 must be 1");
        prev = gamma;
      }
    }
  }
}

namespace {

// Exact-ish map lookup on a double key; ratios come from text so tiny
// representation noise is tolerated.
template <typename Map>
auto find_ratio(const Map& map, double c) -> decltype(map.begin()) {
  auto it = map.lower_bound(c - kRatioLookupTol);
  if (it != map.end() && std::abs(it->first - c) <= kRatioLookupTol) return it;
  return map.end();
}

double truncated_geometric_mean_run(double p, int x) {
  if (p >= 1.0) return static_cast<double>(x);
  if (p <= 0.0) return 0.0;
  // sum_{k=1..x} p^k = p (1 - p^x) / (1 - p)
  return p * (1.0 - std::pow(p, x)) / (1.0 - p);
}

}  // namespace

double expected_gamma(const AcceptanceModel& model, int x, double c) {
  if (x < 1) throw ContractError("expected_gamma: x must be >= 1");
  if (!(c > 0.0 && c <= 1.0)) throw ContractError("expected_gamma: c out of (0,1]");
  if (model.kind == AcceptanceModel::Kind::PerTokenIid) {
    auto it = find_ratio(model.per_token_prob, c);
    double p;
    if (it != model.per_token_prob.end()) {
      p = it->second;
    } else if (c == 1.0) {
      p = 1.0;  // degenerate drafter == verifier
    } else {
      throw ConfigError("acceptance model has no per_token_prob entry for c=" +
                        format_double(c));
    }
    return truncated_geometric_mean_run(p, x) / static_cast<double>(x);
  }
  auto group = find_ratio(model.table, c);
  if (group == model.table.end()) {
    if (c == 1.0) return 1.0;
    throw ConfigError("acceptance table has no entries for c=" + format_double(c));
  }
  // Nearest neighbor on x; ties resolved toward the smaller x.
  const auto& by_x = group->second;
  auto hi = by_x.lower_bound(x);
  if (hi != by_x.end() && hi->first == x) return hi->second;
  if (hi == by_x.begin()) return hi->second;
  if (hi == by_x.end()) return std::prev(hi)->second;
  auto lo = std::prev(hi);
  return (hi->first - x < x - lo->first) ? hi->second : lo->second;
}

double implied_per_token_prob(const AcceptanceModel& model, int x, double c) {
  if (model.kind == AcceptanceModel::Kind::PerTokenIid) {
    auto it = find_ratio(model.per_token_prob, c);
    if (it != model.per_token_prob.end()) return it->second;
    if (c == 1.0) return 1.0;
    throw ConfigError("acceptance model has no per_token_prob entry for c=" +
                      format_double(c));
  }
  const double target = expected_gamma(model, x, c) * x;
  if (target >= static_cast<double>(x)) return 1.0;
  if (target <= 0.0) return 0.0;
  double lo = 0.0, hi = 1.0;
  for (int iter = 0; iter < 200; ++iter) {
    double mid = 0.5 * (lo + hi);
    (truncated_geometric_mean_run(mid, x) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Bytes kv_full_bytes(const ModelSpec& model, std::int64_t context_tokens) {
  if (context_tokens < 0) throw ContractError("kv_full_bytes: context_tokens must be >= 0");
  if (context_tokens != 0 &&
      model.kv_bytes_per_token > std::numeric_limits<Bytes>::max() / context_tokens) {
    throw ContractError("kv_full_bytes: product overflows 64-bit bytes");
  }
  return model.kv_bytes_per_token * context_tokens;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    // trim surrounding spaces
    auto b = field.find_first_not_of(" \t\r");
    auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

std::vector<Request> parse_trace(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("trace: empty document (header required)");
  auto header = split_csv_line(line);
  const std::vector<std::string> expected = {"arrival_s", "kv_full_bytes",
                                             "compression_ratio", "output_tokens"};
  if (header != expected) {
    throw ConfigError(
        "trace: header must be 'arrival_s,kv_full_bytes,compression_ratio,output_tokens'");
  }
  std::vector<Request> requests;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4) {
      throw ConfigError("trace line " + std::to_string(lineno) + ": expected 4 fields");
    }
    Request r;
    try {
      r.id = static_cast<RequestId>(requests.size());
      r.arrival = std::stod(fields[0]);
      r.kv_full_bytes = static_cast<Bytes>(std::stoll(fields[1]));
      r.compression_ratio = std::stod(fields[2]);
      r.output_tokens = std::stoll(fields[3]);
    } catch (const std::exception&) {
      throw ConfigError("trace line " + std::to_string(lineno) + ": malformed number");
    }
    if (r.arrival < 0) {
      throw ConfigError("trace line " + std::to_string(lineno) + ": arrival_s must be >= 0");
    }
    try {
      r.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
    requests.push_back(r);
  }
  return requests;
}

std::vector<Request> load_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_trace(buf.str());
}

std::string serialize_trace(const std::vector<Request>& requests) {
  std::ostringstream out;
  out << "arrival_s,kv_full_bytes,compression_ratio,output_tokens\n";
  for (const auto& r : requests) {
    out << format_double(r.arrival) << ',' << r.kv_full_bytes << ','
        << format_double(r.compression_ratio) << ',' << r.output_tokens << '\n';
  }
  return out.str();
}

std::vector<Request> homogeneous_workload(int batch, Bytes kv_full, double compression_ratio,
                                          std::int64_t output_tokens) {
  std::vector<Request> out;
  out.reserve(batch);
  for (int i = 0; i < batch; ++i) {
    Request r;
    r.id = i;
    r.arrival = 0.0;
    r.kv_full_bytes = kv_full;
    r.compression_ratio = compression_ratio;
    r.output_tokens = output_tokens;
    r.validate();
    out.push_back(r);
  }
  return out;
}

}  // namespace speckv
