#pragma once

#include <optional>
#include <string>

#include "speckv/compressor.hpp"
#include "speckv/core.hpp"

namespace speckv {

enum class IterationTimeMode { Derived, Fixed };
enum class AcceptanceRealization { SeededDraws, DeterministicMean };

std::string_view to_string(IterationTimeMode m);
std::string_view to_string(AcceptanceRealization r);

// Full run configuration. Loaded from a JSON document with top-level
// sections `hardware`, `model`, `acceptance`, `runtime`, `scenario`, and an
// optional `compressor`; see README for the schema.
struct SystemConfig {
  HardwareProfile hardware;
  ModelSpec model;
  AcceptanceModel acceptance;

  // runtime section
  int draft_length = 1;              // x
  int lookahead_window = 2;          // W
  IterationTimeMode iteration_time_mode = IterationTimeMode::Derived;
  std::optional<double> iteration_time;  // required under fixed mode
  AcceptanceRealization acceptance_realization = AcceptanceRealization::SeededDraws;
  // Homogeneous operating point used by analytics and synthetic workloads.
  int batch_size = 1;                // B
  Bytes kv_full_bytes = 1;           // per-request full KV size
  double compression_ratio = 1.0;    // c
  std::int64_t output_tokens = 1;    // K
  // Remote-prefix knobs: per-token decode and verify forward-pass times
  // default to the t_tok model at the observed occupancy when unset.
  std::optional<double> decode_time;
  std::optional<double> verify_forward_time;
  bool verify_cached = false;  // keep full KV on the local GPU across rounds

  Scenario scenario = Scenario::LongContext;
  std::optional<CompressorSpec> compressor;

  bool operator==(const SystemConfig&) const = default;
  void validate() const;
};

// Parse and validate a config document. Throws ConfigError with the violated
// invariant on bad input.
SystemConfig load_config(const std::string& text);
SystemConfig load_config_file(const std::string& path);

// Canonical serialization; load_config(serialize_config(cfg)) == cfg.
std::string serialize_config(const SystemConfig& config);

// Stable hex digest of the canonical serialization; changes iff any config
// field changes.
std::string config_digest(const SystemConfig& config);

}  // namespace speckv
