#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "speckv/core.hpp"

namespace speckv {

enum class CompressorKind { DropUniform, DropWindow, QuantUniform };
enum class CompressorMode { Offline, Online };

std::string_view to_string(CompressorKind k);
CompressorKind compressor_kind_from_string(std::string_view s);
std::string_view to_string(CompressorMode m);
CompressorMode compressor_mode_from_string(std::string_view s);

// Configuration for one compressor. A run uses exactly one; token-dropping
// and quantization never mix across concurrent requests.
struct CompressorSpec {
  CompressorKind kind = CompressorKind::DropUniform;
  CompressorMode mode = CompressorMode::Offline;
  Scenario scenario = Scenario::LongContext;
  double ratio = 0.25;                 // target c for dropping kinds
  int bits = 4;                        // element width for quant-uniform
  double per_iteration_overhead = 0.0; // seconds, online mode only
  int window = 8;                      // drop-window: recent tokens kept
  int sink_tokens = 0;                 // drop-window: leading tokens never dropped

  bool operator==(const CompressorSpec&) const = default;
  void validate() const;

  bool is_token_dropping() const { return kind != CompressorKind::QuantUniform; }
  // Compression ratio the simulator charges: dropped fraction for dropping
  // kinds, bits/16 for quantization.
  double effective_ratio() const;
};

// Synthetic description of a full KV cache: shapes and sizes only, no tensor
// values. Elements are 16-bit at baseline.
struct KvShape {
  int layers = 1;
  int heads = 1;
  std::int64_t tokens = 0;
  Bytes bytes_per_token_per_head = 2;  // at bit_scheme=16

  Bytes full_bytes() const {
    return static_cast<Bytes>(layers) * heads * tokens * bytes_per_token_per_head;
  }
};

struct CompressedKVMeta {
  // [layer][head] -> dropped token positions; within a layer every head
  // drops the same count (positions may differ).
  std::vector<std::vector<std::vector<std::int64_t>>> dropped_indices;
  int bit_scheme = 16;
  Bytes payload_bytes = 0;

  std::int64_t retained_tokens(const KvShape& shape, int layer) const;
  void check_invariants(const KvShape& shape) const;  // throws ContractError
};

// Build the compressed metadata for a full cache at the target ratio.
// Dropping kinds evict positions; quant-uniform keeps all positions at the
// spec's bit width. Errors if a dropping ratio would retain < 1 token/head.
CompressedKVMeta compress(const CompressorSpec& spec, const KvShape& shape, double ratio,
                          std::uint64_t seed = 0);

struct DecompressedKV {
  Bytes bytes = 0;                          // size after materialization
  std::vector<std::int64_t> retained_per_layer;  // tokens per head, per layer
  bool lossless = false;                    // true when all positions recovered
};

DecompressedKV decompress(const CompressorSpec& spec, const CompressedKVMeta& meta,
                          const KvShape& shape);

// Per-request KV state visible to an online compressor.
struct OnlineRequestKv {
  KvShape shape;
  // [layer][head] -> positions already dropped (append-only, oldest first).
  std::vector<std::vector<std::vector<std::int64_t>>> dropped_indices;

  std::int64_t dropped_count(int layer) const;
};

// One online-compression step for a single layer over a batch. req_offsets
// slices the batch's flattened token axis, one [begin,end) per request, and
// must match the per-request context lengths. Returns, per request, a
// per-head list of newly dropped positions (equal counts across heads).
// Offline compressors reject this call.
std::vector<std::vector<std::vector<std::int64_t>>> update(
    const CompressorSpec& spec, int layer_index, std::span<const OnlineRequestKv> batch,
    const std::vector<std::pair<std::int64_t, std::int64_t>>& req_offsets);

// Rejects batches that mix token-dropping and quantization compressors.
void check_mode_exclusivity(std::span<const CompressorSpec> specs);

}  // namespace speckv
