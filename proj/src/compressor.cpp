#include "speckv/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "speckv/util.hpp"

namespace speckv {

std::string_view to_string(CompressorKind k) {
  switch (k) {
    case CompressorKind::DropUniform: return "drop-uniform";
    case CompressorKind::DropWindow: return "drop-window";
    case CompressorKind::QuantUniform: return "quant-uniform";
  }
  return "?";
}

CompressorKind compressor_kind_from_string(std::string_view s) {
  if (s == "drop-uniform") return CompressorKind::DropUniform;
  if (s == "drop-window") return CompressorKind::DropWindow;
  if (s == "quant-uniform") return CompressorKind::QuantUniform;
  throw ConfigError("compressor.kind must be one of {drop-uniform, drop-window, quant-uniform}");
}

std::string_view to_string(CompressorMode m) {
  return m == CompressorMode::Offline ? "offline" : "online";
}

CompressorMode compressor_mode_from_string(std::string_view s) {
  if (s == "offline") return CompressorMode::Offline;
  if (s == "online") return CompressorMode::Online;
  throw ConfigError("compressor.mode must be one of {offline, online}");
}

void CompressorSpec::validate() const {
  if (is_token_dropping()) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("compressor.ratio out of (0,1)");
  } else {
    if (bits < 1 || bits > 16) throw ConfigError("compressor.bits out of [1,16]");
  }
  if (mode == CompressorMode::Online) {
    if (per_iteration_overhead < 0.0) {
      throw ConfigError("compressor.per_iteration_overhead must be >= 0");
    }
    if (kind == CompressorKind::QuantUniform) {
      throw ConfigError("quant-uniform compressor is offline only");
    }
  }
  if (kind == CompressorKind::DropWindow) {
    if (window < 1) throw ConfigError("compressor.window must be >= 1");
    if (sink_tokens < 0) throw ConfigError("compressor.sink_tokens must be >= 0");
  }
}

double CompressorSpec::effective_ratio() const {
  if (kind == CompressorKind::QuantUniform) return static_cast<double>(bits) / 16.0;
  return ratio;
}

std::int64_t CompressedKVMeta::retained_tokens(const KvShape& shape, int layer) const {
  if (layer < 0 || layer >= shape.layers) throw ContractError("retained_tokens: bad layer");
  if (dropped_indices.empty()) return shape.tokens;
  const auto& heads = dropped_indices.at(layer);
  if (heads.empty()) return shape.tokens;
  return shape.tokens - static_cast<std::int64_t>(heads.front().size());
}

void CompressedKVMeta::check_invariants(const KvShape& shape) const {
  if (bit_scheme < 1 || bit_scheme > 16) throw ContractError("bit_scheme out of [1,16]");
  Bytes expected = 0;
  for (int layer = 0; layer < shape.layers; ++layer) {
    std::size_t count = 0;
    if (!dropped_indices.empty()) {
      const auto& heads = dropped_indices.at(layer);
      if (!heads.empty()) {
        if (static_cast<int>(heads.size()) != shape.heads) {
          throw ContractError("dropped_indices head count mismatch");
        }
        count = heads.front().size();
        for (const auto& positions : heads) {
          if (positions.size() != count) {
            throw ContractError("heads within a layer must drop the same count of tokens");
          }
          for (auto pos : positions) {
            if (pos < 0 || pos >= shape.tokens) throw ContractError("dropped position out of range");
          }
        }
      }
    }
    std::int64_t retained = shape.tokens - static_cast<std::int64_t>(count);
    expected += retained * shape.heads * shape.bytes_per_token_per_head;
  }
  // Size law: retained elements scaled by the bit width, exact in bytes.
  expected = expected * bit_scheme / 16;
  if (expected != payload_bytes) {
    throw ContractError("payload_bytes inconsistent with retained tokens and bit_scheme");
  }
}

namespace {

Bytes payload_for(const KvShape& shape, const std::vector<std::int64_t>& retained_per_layer,
                  int bit_scheme) {
  Bytes total = 0;
  for (auto retained : retained_per_layer) {
    total += retained * shape.heads * shape.bytes_per_token_per_head;
  }
  return total * bit_scheme / 16;
}

std::vector<std::int64_t> pick_uniform_drops(std::int64_t tokens, std::int64_t drop_count,
                                             std::mt19937_64& rng) {
  // Partial Fisher-Yates over [0, tokens); deterministic for a fixed seed.
  std::vector<std::int64_t> positions(tokens);
  std::iota(positions.begin(), positions.end(), 0);
  for (std::int64_t i = 0; i < drop_count; ++i) {
    std::int64_t j = i + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(tokens - i));
    std::swap(positions[i], positions[j]);
  }
  positions.resize(drop_count);
  std::sort(positions.begin(), positions.end());
  return positions;
}

}  // namespace

CompressedKVMeta compress(const CompressorSpec& spec, const KvShape& shape, double ratio,
                          std::uint64_t seed) {
  if (shape.tokens == 0) {
    CompressedKVMeta empty;
    empty.bit_scheme = spec.kind == CompressorKind::QuantUniform ? spec.bits : 16;
    empty.payload_bytes = 0;
    empty.dropped_indices.assign(shape.layers,
                                 std::vector<std::vector<std::int64_t>>(shape.heads));
    return empty;
  }

  CompressedKVMeta meta;
  meta.dropped_indices.assign(shape.layers, std::vector<std::vector<std::int64_t>>(shape.heads));

  if (spec.kind == CompressorKind::QuantUniform) {
    meta.bit_scheme = spec.bits;
    meta.payload_bytes =
        payload_for(shape, std::vector<std::int64_t>(shape.layers, shape.tokens), spec.bits);
    meta.check_invariants(shape);
    return meta;
  }

  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("compress: ratio out of (0,1)");
  meta.bit_scheme = 16;
  std::int64_t retained = static_cast<std::int64_t>(std::llround(ratio * shape.tokens));
  if (retained < 1) {
    throw ConfigError("compress: ratio " + format_double(ratio) + " would retain < 1 token/head");
  }
  std::int64_t drop_count = shape.tokens - retained;

  std::mt19937_64 rng(splitmix64(seed));
  for (int layer = 0; layer < shape.layers; ++layer) {
    for (int head = 0; head < shape.heads; ++head) {
      if (spec.kind == CompressorKind::DropUniform) {
        meta.dropped_indices[layer][head] = pick_uniform_drops(shape.tokens, drop_count, rng);
      } else {
        // drop-window: evict the oldest non-sink positions.
        std::int64_t begin = spec.sink_tokens;
        std::vector<std::int64_t> drops(drop_count);
        std::iota(drops.begin(), drops.end(), begin);
        meta.dropped_indices[layer][head] = std::move(drops);
      }
    }
  }
  meta.payload_bytes =
      payload_for(shape, std::vector<std::int64_t>(shape.layers, retained), 16);
  meta.check_invariants(shape);
  return meta;
}

DecompressedKV decompress(const CompressorSpec& spec, const CompressedKVMeta& meta,
                          const KvShape& shape) {
  meta.check_invariants(shape);
  DecompressedKV out;
  out.retained_per_layer.resize(shape.layers);
  for (int layer = 0; layer < shape.layers; ++layer) {
    out.retained_per_layer[layer] = meta.retained_tokens(shape, layer);
  }
  if (spec.kind == CompressorKind::QuantUniform) {
    // Dequantization restores the 16-bit footprint: payload / bit_scheme * 16.
    out.bytes = meta.payload_bytes * 16 / meta.bit_scheme;
    out.lossless = false;
    return out;
  }
  // Dropping is not invertible; the result is the sparse description itself.
  out.bytes = meta.payload_bytes;
  out.lossless =
      std::all_of(out.retained_per_layer.begin(), out.retained_per_layer.end(),
                  [&](std::int64_t r) { return r == shape.tokens; });
  return out;
}

std::int64_t OnlineRequestKv::dropped_count(int layer) const {
  if (dropped_indices.empty()) return 0;
  const auto& heads = dropped_indices.at(layer);
  return heads.empty() ? 0 : static_cast<std::int64_t>(heads.front().size());
}

std::vector<std::vector<std::vector<std::int64_t>>> update(
    const CompressorSpec& spec, int layer_index, std::span<const OnlineRequestKv> batch,
    const std::vector<std::pair<std::int64_t, std::int64_t>>& req_offsets) {
  if (spec.mode != CompressorMode::Online) {
    throw ContractError("update: compressor mode is offline; update is unsupported");
  }
  if (req_offsets.size() != batch.size()) {
    throw ContractError("update: req_offsets must have one [begin,end) per request");
  }
  std::int64_t cursor = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& [begin, end] = req_offsets[i];
    if (begin != cursor || end - begin != batch[i].shape.tokens) {
      throw ContractError("update: req_offsets do not partition the batch token axis");
    }
    cursor = end;
  }

  std::vector<std::vector<std::vector<std::int64_t>>> new_drops(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const OnlineRequestKv& req = batch[i];
    if (layer_index < 0 || layer_index >= req.shape.layers) {
      throw ContractError("update: layer_index out of range");
    }
    std::int64_t already = req.dropped_count(layer_index);
    std::int64_t retained = req.shape.tokens - already;
    std::int64_t budget = spec.sink_tokens + spec.window;
    std::int64_t drop_now = std::max<std::int64_t>(0, retained - budget);
    std::vector<std::int64_t> positions(drop_now);
    // Oldest non-sink positions first; earlier updates already took
    // everything below this offset.
    std::iota(positions.begin(), positions.end(), spec.sink_tokens + already);
    new_drops[i].assign(req.shape.heads, positions);
  }
  return new_drops;
}

void check_mode_exclusivity(std::span<const CompressorSpec> specs) {
  if (specs.empty()) return;
  bool dropping = specs.front().is_token_dropping();
  for (const auto& spec : specs) {
    if (spec.is_token_dropping() != dropping) {
      throw ConfigError(
          "mixing token-dropping and quantization compressors in one run is not allowed");
    }
  }
}

}  // namespace speckv
