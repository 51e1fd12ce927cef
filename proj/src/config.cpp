#include "speckv/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "speckv/util.hpp"

namespace speckv {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& message) { throw ConfigError(message); }

const json& member(const json& obj, const std::string& section, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (section.empty()) fail("missing section '" + key + "'");
    fail("missing field '" + section + "." + key + "'");
  }
  return *it;
}

double get_double(const json& obj, const std::string& section, const std::string& key) {
  const json& v = member(obj, section, key);
  if (!v.is_number()) fail("'" + section + "." + key + "' must be a number");
  return v.get<double>();
}

// Byte counts are 64-bit integers; JSON floats like 5e10 are accepted when
// exactly integral.
Bytes get_bytes(const json& obj, const std::string& section, const std::string& key) {
  const json& v = member(obj, section, key);
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number_float()) {
    double d = v.get<double>();
    if (std::floor(d) != d || std::abs(d) > 9.2e18) {
      fail("'" + section + "." + key + "' must be a whole byte count");
    }
    return static_cast<Bytes>(d);
  }
  fail("'" + section + "." + key + "' must be a number");
}

std::int64_t get_int(const json& obj, const std::string& section, const std::string& key) {
  return get_bytes(obj, section, key);
}

std::string get_string(const json& obj, const std::string& section, const std::string& key) {
  const json& v = member(obj, section, key);
  if (!v.is_string()) fail("'" + section + "." + key + "' must be a string");
  return v.get<std::string>();
}

std::optional<double> get_optional_double(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) fail("'" + key + "' must be a number");
  return it->get<double>();
}

AcceptanceModel parse_acceptance(const json& sec) {
  AcceptanceModel m;
  std::string kind = get_string(sec, "acceptance", "kind");
  if (kind == "per-token-iid") {
    m.kind = AcceptanceModel::Kind::PerTokenIid;
    const json& probs = member(sec, "acceptance", "per_token_prob");
    if (!probs.is_object()) fail("'acceptance.per_token_prob' must map c -> p(c)");
    for (auto it = probs.begin(); it != probs.end(); ++it) {
      double c;
      try {
        c = std::stod(it.key());
      } catch (const std::exception&) {
        fail("'acceptance.per_token_prob' key '" + it.key() + "' is not a ratio");
      }
      if (!it.value().is_number()) fail("'acceptance.per_token_prob' values must be numbers");
      m.per_token_prob[c] = it.value().get<double>();
    }
  } else if (kind == "tabulated") {
    m.kind = AcceptanceModel::Kind::Tabulated;
    const json& table = member(sec, "acceptance", "table");
    if (!table.is_array()) fail("'acceptance.table' must be an array of {x, c, gamma}");
    for (const json& row : table) {
      int x = static_cast<int>(get_int(row, "acceptance.table[]", "x"));
      double c = get_double(row, "acceptance.table[]", "c");
      double gamma = get_double(row, "acceptance.table[]", "gamma");
      auto [it, inserted] = m.table[c].emplace(x, gamma);
      if (!inserted) fail("'acceptance.table' has duplicate entry for (x=" +
                          std::to_string(x) + ", c=" + format_double(c) + ")");
    }
  } else {
    fail("acceptance.kind must be one of {per-token-iid, tabulated}");
  }
  return m;
}

CompressorSpec parse_compressor(const json& sec, Scenario scenario) {
  CompressorSpec spec;
  spec.kind = compressor_kind_from_string(get_string(sec, "compressor", "kind"));
  spec.mode = compressor_mode_from_string(get_string(sec, "compressor", "mode"));
  spec.scenario = scenario;
  if (spec.kind == CompressorKind::QuantUniform) {
    spec.bits = static_cast<int>(get_int(sec, "compressor", "bits"));
  } else {
    spec.ratio = get_double(sec, "compressor", "ratio");
  }
  if (auto v = get_optional_double(sec, "per_iteration_overhead")) {
    spec.per_iteration_overhead = *v;
  }
  if (sec.contains("window")) spec.window = static_cast<int>(get_int(sec, "compressor", "window"));
  if (sec.contains("sink_tokens")) {
    spec.sink_tokens = static_cast<int>(get_int(sec, "compressor", "sink_tokens"));
  }
  return spec;
}

}  // namespace

std::string_view to_string(IterationTimeMode m) {
  return m == IterationTimeMode::Derived ? "derived" : "fixed";
}

std::string_view to_string(AcceptanceRealization r) {
  return r == AcceptanceRealization::SeededDraws ? "seeded-draws" : "deterministic-mean";
}

void SystemConfig::validate() const {
  hardware.validate(scenario);
  model.validate();
  acceptance.validate();
  if (draft_length < 1) fail("draft_length must be >= 1");
  if (lookahead_window < 2) fail("lookahead_window must be >= 2");
  if (iteration_time_mode == IterationTimeMode::Fixed) {
    if (!iteration_time || *iteration_time <= 0) {
      fail("iteration_time > 0 is required under iteration_time_mode=fixed");
    }
  }
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (kv_full_bytes <= 0) fail("kv_full_bytes must be > 0");
  if (!(compression_ratio > 0.0 && compression_ratio <= 1.0)) {
    fail("compression_ratio out of (0,1]");
  }
  if (output_tokens < 1) fail("output_tokens must be >= 1");
  if (decode_time && *decode_time < 0) fail("decode_time must be >= 0");
  if (verify_forward_time && *verify_forward_time < 0) {
    fail("verify_forward_time must be >= 0");
  }
  if (compressor) {
    compressor->validate();
    if (compressor->scenario != scenario) fail("compressor.scenario must match scenario");
  }
}

SystemConfig load_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(std::string("config parse error: ") + e.what());
  }
  if (!doc.is_object()) fail("config must be a JSON object");

  SystemConfig cfg;

  const json& scen = member(doc, "", "scenario");
  cfg.scenario = scenario_from_string(get_string(scen, "scenario", "kind"));

  const json& hw = member(doc, "", "hardware");
  cfg.hardware.hbm_bandwidth = get_double(hw, "hardware", "hbm_bandwidth");
  cfg.hardware.interconnect_bandwidth = get_optional_double(hw, "interconnect_bandwidth");
  cfg.hardware.storage_local_bandwidth = get_optional_double(hw, "storage_local_bandwidth");
  cfg.hardware.storage_remote_bandwidth = get_optional_double(hw, "storage_remote_bandwidth");
  cfg.hardware.gpu_mem = get_bytes(hw, "hardware", "gpu_mem");
  cfg.hardware.local_gpus = static_cast<int>(get_int(hw, "hardware", "local_gpus"));
  cfg.hardware.remote_gpus = static_cast<int>(get_int(hw, "hardware", "remote_gpus"));

  const json& model = member(doc, "", "model");
  cfg.model.weights_bytes = get_bytes(model, "model", "weights_bytes");
  cfg.model.kv_bytes_per_token = get_bytes(model, "model", "kv_bytes_per_token");

  cfg.acceptance = parse_acceptance(member(doc, "", "acceptance"));

  const json& rt = member(doc, "", "runtime");
  cfg.draft_length = static_cast<int>(get_int(rt, "runtime", "draft_length"));
  cfg.lookahead_window = static_cast<int>(get_int(rt, "runtime", "lookahead_window"));
  std::string mode = get_string(rt, "runtime", "iteration_time_mode");
  if (mode == "derived") {
    cfg.iteration_time_mode = IterationTimeMode::Derived;
  } else if (mode == "fixed") {
    cfg.iteration_time_mode = IterationTimeMode::Fixed;
  } else {
    fail("runtime.iteration_time_mode must be one of {derived, fixed}");
  }
  cfg.iteration_time = get_optional_double(rt, "iteration_time");
  if (rt.contains("acceptance_realization")) {
    std::string r = get_string(rt, "runtime", "acceptance_realization");
    if (r == "seeded-draws") {
      cfg.acceptance_realization = AcceptanceRealization::SeededDraws;
    } else if (r == "deterministic-mean") {
      cfg.acceptance_realization = AcceptanceRealization::DeterministicMean;
    } else {
      fail("runtime.acceptance_realization must be one of {seeded-draws, deterministic-mean}");
    }
  }
  cfg.batch_size = static_cast<int>(get_int(rt, "runtime", "batch_size"));
  cfg.kv_full_bytes = get_bytes(rt, "runtime", "kv_full_bytes");
  cfg.compression_ratio = get_double(rt, "runtime", "compression_ratio");
  cfg.output_tokens = get_int(rt, "runtime", "output_tokens");
  cfg.decode_time = get_optional_double(rt, "decode_time");
  cfg.verify_forward_time = get_optional_double(rt, "verify_forward_time");
  if (rt.contains("verify_cached")) {
    const json& v = rt["verify_cached"];
    if (!v.is_boolean()) fail("'runtime.verify_cached' must be a boolean");
    cfg.verify_cached = v.get<bool>();
  }

  if (doc.contains("compressor") && !doc["compressor"].is_null()) {
    cfg.compressor = parse_compressor(doc["compressor"], cfg.scenario);
  }

  cfg.validate();
  return cfg;
}

SystemConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return load_config(buf.str());
}

std::string serialize_config(const SystemConfig& cfg) {
  json doc;
  json hw;
  hw["hbm_bandwidth"] = cfg.hardware.hbm_bandwidth;
  if (cfg.hardware.interconnect_bandwidth) {
    hw["interconnect_bandwidth"] = *cfg.hardware.interconnect_bandwidth;
  }
  if (cfg.hardware.storage_local_bandwidth) {
    hw["storage_local_bandwidth"] = *cfg.hardware.storage_local_bandwidth;
  }
  if (cfg.hardware.storage_remote_bandwidth) {
    hw["storage_remote_bandwidth"] = *cfg.hardware.storage_remote_bandwidth;
  }
  hw["gpu_mem"] = cfg.hardware.gpu_mem;
  hw["local_gpus"] = cfg.hardware.local_gpus;
  hw["remote_gpus"] = cfg.hardware.remote_gpus;
  doc["hardware"] = std::move(hw);

  doc["model"] = {{"weights_bytes", cfg.model.weights_bytes},
                  {"kv_bytes_per_token", cfg.model.kv_bytes_per_token}};

  json acc;
  if (cfg.acceptance.kind == AcceptanceModel::Kind::PerTokenIid) {
    acc["kind"] = "per-token-iid";
    json probs = json::object();
    for (const auto& [c, p] : cfg.acceptance.per_token_prob) probs[format_double(c)] = p;
    acc["per_token_prob"] = std::move(probs);
  } else {
    acc["kind"] = "tabulated";
    json table = json::array();
    for (const auto& [c, by_x] : cfg.acceptance.table) {
      for (const auto& [x, gamma] : by_x) {
        table.push_back({{"x", x}, {"c", c}, {"gamma", gamma}});
      }
    }
    acc["table"] = std::move(table);
  }
  doc["acceptance"] = std::move(acc);

  json rt;
  rt["draft_length"] = cfg.draft_length;
  rt["lookahead_window"] = cfg.lookahead_window;
  rt["iteration_time_mode"] = std::string(to_string(cfg.iteration_time_mode));
  if (cfg.iteration_time) rt["iteration_time"] = *cfg.iteration_time;
  rt["acceptance_realization"] = std::string(to_string(cfg.acceptance_realization));
  rt["batch_size"] = cfg.batch_size;
  rt["kv_full_bytes"] = cfg.kv_full_bytes;
  rt["compression_ratio"] = cfg.compression_ratio;
  rt["output_tokens"] = cfg.output_tokens;
  if (cfg.decode_time) rt["decode_time"] = *cfg.decode_time;
  if (cfg.verify_forward_time) rt["verify_forward_time"] = *cfg.verify_forward_time;
  rt["verify_cached"] = cfg.verify_cached;
  doc["runtime"] = std::move(rt);

  doc["scenario"] = {{"kind", std::string(to_string(cfg.scenario))}};

  if (cfg.compressor) {
    const CompressorSpec& sp = *cfg.compressor;
    json comp;
    comp["kind"] = std::string(to_string(sp.kind));
    comp["mode"] = std::string(to_string(sp.mode));
    if (sp.kind == CompressorKind::QuantUniform) {
      comp["bits"] = sp.bits;
    } else {
      comp["ratio"] = sp.ratio;
    }
    comp["per_iteration_overhead"] = sp.per_iteration_overhead;
    comp["window"] = sp.window;
    comp["sink_tokens"] = sp.sink_tokens;
    doc["compressor"] = std::move(comp);
  }

  return doc.dump(2) + "\n";
}

std::string config_digest(const SystemConfig& cfg) {
  std::uint64_t h = fnv1a64(serialize_config(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace speckv
