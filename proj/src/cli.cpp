#include "speckv/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "speckv/analytics.hpp"
#include "speckv/config.hpp"
#include "speckv/core.hpp"
#include "speckv/sim.hpp"
#include "speckv/specloop.hpp"
#include "speckv/util.hpp"

namespace speckv::cli {

using nlohmann::json;

namespace {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

json metrics_to_json(const SimMetrics& m) {
  json j;
  j["schedule"] = m.schedule;
  j["scenario"] = m.scenario;
  j["seed"] = m.seed;
  j["tokens_emitted"] = m.tokens_emitted;
  j["sim_time_s"] = m.sim_time;
  j["throughput_tok_s"] = m.throughput;
  j["warm_throughput_tok_s"] = m.warm_throughput;
  j["p50_latency_s"] = m.p50_latency;
  j["p99_latency_s"] = m.p99_latency;
  j["latencies_s"] = m.latencies;
  j["peak_hbm_bytes"] = m.peak_hbm;
  j["hbm_excess_bytes"] = m.hbm_excess;
  j["interconnect_busy_fraction"] = m.interconnect_busy;
  j["per_iteration_verify_counts"] = m.verify_counts;
  j["late_transfers"] = m.late_transfers;
  j["completed_requests"] = m.completed;
  j["unserved_requests"] = m.unserved;
  j["per_cycle_transfer_s"] = m.per_cycle_transfer;
  return j;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write output file: " + path);
  out << content;
}

void write_report(const std::string& out_prefix, const std::string& subcommand,
                  const std::string& digest, std::uint64_t seed, double runtime_s,
                  json payload, const std::string& csv) {
  json report;
  report["subcommand"] = subcommand;
  report["config_digest"] = digest;
  report["seed"] = seed;
  report["runtime_s"] = runtime_s;
  report["payload"] = std::move(payload);
  write_file(out_prefix + ".json", report.dump(2) + "\n");
  write_file(out_prefix + ".csv", csv);
}

std::string args_digest(const json& j) {
  std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

int guard(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace

int cmd_simulate(const SimulateArgs& args) {
  return guard([&] {
    Stopwatch watch;
    SystemConfig cfg = load_config_file(args.config_path);
    std::vector<Request> workload = load_trace_file(args.trace_path);

    std::vector<SimMetrics> rows;
    if (args.schedule == "compare") {
      rows = compare_schedules(cfg, workload, args.seed);
    } else {
      rows.push_back(simulate(cfg, workload, schedule_from_string(args.schedule), args.seed));
    }

    std::ostringstream csv;
    csv << SimMetrics::csv_header() << "\n";
    json payload = json::array();
    for (const SimMetrics& m : rows) {
      csv << m.csv_row(static_cast<int>(workload.size()), cfg.draft_length,
                       cfg.compression_ratio)
          << "\n";
      payload.push_back(metrics_to_json(m));
    }
    write_report(args.out, "simulate", config_digest(cfg), args.seed, watch.seconds(),
                 std::move(payload), csv.str());
    std::cout << "simulate: " << rows.size() << " run(s), throughput "
              << format_double(rows.front().throughput) << " tok/s, report " << args.out
              << ".json\n";
    return kExitOk;
  });
}

namespace {

int analyze_intra(const AnalyzeArgs& args, const SystemConfig& cfg, const Stopwatch& watch) {
  IntraGrids grids = IntraGrids::defaults(cfg.batch_size);
  // a tabulated acceptance model only has data at its own ratios; sweep those
  for (const auto& [c, by_x] : cfg.acceptance.table) {
    if (c < 1.0 && std::find(grids.compression.begin(), grids.compression.end(), c) ==
                       grids.compression.end()) {
      grids.compression.push_back(c);
    }
  }
  std::sort(grids.compression.begin(), grids.compression.end());
  auto rows = intra_sweep(cfg.hardware, cfg.model.weights_bytes, cfg.kv_full_bytes,
                          cfg.batch_size, cfg.acceptance, grids);
  auto best = optimize_intra(cfg.hardware, cfg.model.weights_bytes, cfg.kv_full_bytes,
                             cfg.batch_size, cfg.acceptance, grids);

  std::ostringstream csv;
  csv << "B_c,x,c,l,feasible,throughput_tok_s\n";
  for (const IntraSweepRow& row : rows) {
    csv << row.knobs.offloaded_count << ',' << row.knobs.draft_length << ','
        << format_double(row.knobs.compression) << ',' << row.knobs.cycles_per_load << ','
        << (row.feasible ? "true" : "false") << ',' << format_double(row.throughput) << "\n";
  }
  json payload;
  payload["mode"] = "intra";
  payload["grid_points"] = rows.size();
  if (best) {
    payload["optimum"] = {{"B_c", best->knobs.offloaded_count},
                          {"x", best->knobs.draft_length},
                          {"c", best->knobs.compression},
                          {"l", best->knobs.cycles_per_load},
                          {"throughput_tok_s", best->throughput}};
  } else {
    payload["optimum"] = nullptr;
  }
  write_report(args.out, "analyze", config_digest(cfg), 0, watch.seconds(), std::move(payload),
               csv.str());
  std::cout << "analyze intra: " << rows.size() << " grid points, "
            << (best ? "optimum " + format_double(best->throughput) + " tok/s"
                     : std::string("no feasible point"))
            << ", report " << args.out << ".json\n";
  return kExitOk;
}

int analyze_inter(const AnalyzeArgs& args, const SystemConfig& cfg, const Stopwatch& watch) {
  if (!cfg.hardware.storage_local_bandwidth || !cfg.hardware.storage_remote_bandwidth) {
    throw ConfigError("analyze --mode inter requires the storage bandwidths");
  }
  int b_max = static_cast<int>((cfg.hardware.gpu_mem - cfg.model.weights_bytes) /
                               cfg.kv_full_bytes);
  if (b_max < 1) throw ConfigError("analyze inter: no memory slot fits a full KV cache");
  double gamma = expected_gamma(cfg.acceptance, cfg.draft_length, cfg.compression_ratio);
  double tok = t_tok(cfg.model.weights_bytes, b_max, cfg.kv_full_bytes,
                     cfg.hardware.hbm_bandwidth);
  PathParams params = PathParams::with_uniform_t_tok(
      cfg.output_tokens, cfg.draft_length, gamma, cfg.compression_ratio, cfg.kv_full_bytes,
      *cfg.hardware.storage_local_bandwidth, *cfg.hardware.storage_remote_bandwidth, tok);
  PoolCapacities caps{cfg.hardware.local_gpus, cfg.hardware.remote_gpus, b_max};

  LPSolution sol;
  if (args.fixed_point) {
    sol = optimize_inter_fixed_point(params, caps, cfg.model.weights_bytes,
                                     cfg.hardware.hbm_bandwidth);
  } else {
    std::array<PathCost, 6> costs;
    for (std::size_t i = 0; i < kAllPaths.size(); ++i) costs[i] = path_costs(kAllPaths[i], params);
    sol = optimize_inter(costs, caps, cfg.output_tokens);
  }

  std::ostringstream csv;
  csv << "path,rate_req_s\n";
  json rates;
  for (const auto& [path, rate] : sol.rates) {
    csv << to_string(path) << ',' << format_double(rate) << "\n";
    rates[std::string(to_string(path))] = rate;
  }
  json payload;
  payload["mode"] = "inter";
  payload["throughput_tok_s"] = sol.throughput;
  payload["rates"] = std::move(rates);
  payload["binding_constraints"] = sol.binding;
  payload["b_max"] = b_max;
  payload["t_tok_s"] = tok;
  payload["gamma"] = gamma;
  write_report(args.out, "analyze", config_digest(cfg), 0, watch.seconds(), std::move(payload),
               csv.str());
  std::cout << "analyze inter: throughput " << format_double(sol.throughput)
            << " tok/s, report " << args.out << ".json\n";
  return kExitOk;
}

int analyze_compose(const AnalyzeArgs& args, const SystemConfig& cfg, const Stopwatch& watch) {
  if (args.max_de < 1) throw ConfigError("--max-de must be >= 1");
  if (!(args.gamma_e_per_token >= 0.0 && args.gamma_e_per_token <= 1.0)) {
    throw ConfigError("--gamma-e must be in [0,1]");
  }
  const int x = cfg.draft_length;
  const double c = cfg.compression_ratio;
  AcceptanceModel aux;
  aux.kind = AcceptanceModel::Kind::PerTokenIid;
  aux.per_token_prob[1.0] = 1.0;
  aux.per_token_prob[c] = args.gamma_e_per_token;
  auto gamma_e = [&](int d_e) { return expected_gamma(aux, d_e, c); };

  std::ostringstream csv;
  csv << "d_e,gamma,gamma_e,accept_length,plain_accept_length\n";
  json rows = json::array();
  double gamma = expected_gamma(cfg.acceptance, x, c);
  for (int d_e = 1; d_e <= args.max_de; ++d_e) {
    double len = composed_accept_length(x, c, d_e, cfg.acceptance, gamma_e);
    double ge = d_e == 1 ? 0.0 : gamma_e(d_e);
    csv << d_e << ',' << format_double(gamma) << ',' << format_double(ge) << ','
        << format_double(len) << ',' << format_double(gamma * x) << "\n";
    rows.push_back({{"d_e", d_e}, {"accept_length", len}});
  }
  json payload;
  payload["mode"] = "compose";
  payload["x"] = x;
  payload["c"] = c;
  payload["rows"] = std::move(rows);
  write_report(args.out, "analyze", config_digest(cfg), 0, watch.seconds(), std::move(payload),
               csv.str());
  std::cout << "analyze compose: d_e 1.." << args.max_de << ", report " << args.out << ".json\n";
  return kExitOk;
}

}  // namespace

int cmd_analyze(const AnalyzeArgs& args) {
  return guard([&] {
    Stopwatch watch;
    SystemConfig cfg = load_config_file(args.config_path);
    if (args.mode == "intra") return analyze_intra(args, cfg, watch);
    if (args.mode == "inter") return analyze_inter(args, cfg, watch);
    if (args.mode == "compose") return analyze_compose(args, cfg, watch);
    throw ConfigError("--mode must be one of {intra, inter, compose}");
  });
}

namespace {

struct VarySpec {
  std::string key;              // dotted config path
  std::vector<std::string> values;
};

VarySpec parse_vary(const std::string& text) {
  auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= text.size()) {
    throw ConfigError("--vary expects key=v1,v2,... got '" + text + "'");
  }
  VarySpec spec;
  spec.key = text.substr(0, eq);
  std::istringstream in(text.substr(eq + 1));
  std::string item;
  while (std::getline(in, item, ',')) spec.values.push_back(item);
  if (spec.values.empty()) throw ConfigError("--vary has no values: '" + text + "'");
  return spec;
}

json* resolve_key(json& doc, const std::string& dotted) {
  json* node = &doc;
  std::istringstream in(dotted);
  std::string part;
  while (std::getline(in, part, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
  }
  return node;
}

void assign_value(json& slot, const std::string& text) {
  // keep the original JSON type where possible
  if (slot.is_string()) {
    slot = text;
    return;
  }
  if (slot.is_boolean()) {
    slot = (text == "true");
    return;
  }
  try {
    std::size_t pos = 0;
    double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    if (slot.is_number_integer() && std::floor(v) == v && std::abs(v) < 9.2e18) {
      slot = static_cast<std::int64_t>(v);
    } else {
      slot = v;
    }
  } catch (const std::exception&) {
    throw ConfigError("--vary value '" + text + "' is not a number");
  }
}

}  // namespace

int cmd_sweep(const SweepArgs& args) {
  return guard([&] {
    Stopwatch watch;
    std::ifstream in(args.config_path);
    if (!in) throw ConfigError("cannot open config file: " + args.config_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    json base_doc;
    try {
      base_doc = json::parse(buf.str());
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    SystemConfig base_cfg = load_config(buf.str());
    std::vector<Request> workload = load_trace_file(args.trace_path);

    std::vector<VarySpec> specs;
    for (const std::string& v : args.vary) {
      VarySpec spec = parse_vary(v);
      if (!resolve_key(base_doc, spec.key)) {
        throw ConfigError("unknown config key in --vary: '" + spec.key + "'");
      }
      specs.push_back(std::move(spec));
    }

    std::ostringstream csv;
    for (const VarySpec& s : specs) csv << s.key << ',';
    csv << SimMetrics::csv_header() << "\n";
    json payload = json::array();

    std::vector<std::size_t> index(specs.size(), 0);
    bool done = false;
    while (!done) {
      json doc = base_doc;
      for (std::size_t i = 0; i < specs.size(); ++i) {
        json* slot = resolve_key(doc, specs[i].key);
        assign_value(*slot, specs[i].values[index[i]]);
      }
      SystemConfig cfg = load_config(doc.dump());
      SimMetrics m = simulate(cfg, workload, schedule_from_string(args.schedule), args.seed);

      for (std::size_t i = 0; i < specs.size(); ++i) csv << specs[i].values[index[i]] << ',';
      csv << m.csv_row(static_cast<int>(workload.size()), cfg.draft_length,
                       cfg.compression_ratio)
          << "\n";
      json row;
      for (std::size_t i = 0; i < specs.size(); ++i) row[specs[i].key] = specs[i].values[index[i]];
      row["metrics"] = metrics_to_json(m);
      payload.push_back(std::move(row));

      // odometer over the cross product
      done = true;
      for (std::size_t i = specs.size(); i-- > 0;) {
        if (++index[i] < specs[i].values.size()) {
          done = false;
          break;
        }
        index[i] = 0;
      }
      if (specs.empty()) break;
    }

    write_report(args.out, "sweep", config_digest(base_cfg), args.seed, watch.seconds(),
                 std::move(payload), csv.str());
    std::cout << "sweep: " << (payload.empty() ? 1 : payload.size()) << " point(s), report "
              << args.out << ".json\n";
    return kExitOk;
  });
}

int cmd_kl_demo(const KlDemoArgs& args) {
  return guard([&] {
    Stopwatch watch;
    if (args.vocab < 2) throw ConfigError("--vocab must be >= 2");
    if (args.T < 1) throw ConfigError("--T must be >= 1");
    if (std::pow(static_cast<double>(args.vocab), args.T) > kEnumerationGuard) {
      throw ConfigError("enumeration guard exceeded: vocab^T > 1e6");
    }
    if (args.perturbation < 0.0 || args.perturbation >= 1.0) {
      throw ConfigError("--perturbation must be in [0,1)");
    }

    ToyAutoregressiveModel full = random_toy_model(args.vocab, args.seed);
    ToyAutoregressiveModel lossy = perturb_toy_model(full, args.perturbation);

    std::ostringstream csv;
    csv << "t,kl_direct_nats,kl_chain_nats\n";
    json rows = json::array();
    for (int t = 1; t <= args.T; ++t) {
      KlValue direct = sequence_kl_direct(full, lossy, t);
      KlValue chain = sequence_kl_chain(full, lossy, t);
      if (direct.is_infinite || chain.is_infinite) {
        throw std::runtime_error("kl-demo: infinite KL from a perturbed model");
      }
      if (std::abs(direct.nats - chain.nats) > 1e-10) {
        throw std::runtime_error("kl-demo: direct and chain-rule KL disagree beyond 1e-10");
      }
      csv << t << ',' << format_double(direct.nats) << ',' << format_double(chain.nats) << "\n";
      rows.push_back({{"t", t}, {"kl_direct_nats", direct.nats}, {"kl_chain_nats", chain.nats}});
    }

    json payload;
    payload["vocab"] = args.vocab;
    payload["T"] = args.T;
    payload["perturbation"] = args.perturbation;
    payload["rows"] = std::move(rows);
    json digest_src = {{"vocab", args.vocab},
                       {"T", args.T},
                       {"perturbation", args.perturbation},
                       {"seed", args.seed}};
    write_report(args.out, "kl-demo", args_digest(digest_src), args.seed, watch.seconds(),
                 std::move(payload), csv.str());
    std::cout << "kl-demo: vocab " << args.vocab << ", T " << args.T << ", report " << args.out
              << ".json\n";
    return kExitOk;
  });
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Desk-scale simulator and analyzer for speculative serving with compressed-KV "
               "drafting"};
  app.require_subcommand(1);

  SimulateArgs sim_args;
  CLI::App* sim = app.add_subcommand("simulate", "Run one pipeline simulation");
  sim->add_option("--config", sim_args.config_path, "Config JSON path")->required();
  sim->add_option("--trace", sim_args.trace_path, "Workload trace CSV path")->required();
  sim->add_option("--schedule", sim_args.schedule,
                  "staggered|lockstep|sequential-verify|full-kv-baseline|compare");
  sim->add_option("--seed", sim_args.seed, "Acceptance draw seed");
  sim->add_option("--out", sim_args.out, "Output path prefix");

  AnalyzeArgs an_args;
  CLI::App* an = app.add_subcommand("analyze", "Closed-form throughput analysis");
  an->add_option("--config", an_args.config_path, "Config JSON path")->required();
  an->add_option("--mode", an_args.mode, "intra|inter|compose")->required();
  an->add_flag("--fixed-point", an_args.fixed_point, "Occupancy fixed-point loop (inter)");
  an->add_option("--max-de", an_args.max_de, "Largest auxiliary depth (compose)");
  an->add_option("--gamma-e", an_args.gamma_e_per_token,
                 "Auxiliary drafter per-token acceptance (compose)");
  an->add_option("--out", an_args.out, "Output path prefix");

  SweepArgs sw_args;
  CLI::App* sw = app.add_subcommand("sweep", "Cross-product parameter sweep");
  sw->add_option("--config", sw_args.config_path, "Config JSON path")->required();
  sw->add_option("--trace", sw_args.trace_path, "Workload trace CSV path")->required();
  sw->add_option("--vary", sw_args.vary, "key=v1,v2,... (repeatable)");
  sw->add_option("--schedule", sw_args.schedule, "Schedule for each point");
  sw->add_option("--seed", sw_args.seed, "Acceptance draw seed");
  sw->add_option("--out", sw_args.out, "Output path prefix");

  KlDemoArgs kl_args;
  CLI::App* kl = app.add_subcommand("kl-demo", "Sequence-KL growth on toy models");
  kl->add_option("--vocab", kl_args.vocab, "Vocabulary size");
  kl->add_option("--T", kl_args.T, "Sequence length");
  kl->add_option("--perturbation", kl_args.perturbation, "Conditional perturbation in [0,1)");
  kl->add_option("--seed", kl_args.seed, "Model seed");
  kl->add_option("--out", kl_args.out, "Output path prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  if (sim->parsed()) return cmd_simulate(sim_args);
  if (an->parsed()) return cmd_analyze(an_args);
  if (sw->parsed()) return cmd_sweep(sw_args);
  if (kl->parsed()) return cmd_kl_demo(kl_args);
  return kExitUsage;
}

}  // namespace speckv::cli
