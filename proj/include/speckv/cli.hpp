#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace speckv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

struct SimulateArgs {
  std::string config_path;
  std::string trace_path;
  std::string schedule = "staggered";  // or "compare"
  std::uint64_t seed = 0;
  std::string out = "speckv_report";
};

struct AnalyzeArgs {
  std::string config_path;
  std::string mode;  // intra | inter | compose
  bool fixed_point = false;
  int max_de = 8;
  double gamma_e_per_token = 0.6;
  std::string out = "speckv_report";
};

struct SweepArgs {
  std::string config_path;
  std::string trace_path;
  std::vector<std::string> vary;  // key=v1,v2,...
  std::string schedule = "staggered";
  std::uint64_t seed = 0;
  std::string out = "speckv_report";
};

struct KlDemoArgs {
  int vocab = 2;
  int T = 6;
  double perturbation = 0.05;
  std::uint64_t seed = 0;
  std::string out = "speckv_report";
};

// Each command writes <out>.json (full report) and <out>.csv (tabular data)
// and prints a one-line summary to stdout. Returns a process exit code.
int cmd_simulate(const SimulateArgs& args);
int cmd_analyze(const AnalyzeArgs& args);
int cmd_sweep(const SweepArgs& args);
int cmd_kl_demo(const KlDemoArgs& args);

// Full argv dispatch for the binary.
int run(int argc, const char* const* argv);

}  // namespace speckv::cli
