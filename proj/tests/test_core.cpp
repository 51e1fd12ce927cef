#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "speckv/config.hpp"
#include "speckv/core.hpp"
#include "speckv/util.hpp"

using namespace speckv;

namespace {

std::string minimal_config(double c = 0.25, int x = 25) {
  return R"({
    "hardware": {"hbm_bandwidth": 1.6e12, "interconnect_bandwidth": 5e10,
                 "gpu_mem": 96e9, "local_gpus": 1, "remote_gpus": 0},
    "model": {"weights_bytes": 50e9, "kv_bytes_per_token": 40960},
    "acceptance": {"kind": "per-token-iid", "per_token_prob": {")" +
         format_double(c) + R"(": 0.99}},
    "runtime": {"draft_length": )" +
         std::to_string(x) + R"(, "lookahead_window": 64,
                "iteration_time_mode": "derived", "batch_size": 10,
                "kv_full_bytes": 4e9, "compression_ratio": )" +
         format_double(c) + R"(, "output_tokens": 200},
    "scenario": {"kind": "long-context"}
  })";
}

}  // namespace

TEST_CASE("load_config round-trips the declared fields") {
  SystemConfig cfg = load_config(minimal_config(0.25, 25));
  CHECK(cfg.compression_ratio == 0.25);
  CHECK(cfg.draft_length == 25);
  CHECK(cfg.hardware.gpu_mem == 96000000000);
  CHECK(cfg.model.kv_bytes_per_token == 40960);
  CHECK(cfg.scenario == Scenario::LongContext);
}

TEST_CASE("load_config rejects compression_ratio out of range") {
  std::string doc = minimal_config();
  auto pos = doc.find("\"compression_ratio\": 0.25");
  doc.replace(pos, std::string("\"compression_ratio\": 0.25").size(),
              "\"compression_ratio\": 1.3");
  CHECK_THROWS_WITH_AS(load_config(doc), "compression_ratio out of (0,1]", ConfigError);
}

TEST_CASE("load_config requires scenario bandwidth fields") {
  // remote-prefix without BW_h
  std::string doc = R"({
    "hardware": {"hbm_bandwidth": 1.6e12, "storage_remote_bandwidth": 1.2e9,
                 "gpu_mem": 96e9, "local_gpus": 1, "remote_gpus": 4},
    "model": {"weights_bytes": 50e9, "kv_bytes_per_token": 40960},
    "acceptance": {"kind": "per-token-iid", "per_token_prob": {"0.25": 0.99}},
    "runtime": {"draft_length": 25, "lookahead_window": 64,
                "iteration_time_mode": "derived", "batch_size": 10,
                "kv_full_bytes": 4e9, "compression_ratio": 0.25, "output_tokens": 200},
    "scenario": {"kind": "remote-prefix"}
  })";
  CHECK_THROWS_AS(load_config(doc), ConfigError);
}

TEST_CASE("load_config rejects malformed documents") {
  CHECK_THROWS_AS(load_config("{ not json"), ConfigError);
  CHECK_THROWS_AS(load_config("[]"), ConfigError);
}

TEST_CASE("fixed iteration mode needs iteration_time") {
  std::string doc = minimal_config();
  auto pos = doc.find("\"derived\"");
  doc.replace(pos, 9, "\"fixed\"");
  CHECK_THROWS_AS(load_config(doc), ConfigError);
}

TEST_CASE("config round-trip is exact for randomized valid configs") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    SystemConfig cfg;
    cfg.scenario = (rng() % 2 == 0) ? Scenario::LongContext : Scenario::RemotePrefix;
    cfg.hardware.hbm_bandwidth = 1e12 + static_cast<double>(rng() % 1000000) * 1e6;
    if (cfg.scenario == Scenario::LongContext) {
      cfg.hardware.interconnect_bandwidth = 1e10 + static_cast<double>(rng() % 999) * 1e8;
      cfg.hardware.local_gpus = 1;
    } else {
      cfg.hardware.storage_remote_bandwidth = 1e9 + static_cast<double>(rng() % 99) * 1e7;
      cfg.hardware.storage_local_bandwidth = *cfg.hardware.storage_remote_bandwidth * 10;
      cfg.hardware.local_gpus = 1 + static_cast<int>(rng() % 4);
      cfg.hardware.remote_gpus = 1 + static_cast<int>(rng() % 8);
    }
    cfg.hardware.gpu_mem = 64000000000 + static_cast<Bytes>(rng() % 1000) * 1000000;
    cfg.model.weights_bytes = 10000000000 + static_cast<Bytes>(rng() % 1000) * 1000000;
    cfg.model.kv_bytes_per_token = 1 + static_cast<Bytes>(rng() % 100000);
    if (rng() % 2 == 0) {
      cfg.acceptance.kind = AcceptanceModel::Kind::PerTokenIid;
      cfg.acceptance.per_token_prob[0.25] = 0.5 + 0.5 * static_cast<double>(rng() % 1000) / 1000.0;
      cfg.acceptance.per_token_prob[1.0] = 1.0;
    } else {
      cfg.acceptance.kind = AcceptanceModel::Kind::Tabulated;
      cfg.acceptance.table[0.25][10] = 0.9;
      cfg.acceptance.table[0.25][30] = 0.5 + 0.4 * static_cast<double>(rng() % 1000) / 1000.0;
    }
    cfg.draft_length = 1 + static_cast<int>(rng() % 64);
    cfg.lookahead_window = 2 + static_cast<int>(rng() % 100);
    cfg.iteration_time_mode = (rng() % 2 == 0) ? IterationTimeMode::Derived
                                               : IterationTimeMode::Fixed;
    if (cfg.iteration_time_mode == IterationTimeMode::Fixed) {
      cfg.iteration_time = 0.001 + static_cast<double>(rng() % 100) / 1000.0;
    }
    cfg.batch_size = 1 + static_cast<int>(rng() % 32);
    cfg.kv_full_bytes = 1000000 + static_cast<Bytes>(rng() % 1000000000);
    cfg.compression_ratio = 0.25;
    cfg.output_tokens = 1 + static_cast<std::int64_t>(rng() % 2048);
    cfg.verify_cached = rng() % 2 == 0;
    if (rng() % 3 == 0) {
      CompressorSpec comp;
      comp.kind = CompressorKind::DropWindow;
      comp.mode = CompressorMode::Online;
      comp.scenario = cfg.scenario;
      comp.ratio = 0.5;
      comp.per_iteration_overhead = 1e-4;
      cfg.compressor = comp;
    }
    cfg.validate();

    SystemConfig back = load_config(serialize_config(cfg));
    CHECK(back == cfg);
    CHECK(config_digest(back) == config_digest(cfg));
  }
}

TEST_CASE("config digest changes when a field changes") {
  SystemConfig a = load_config(minimal_config());
  SystemConfig b = a;
  b.draft_length += 1;
  CHECK(config_digest(a) != config_digest(b));
}

TEST_CASE("kv_full_bytes") {
  ModelSpec m{1000000000, 40960};
  CHECK(kv_full_bytes(m, 100000) == 4096000000LL);
  CHECK(kv_full_bytes(m, 0) == 0);
  ModelSpec tiny{1, 1};
  CHECK(kv_full_bytes(tiny, 7) == 7);
  CHECK_THROWS_AS(kv_full_bytes(m, -1), ContractError);
}

TEST_CASE("expected_gamma per-token-iid") {
  AcceptanceModel m;
  m.kind = AcceptanceModel::Kind::PerTokenIid;
  m.per_token_prob[0.25] = 0.99;
  m.per_token_prob[0.5] = 1.0;

  SUBCASE("perfect drafter") { CHECK(expected_gamma(m, 30, 0.5) == 1.0); }

  SUBCASE("brute-force sum oracle") {
    // oracle: direct summation of P(N >= k) = p^k
    double p = 0.99;
    double sum = 0.0, pk = 1.0;
    for (int k = 1; k <= 30; ++k) {
      pk *= p;
      sum += pk;
    }
    double expect = sum / 30.0;
    CHECK(expected_gamma(m, 30, 0.25) == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("non-increasing in x for p < 1") {
    double prev = 2.0;
    for (int x = 1; x <= 100; ++x) {
      double g = expected_gamma(m, x, 0.25);
      CHECK(g <= prev + 1e-15);
      prev = g;
    }
  }

  SUBCASE("c = 1 is the degenerate drafter") {
    for (int x : {1, 7, 64}) CHECK(expected_gamma(m, x, 1.0) == 1.0);
  }

  SUBCASE("unknown ratio is an error") {
    CHECK_THROWS_AS(expected_gamma(m, 10, 0.33), ConfigError);
  }
}

TEST_CASE("expected_gamma tabulated") {
  AcceptanceModel m;
  m.kind = AcceptanceModel::Kind::Tabulated;
  m.table[0.25][10] = 0.95;
  m.table[0.25][30] = 0.8;
  m.validate();

  CHECK(expected_gamma(m, 30, 0.25) == 0.8);   // exact entry
  CHECK(expected_gamma(m, 29, 0.25) == 0.8);   // nearest x
  CHECK(expected_gamma(m, 12, 0.25) == 0.95);
  CHECK(expected_gamma(m, 20, 0.25) == 0.95);  // tie resolves to smaller x
  CHECK(expected_gamma(m, 64, 0.25) == 0.8);
  CHECK_THROWS_AS(expected_gamma(m, 30, 0.5), ConfigError);  // no interpolation on c
}

TEST_CASE("tabulated gamma must be non-increasing in x") {
  AcceptanceModel m;
  m.kind = AcceptanceModel::Kind::Tabulated;
  m.table[0.25][10] = 0.5;
  m.table[0.25][30] = 0.8;
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("implied_per_token_prob inverts the truncated-geometric mean") {
  AcceptanceModel m;
  m.kind = AcceptanceModel::Kind::Tabulated;
  m.table[0.25][30] = 0.8;
  m.validate();
  double p = implied_per_token_prob(m, 30, 0.25);
  double sum = 0.0, pk = 1.0;
  for (int k = 1; k <= 30; ++k) {
    pk *= p;
    sum += pk;
  }
  CHECK(sum / 30.0 == doctest::Approx(0.8).epsilon(1e-9));
}

TEST_CASE("trace parsing") {
  SUBCASE("round trip") {
    std::string text =
        "arrival_s,kv_full_bytes,compression_ratio,output_tokens\n"
        "0,4000000000,0.25,200\n"
        "1.5,2000000000,0.5,64\n";
    auto reqs = parse_trace(text);
    REQUIRE(reqs.size() == 2);
    CHECK(reqs[0].id == 0);
    CHECK(reqs[0].kv_full_bytes == 4000000000LL);
    CHECK(reqs[1].arrival == 1.5);
    CHECK(reqs[1].output_tokens == 64);
    CHECK(serialize_trace(reqs) == text);
  }
  SUBCASE("header required") {
    CHECK_THROWS_AS(parse_trace("0,4000000000,0.25,200\n"), ConfigError);
    CHECK_THROWS_AS(parse_trace(""), ConfigError);
  }
  SUBCASE("bad field count and bad values") {
    CHECK_THROWS_AS(
        parse_trace("arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0,1,0.5\n"),
        ConfigError);
    CHECK_THROWS_AS(
        parse_trace("arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0,1,1.5,10\n"),
        ConfigError);
    CHECK_THROWS_AS(
        parse_trace("arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0,abc,0.5,10\n"),
        ConfigError);
  }
}

TEST_CASE("homogeneous workload") {
  auto reqs = homogeneous_workload(10, 4000000000LL, 0.25, 200);
  CHECK(reqs.size() == 10);
  for (const auto& r : reqs) {
    CHECK(r.arrival == 0.0);
    CHECK(r.kv_full_bytes == 4000000000LL);
  }
  CHECK(reqs[9].id == 9);
}
