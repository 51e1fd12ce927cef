#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "speckv/specloop.hpp"

using namespace speckv;

namespace {

TokenOracle constant_oracle(Token t) {
  TokenOracle o;
  o.next = [t](std::span<const Token>) { return t; };
  return o;
}

TokenOracle echo_last_oracle(Token fallback) {
  TokenOracle o;
  o.next = [fallback](std::span<const Token> prefix) {
    return prefix.empty() ? fallback : prefix.back();
  };
  return o;
}

}  // namespace

TEST_CASE("draft") {
  SUBCASE("constant oracle") {
    TokenSeq prompt = {1};
    CHECK(draft(constant_oracle(5), prompt, 3) == TokenSeq{5, 5, 5});
  }
  SUBCASE("echo-last oracle") {
    TokenSeq prompt = {7, 2};
    CHECK(draft(echo_last_oracle(0), prompt, 3) == TokenSeq{2, 2, 2});
  }
  SUBCASE("tabulated oracle follows the table walk") {
    // next-token table over vocab {0,1}: emit 1 unless the prefix ends in 1
    TokenOracle o;
    o.next = [](std::span<const Token> prefix) {
      return Token(prefix.empty() || prefix.back() != 1 ? 1 : 0);
    };
    TokenSeq prompt = {0};
    // hand trace: 0 -> 1, 01 -> 0, 010 -> 1, 0101 -> 0
    CHECK(draft(o, prompt, 4) == TokenSeq{1, 0, 1, 0});
  }
  SUBCASE("x must be positive") {
    TokenSeq prompt;
    CHECK_THROWS_AS(draft(constant_oracle(0), prompt, 0), ContractError);
  }
}

TEST_CASE("verify") {
  TokenSeq prompt = {3};
  SUBCASE("identical oracles reproduce the draft") {
    auto o = echo_last_oracle(0);
    TokenSeq drafted = draft(o, prompt, 4);
    TokenSeq preds = verify(o, prompt, drafted);
    REQUIRE(preds.size() == 5);
    for (int k = 0; k < 4; ++k) CHECK(preds[k] == drafted[k]);
  }
  SUBCASE("disagreement only at position 2") {
    // drafter emits 1,1,1; verifier emits 2 exactly when the prefix has
    // length 2, else mirrors the drafter
    TokenOracle verifier;
    verifier.next = [](std::span<const Token> prefix) {
      return Token(prefix.size() == 2 ? 2 : 1);
    };
    TokenSeq drafted = {1, 1, 1};
    TokenSeq preds = verify(verifier, TokenSeq{9}, drafted);
    CHECK(preds[0] == 1);
    CHECK(preds[1] == 2);  // index 2, 1-based
    CHECK(preds[2] == 1);
  }
  SUBCASE("x = 1 yields two predictions") {
    TokenSeq drafted = {5};
    CHECK(verify(constant_oracle(5), prompt, drafted).size() == 2);
  }
  SUBCASE("drafted must be non-empty") {
    TokenSeq drafted;
    CHECK_THROWS_AS(verify(constant_oracle(5), prompt, drafted), ContractError);
  }
}

TEST_CASE("accept") {
  SUBCASE("full match keeps the bonus") {
    TokenSeq drafted = {1, 2, 3};
    TokenSeq preds = {1, 2, 3, 9};
    auto res = accept(drafted, preds);
    CHECK(res.accepted == TokenSeq{1, 2, 3, 9});
    CHECK(res.bonus_used);
    CHECK(!res.first_mismatch.has_value());
  }
  SUBCASE("first mismatch truncates and corrects") {
    TokenSeq drafted = {1, 2, 3};
    TokenSeq preds = {1, 7, 3, 9};
    auto res = accept(drafted, preds);
    CHECK(res.accepted == TokenSeq{1, 7});
    CHECK(res.first_mismatch == 2);
    CHECK(!res.bonus_used);
  }
  SUBCASE("immediate mismatch keeps only the correction") {
    TokenSeq drafted = {4};
    TokenSeq preds = {5, 6};
    auto res = accept(drafted, preds);
    CHECK(res.accepted == TokenSeq{5});
    CHECK(res.first_mismatch == 1);
  }
  SUBCASE("length contract") {
    TokenSeq drafted = {1, 2};
    TokenSeq preds = {1, 2};
    CHECK_THROWS_AS(accept(drafted, preds), ContractError);
  }
}

TEST_CASE("run_speculative is lossless") {
  SUBCASE("drafter == verifier accepts x+1 every round") {
    auto o = echo_last_oracle(3);
    TokenSeq prompt = {3};
    auto [out, stats] = run_speculative(o, o, prompt, 10, 4);
    CHECK(out == autoregress(o, prompt, 10));
    for (int n : stats.accepted_per_round) CHECK(n == 5);
  }
  SUBCASE("adversarial drafter still lossless, one token per round") {
    TokenOracle drafter;
    drafter.next = [](std::span<const Token>) { return Token(0); };
    TokenOracle verifier;
    verifier.next = [](std::span<const Token>) { return Token(1); };
    TokenSeq prompt = {0};
    auto [out, stats] = run_speculative(drafter, verifier, prompt, 12, 4);
    CHECK(out == autoregress(verifier, prompt, 12));
    CHECK(stats.rounds() == 12);
    for (int n : stats.accepted_per_round) CHECK(n == 1);
  }
  SUBCASE("random tabulated oracle pairs, vocab 4") {
    for (std::uint64_t seed = 0; seed < 32; ++seed) {
      TokenOracle drafter = random_table_oracle(4, seed * 2 + 1);
      TokenOracle verifier = random_table_oracle(4, seed * 2 + 2);
      TokenSeq prompt = {0, 1};
      auto [out, stats] = run_speculative(drafter, verifier, prompt, 32, 5);
      CHECK(out == autoregress(verifier, prompt, 32));
      CHECK(static_cast<std::int64_t>(out.size()) == 32);
      // progress: at least one token per round, so at most K rounds
      CHECK(stats.rounds() <= 32);
      for (int n : stats.accepted_per_round) CHECK(n >= 1);
    }
  }
}

TEST_CASE("per_step_kl") {
  SUBCASE("identical models give zero") {
    auto m = random_toy_model(4, 11);
    TokenSeq prefix = {1, 2};
    KlValue kl = per_step_kl(m, m, prefix);
    CHECK(!kl.is_infinite);
    CHECK(kl.nats == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("hand-evaluated two-point distributions") {
    auto full = table_toy_model(2, {{{}, {0.5, 0.5}}});
    auto lossy = table_toy_model(2, {{{}, {0.9, 0.1}}});
    KlValue kl = per_step_kl(full, lossy, TokenSeq{});
    double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(kl.nats == doctest::Approx(expect).epsilon(1e-12));
    CHECK(kl.nats == doctest::Approx(0.5108256238).epsilon(1e-9));
  }
  SUBCASE("deterministic vs uniform is ln 2") {
    auto full = table_toy_model(2, {{{}, {1.0, 0.0}}});
    auto lossy = table_toy_model(2, {{{}, {0.5, 0.5}}});
    KlValue kl = per_step_kl(full, lossy, TokenSeq{});
    CHECK(kl.nats == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("support violation is the infinite signal") {
    auto full = table_toy_model(2, {{{}, {0.5, 0.5}}});
    auto lossy = table_toy_model(2, {{{}, {1.0, 0.0}}});
    CHECK(per_step_kl(full, lossy, TokenSeq{}).is_infinite);
  }
}

TEST_CASE("sequence KL") {
  SUBCASE("identical models give zero for all T") {
    auto m = random_toy_model(3, 5);
    for (int T = 1; T <= 4; ++T) {
      CHECK(sequence_kl_direct(m, m, T).nats == doctest::Approx(0.0).epsilon(1e-10));
      CHECK(sequence_kl_chain(m, m, T).nats == doctest::Approx(0.0).epsilon(1e-10));
    }
  }
  SUBCASE("T = 1 equals the per-step KL on the empty prefix") {
    auto full = random_toy_model(2, 21);
    auto lossy = random_toy_model(2, 22);
    double direct = sequence_kl_direct(full, lossy, 1).nats;
    double step = per_step_kl(full, lossy, TokenSeq{}).nats;
    CHECK(direct == doctest::Approx(step).epsilon(1e-12));
  }
  SUBCASE("direct equals chain on random model pairs") {
    std::mt19937_64 rng(99);
    for (int i = 0; i < 25; ++i) {
      int vocab = 2 + static_cast<int>(rng() % 3);
      int T = 1 + static_cast<int>(rng() % 4);
      auto full = random_toy_model(vocab, rng());
      auto lossy = random_toy_model(vocab, rng());
      KlValue d = sequence_kl_direct(full, lossy, T);
      KlValue c = sequence_kl_chain(full, lossy, T);
      REQUIRE(!d.is_infinite);
      REQUIRE(!c.is_infinite);
      CHECK(std::abs(d.nats - c.nats) <= 1e-10);
      CHECK(d.nats >= -1e-12);
    }
  }
  SUBCASE("chain KL is non-decreasing in T") {
    auto full = random_toy_model(3, 31);
    auto lossy = perturb_toy_model(full, 0.2);
    double prev = 0.0;
    for (int T = 1; T <= 5; ++T) {
      double v = sequence_kl_chain(full, lossy, T).nats;
      CHECK(v >= prev - 1e-12);
      prev = v;
    }
  }
  SUBCASE("epsilon-perturbed conditionals grow at least linearly") {
    auto full = random_toy_model(3, 41);
    auto lossy = perturb_toy_model(full, 0.3);
    const int T = 5;
    // epsilon: the smallest per-step KL over every reachable prefix
    double eps = std::numeric_limits<double>::infinity();
    std::function<void(TokenSeq&, int)> walk = [&](TokenSeq& prefix, int depth) {
      eps = std::min(eps, per_step_kl(full, lossy, prefix).nats);
      if (depth == 0) return;
      for (Token t = 0; t < 3; ++t) {
        prefix.push_back(t);
        walk(prefix, depth - 1);
        prefix.pop_back();
      }
    };
    TokenSeq prefix;
    walk(prefix, T - 1);
    CHECK(eps > 0.0);
    for (int t = 1; t <= T; ++t) {
      CHECK(sequence_kl_chain(full, lossy, t).nats >= eps * t - 1e-12);
    }
  }
  SUBCASE("enumeration guard") {
    auto full = random_toy_model(10, 1);
    auto lossy = random_toy_model(10, 2);
    CHECK_THROWS_AS(sequence_kl_direct(full, lossy, 7), ContractError);
    CHECK_THROWS_AS(sequence_kl_chain(full, lossy, 7), ContractError);
  }
  SUBCASE("support violation propagates as the infinite signal") {
    auto full = table_toy_model(
        2, {{{}, {0.6, 0.4}}, {{0}, {0.5, 0.5}}, {{1}, {0.5, 0.5}}});
    auto lossy = table_toy_model(
        2, {{{}, {1.0, 0.0}}, {{0}, {0.5, 0.5}}, {{1}, {0.5, 0.5}}});
    CHECK(sequence_kl_direct(full, lossy, 2).is_infinite);
    CHECK(sequence_kl_chain(full, lossy, 2).is_infinite);
  }
}

TEST_CASE("toy model invariants") {
  SUBCASE("conditionals sum to one") {
    auto m = random_toy_model(5, 77);
    TokenSeq prefix = {0, 3, 1};
    auto dist = m.distribution(prefix);
    double sum = 0.0;
    for (double p : dist) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  SUBCASE("bad conditionals are rejected") {
    auto bad = table_toy_model(2, {{{}, {0.7, 0.4}}});
    TokenSeq prefix;
    CHECK_THROWS_AS(bad.distribution(prefix), ContractError);
  }
  SUBCASE("perturbation of zero is the identity") {
    auto m = random_toy_model(4, 13);
    auto same = perturb_toy_model(m, 0.0);
    TokenSeq prefix = {2};
    auto a = m.distribution(prefix);
    auto b = same.distribution(prefix);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));
  }
}
