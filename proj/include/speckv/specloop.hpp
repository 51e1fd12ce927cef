#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "speckv/core.hpp"

namespace speckv {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Deterministic next-token function over a finite vocabulary.
struct TokenOracle {
  std::function<Token(std::span<const Token>)> next;

  Token operator()(std::span<const Token> prefix) const { return next(prefix); }
};

// Outcome of one draft/verify/accept round.
struct SpecRoundResult {
  TokenSeq drafted;               // x tokens
  TokenSeq predictions;           // x+1 verifier outputs
  TokenSeq accepted;              // tokens actually emitted this round
  bool bonus_used = false;        // all x matched, bonus prediction appended
  std::optional<int> first_mismatch;  // 1-based position j, when one exists
};

struct SpecRunStats {
  std::vector<int> accepted_per_round;
  int rounds() const { return static_cast<int>(accepted_per_round.size()); }
};

// Autoregressively generate x candidate tokens from the drafter.
TokenSeq draft(const TokenOracle& drafter, std::span<const Token> prefix, int x);

// One parallel verification pass: prediction k is the verifier's next token
// given prefix ++ drafted[0..k-1), for k in [0, x]; the last entry is the
// bonus continuation after all drafted tokens.
TokenSeq verify(const TokenOracle& verifier, std::span<const Token> prefix,
                std::span<const Token> drafted);

// Greedy accept rule: keep drafted tokens up to the first mismatch, then the
// verifier's correction; if everything matches, keep all x plus the bonus.
SpecRoundResult accept(std::span<const Token> drafted, std::span<const Token> predictions);

// Full speculative loop: emits exactly K tokens, identical to running the
// verifier alone (the final round's surplus is truncated).
std::pair<TokenSeq, SpecRunStats> run_speculative(const TokenOracle& drafter,
                                                  const TokenOracle& verifier,
                                                  std::span<const Token> prompt,
                                                  std::int64_t output_tokens, int x);

// Plain autoregressive run of a single oracle; the reference the speculative
// loop must match token for token.
TokenSeq autoregress(const TokenOracle& oracle, std::span<const Token> prompt,
                     std::int64_t output_tokens);

// Small autoregressive distribution; conditionals are produced on demand so
// models stay enumerable without storing vocab^T vectors.
struct ToyAutoregressiveModel {
  int vocab_size = 2;
  std::function<std::vector<double>(std::span<const Token>)> conditional;

  // Returns the conditional and checks it sums to 1 within 1e-12.
  std::vector<double> distribution(std::span<const Token> prefix) const;
};

// KL value that keeps an infinite divergence (support violation) out of
// float aggregates.
struct KlValue {
  double nats = 0.0;
  bool is_infinite = false;

  static KlValue infinite() { return {0.0, true}; }
  static KlValue finite(double v) { return {v, false}; }
};

// Largest enumerable joint space, vocab_size^T.
inline constexpr double kEnumerationGuard = 1e6;

// KL(p_full(.|prefix) || p_lossy(.|prefix)) in nats.
KlValue per_step_kl(const ToyAutoregressiveModel& full, const ToyAutoregressiveModel& lossy,
                    std::span<const Token> prefix);

// Exact sequence-level KL by enumerating all length-T sequences.
KlValue sequence_kl_direct(const ToyAutoregressiveModel& full,
                           const ToyAutoregressiveModel& lossy, int T);

// Same quantity via the chain rule: sum_t E_{prefix~p_full}[KL_t].
KlValue sequence_kl_chain(const ToyAutoregressiveModel& full,
                          const ToyAutoregressiveModel& lossy, int T);

// Deterministic model/oracle constructors for tests and the kl-demo command.
ToyAutoregressiveModel random_toy_model(int vocab_size, std::uint64_t seed);
// Multiplies alternating entries of every conditional by (1 +/- delta) and
// renormalizes; delta=0 returns the model unchanged.
ToyAutoregressiveModel perturb_toy_model(const ToyAutoregressiveModel& base, double delta);
ToyAutoregressiveModel table_toy_model(int vocab_size,
                                       std::map<TokenSeq, std::vector<double>> conditionals);
// Greedy argmax oracle over a toy model (ties -> smallest token).
TokenOracle greedy_oracle(const ToyAutoregressiveModel& model);
// Deterministic pseudo-random next-token function, seeded per prefix.
TokenOracle random_table_oracle(int vocab_size, std::uint64_t seed);

}  // namespace speckv
