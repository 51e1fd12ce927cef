#include "speckv/specloop.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "speckv/util.hpp"

namespace speckv {

TokenSeq draft(const TokenOracle& drafter, std::span<const Token> prefix, int x) {
  if (x < 1) throw ContractError("draft: x must be >= 1");
  TokenSeq ctx(prefix.begin(), prefix.end());
  TokenSeq out;
  out.reserve(x);
  for (int i = 0; i < x; ++i) {
    Token t = drafter(ctx);
    out.push_back(t);
    ctx.push_back(t);
  }
  return out;
}

TokenSeq verify(const TokenOracle& verifier, std::span<const Token> prefix,
                std::span<const Token> drafted) {
  if (drafted.empty()) throw ContractError("verify: drafted must be non-empty");
  TokenSeq ctx(prefix.begin(), prefix.end());
  TokenSeq predictions;
  predictions.reserve(drafted.size() + 1);
  for (std::size_t k = 0; k <= drafted.size(); ++k) {
    predictions.push_back(verifier(ctx));
    if (k < drafted.size()) ctx.push_back(drafted[k]);
  }
  return predictions;
}

SpecRoundResult accept(std::span<const Token> drafted, std::span<const Token> predictions) {
  if (predictions.size() != drafted.size() + 1) {
    throw ContractError("accept: |predictions| must equal |drafted| + 1");
  }
  SpecRoundResult res;
  res.drafted.assign(drafted.begin(), drafted.end());
  res.predictions.assign(predictions.begin(), predictions.end());
  for (std::size_t k = 0; k < drafted.size(); ++k) {
    if (drafted[k] != predictions[k]) {
      res.first_mismatch = static_cast<int>(k) + 1;
      res.accepted.assign(drafted.begin(), drafted.begin() + k);
      res.accepted.push_back(predictions[k]);
      return res;
    }
  }
  res.bonus_used = true;
  res.accepted.assign(drafted.begin(), drafted.end());
  res.accepted.push_back(predictions.back());
  return res;
}

std::pair<TokenSeq, SpecRunStats> run_speculative(const TokenOracle& drafter,
                                                  const TokenOracle& verifier,
                                                  std::span<const Token> prompt,
                                                  std::int64_t output_tokens, int x) {
  if (output_tokens < 1) throw ContractError("run_speculative: K must be >= 1");
  if (x < 1) throw ContractError("run_speculative: x must be >= 1");
  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq output;
  SpecRunStats stats;
  while (static_cast<std::int64_t>(output.size()) < output_tokens) {
    TokenSeq drafted = draft(drafter, ctx, x);
    TokenSeq predictions = verify(verifier, ctx, drafted);
    SpecRoundResult round = accept(drafted, predictions);
    stats.accepted_per_round.push_back(static_cast<int>(round.accepted.size()));
    for (Token t : round.accepted) {
      output.push_back(t);
      ctx.push_back(t);
    }
  }
  output.resize(output_tokens);  // final round may overshoot K
  return {std::move(output), std::move(stats)};
}

TokenSeq autoregress(const TokenOracle& oracle, std::span<const Token> prompt,
                     std::int64_t output_tokens) {
  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq out;
  out.reserve(output_tokens);
  for (std::int64_t i = 0; i < output_tokens; ++i) {
    Token t = oracle(ctx);
    out.push_back(t);
    ctx.push_back(t);
  }
  return out;
}

std::vector<double> ToyAutoregressiveModel::distribution(std::span<const Token> prefix) const {
  std::vector<double> dist = conditional(prefix);
  if (static_cast<int>(dist.size()) != vocab_size) {
    throw ContractError("toy model conditional has wrong vocabulary size");
  }
  double sum = 0.0;
  for (double p : dist) {
    if (p < 0.0) throw ContractError("toy model conditional has a negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw ContractError("toy model conditional does not sum to 1 within 1e-12");
  }
  return dist;
}

KlValue per_step_kl(const ToyAutoregressiveModel& full, const ToyAutoregressiveModel& lossy,
                    std::span<const Token> prefix) {
  auto p = full.distribution(prefix);
  auto q = lossy.distribution(prefix);
  if (p.size() != q.size()) throw ContractError("per_step_kl: vocabulary mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return KlValue::infinite();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return KlValue::finite(std::max(kl, 0.0));
}

namespace {

void check_enumeration_guard(int vocab_size, int T) {
  if (vocab_size < 2) throw ContractError("toy model vocab_size must be >= 2");
  if (T < 1) throw ContractError("sequence KL: T must be >= 1");
  if (std::pow(static_cast<double>(vocab_size), T) > kEnumerationGuard) {
    throw ContractError("enumeration guard exceeded: vocab_size^T > 1e6");
  }
}

// Walks every prefix of length `depth`, carrying the joint probabilities
// under both models, and calls visit(prefix, p_joint, q_joint).
template <typename Visit>
bool walk_prefixes(const ToyAutoregressiveModel& full, const ToyAutoregressiveModel& lossy,
                   int depth, TokenSeq& prefix, double p_joint, double q_joint, Visit&& visit) {
  if (static_cast<int>(prefix.size()) == depth) {
    return visit(prefix, p_joint, q_joint);
  }
  auto p = full.distribution(prefix);
  auto q = lossy.distribution(prefix);
  for (Token t = 0; t < full.vocab_size; ++t) {
    if (p[t] == 0.0) continue;  // zero-probability subtree contributes nothing
    prefix.push_back(t);
    bool ok = walk_prefixes(full, lossy, depth, prefix, p_joint * p[t], q_joint * q[t], visit);
    prefix.pop_back();
    if (!ok) return false;
  }
  return true;
}

}  // namespace

KlValue sequence_kl_direct(const ToyAutoregressiveModel& full,
                           const ToyAutoregressiveModel& lossy, int T) {
  check_enumeration_guard(full.vocab_size, T);
  double kl = 0.0;
  TokenSeq prefix;
  bool finite = walk_prefixes(full, lossy, T, prefix, 1.0, 1.0,
                              [&](const TokenSeq&, double p, double q) {
                                if (q == 0.0) return false;
                                kl += p * std::log(p / q);
                                return true;
                              });
  if (!finite) return KlValue::infinite();
  return KlValue::finite(std::max(kl, 0.0));
}

KlValue sequence_kl_chain(const ToyAutoregressiveModel& full,
                          const ToyAutoregressiveModel& lossy, int T) {
  check_enumeration_guard(full.vocab_size, T);
  double total = 0.0;
  TokenSeq prefix;
  for (int t = 0; t < T; ++t) {
    bool finite = walk_prefixes(full, lossy, t, prefix, 1.0, 1.0,
                                [&](const TokenSeq& pfx, double p, double) {
                                  KlValue step = per_step_kl(full, lossy, pfx);
                                  if (step.is_infinite) return false;
                                  total += p * step.nats;
                                  return true;
                                });
    if (!finite) return KlValue::infinite();
  }
  return KlValue::finite(std::max(total, 0.0));
}

namespace {

std::uint64_t prefix_seed(std::span<const Token> prefix, std::uint64_t seed) {
  std::uint64_t h = splitmix64(seed ^ 0x9e3779b97f4a7c15ull);
  for (Token t : prefix) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 1));
  return h;
}

}  // namespace

ToyAutoregressiveModel random_toy_model(int vocab_size, std::uint64_t seed) {
  if (vocab_size < 2) throw ContractError("random_toy_model: vocab_size must be >= 2");
  ToyAutoregressiveModel m;
  m.vocab_size = vocab_size;
  m.conditional = [vocab_size, seed](std::span<const Token> prefix) {
    std::mt19937_64 rng(prefix_seed(prefix, seed));
    std::vector<double> dist(vocab_size);
    double sum = 0.0;
    for (double& p : dist) {
      // exp(1)-distributed weights normalize to a Dirichlet(1) sample
      p = -std::log(1.0 - uniform_double(rng));
      sum += p;
    }
    for (double& p : dist) p /= sum;
    // renormalize exactly so the 1e-12 sum invariant holds
    double total = 0.0;
    for (double p : dist) total += p;
    for (double& p : dist) p /= total;
    return dist;
  };
  return m;
}

ToyAutoregressiveModel perturb_toy_model(const ToyAutoregressiveModel& base, double delta) {
  if (delta < 0.0 || delta >= 1.0) throw ContractError("perturb_toy_model: delta out of [0,1)");
  ToyAutoregressiveModel m;
  m.vocab_size = base.vocab_size;
  auto inner = base.conditional;
  int vocab = base.vocab_size;
  m.conditional = [inner, delta, vocab](std::span<const Token> prefix) {
    std::vector<double> dist = inner(prefix);
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) {
      dist[i] *= (i % 2 == 0) ? (1.0 + delta) : (1.0 - delta);
      sum += dist[i];
    }
    for (double& p : dist) p /= sum;
    double total = 0.0;
    for (double p : dist) total += p;
    for (double& p : dist) p /= total;
    return dist;
  };
  return m;
}

ToyAutoregressiveModel table_toy_model(int vocab_size,
                                       std::map<TokenSeq, std::vector<double>> conditionals) {
  ToyAutoregressiveModel m;
  m.vocab_size = vocab_size;
  m.conditional = [table = std::move(conditionals)](std::span<const Token> prefix) {
    auto it = table.find(TokenSeq(prefix.begin(), prefix.end()));
    if (it == table.end()) throw ContractError("table_toy_model: no conditional for prefix");
    return it->second;
  };
  return m;
}

TokenOracle greedy_oracle(const ToyAutoregressiveModel& model) {
  TokenOracle oracle;
  oracle.next = [model](std::span<const Token> prefix) {
    auto dist = model.distribution(prefix);
    return static_cast<Token>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  };
  return oracle;
}

TokenOracle random_table_oracle(int vocab_size, std::uint64_t seed) {
  if (vocab_size < 1) throw ContractError("random_table_oracle: vocab_size must be >= 1");
  TokenOracle oracle;
  oracle.next = [vocab_size, seed](std::span<const Token> prefix) {
    return static_cast<Token>(prefix_seed(prefix, seed) %
                              static_cast<std::uint64_t>(vocab_size));
  };
  return oracle;
}

}  // namespace speckv
