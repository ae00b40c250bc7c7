#pragma once

// Small models, editors and hand-rolled streams shared by the trainer,
// metric and acceptance tests.

#include <random>
#include <set>

#include "hiedit/hypernets.hpp"
#include "hiedit/knowledge_stream.hpp"
#include "hiedit/toy_lm.hpp"

namespace fixtures {

using namespace hiedit;

inline LMConfig tiny_lm(std::uint64_t seed = 1) {
  LMConfig c;
  c.vocab_size = 32;
  c.d_model = 6;
  c.d_ff = 10;
  c.n_blocks = 2;
  c.n_heads = 1;
  c.max_seq = 5;
  c.seed = seed;
  return c;
}

inline EditorConfig tiny_editor(std::uint64_t seed = 3) {
  EditorConfig c;
  c.d1 = 5;
  c.d_r = 3;
  c.C = 2;
  c.edit_lr = 0.5;
  c.seed = seed;
  return c;
}

// Weights with N(0, sd) noise on top of the init so logits are far from uniform.
inline LMWeights noisy_weights(const LMConfig& cfg, std::uint64_t seed, double sd = 0.3) {
  LMWeights w(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (const auto& name : w.store().names())
    for (double& x : w.store().at(name).value) x += n(rng);
  return w;
}

// Editor whose zero-initialized blocks are filled so the low-level network
// is not the identity.
inline Editor active_editor(const LMConfig& lm, std::uint64_t seed = 3, double scale = 0.2) {
  Editor e(tiny_editor(seed), lm, default_slot_range(lm));
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (const auto& n : e.low().names())
    if (n.find(".B") != std::string::npos)
      for (double& x : e.low().at(n).value) x = d(rng);
  return e;
}

// Records over a 32-token vocabulary: subjects [0,16), relations [16,20),
// synonyms [20,24), objects [24,32). Prompts are distinct.
inline EditStream tiny_stream(std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Token lo, Token hi) { return std::uniform_int_distribution<Token>(lo, hi - 1)(rng); };
  EditStream s;
  s.seed = seed;
  s.spec.T = T;
  std::set<Tokens> used;
  while (s.records.size() < T) {
    FactRecord r;
    const Token rel = pick(16, 20);
    r.x = {pick(0, 16), pick(0, 16), rel};
    if (!used.insert(r.x).second) continue;
    r.x_bar = {r.x[0], r.x[1], static_cast<Token>(rel + 4)};
    r.y_prev = pick(24, 32);
    do r.y = pick(24, 32);
    while (r.y == r.y_prev);
    do r.x_tilde = {pick(0, 16), pick(0, 16), pick(16, 20)};
    while (r.x_tilde == r.x);
    r.y_tilde = pick(24, 32);
    s.records.push_back(std::move(r));
  }
  return s;
}

}  // namespace fixtures
