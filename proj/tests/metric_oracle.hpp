#pragma once

// Per-fact reference implementations of the editing metrics: one
// unbatched forward per prompt, argmax by a plain loop.

#include <span>

#include "hiedit/eval_metrics.hpp"

namespace oracle {

using namespace hiedit;

inline std::vector<double> logits_of(const LMWeights& w, const Tokens& x) {
  ad::Tape tape;
  const auto all = lm_forward(tape, w, x).values();
  const std::size_t V = w.config().vocab_size;
  return {all.end() - static_cast<std::ptrdiff_t>(V), all.end()};
}

inline bool wins(const LMWeights& w, const Tokens& x, Token want, Token against, MetricMode mode) {
  const auto l = logits_of(w, x);
  if (mode == MetricMode::prob_compare) return l[want] > l[against];
  std::size_t best = 0;
  for (std::size_t i = 1; i < l.size(); ++i)
    if (l[i] > l[best]) best = i;
  return best == want;
}

inline Score efficacy(const LMWeights& w, std::span<const FactRecord> f, MetricMode mode) {
  Score s{0, f.size()};
  for (const auto& r : f) s.hits += wins(w, r.x, r.y, r.y_prev, mode);
  return s;
}

inline Score generalization(const LMWeights& w, std::span<const FactRecord> f, MetricMode mode) {
  Score s{0, f.size()};
  for (const auto& r : f) s.hits += wins(w, r.x_bar, r.y, r.y_prev, mode);
  return s;
}

inline Score specificity(const LMWeights& w, std::span<const FactRecord> f, MetricMode mode) {
  Score s{0, f.size()};
  for (const auto& r : f) s.hits += wins(w, r.x_tilde, r.y_tilde, r.y, mode);
  return s;
}

inline Score edited_retention(const LMWeights& w, const EditStream& st, std::size_t T0, MetricMode mode) {
  Score s{0, 2 * T0};
  for (std::size_t i = 0; i < T0; ++i) {
    const auto& r = st.records[i];
    s.hits += wins(w, r.x, r.y, r.y_prev, mode);
    s.hits += wins(w, r.x_bar, r.y, r.y_prev, mode);
  }
  return s;
}

inline Score general_retention(const LMWeights& w, std::span<const Example> held) {
  Score s{0, held.size()};
  for (const auto& e : held) s.hits += wins(w, e.prompt, e.target, e.target, MetricMode::top1);
  return s;
}

}  // namespace oracle
