#include "hiedit/hrl_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"
#include "hiedit/optim.hpp"

namespace hiedit {

std::string to_string(RewardMode m) {
  switch (m) {
    case RewardMode::full: return "full";
    case RewardMode::rand: return "rand";
    case RewardMode::none: return "none";
  }
  return "?";
}

std::string to_string(SelectMode m) {
  switch (m) {
    case SelectMode::hinet: return "hinet";
    case SelectMode::random: return "random";
    case SelectMode::gradnorm: return "gradnorm";
    case SelectMode::all: return "all";
  }
  return "?";
}

RewardMode parse_reward_mode(const std::string& s) {
  if (s == "full") return RewardMode::full;
  if (s == "rand") return RewardMode::rand;
  if (s == "none") return RewardMode::none;
  throw ArgumentError("unknown reward mode '" + s + "'");
}

SelectMode parse_select_mode(const std::string& s) {
  if (s == "hinet") return SelectMode::hinet;
  if (s == "random") return SelectMode::random;
  if (s == "gradnorm") return SelectMode::gradnorm;
  if (s == "all") return SelectMode::all;
  throw ArgumentError("unknown select mode '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(eta >= 0.0)) throw ValidationError("train.eta", "must be >= 0");
  if (!(mu >= 0.0 && mu <= 1.0)) throw ValidationError("train.mu", "must lie in [0, 1]");
  if (!(kl_weight >= 0.0)) throw ValidationError("train.kl_weight", "must be >= 0");
  if (gamma != 1.0) throw ValidationError("train.gamma", "only gamma = 1 is supported");
  if (!(lr_high >= 0.0)) throw ValidationError("train.lr_high", "must be >= 0");
  if (!(lr_low >= 0.0)) throw ValidationError("train.lr_low", "must be >= 0");
  if (!(clip > 0.0)) throw ValidationError("train.clip", "must be > 0");
}

namespace {

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

std::vector<double> mask_from(std::size_t L, std::span<const std::size_t> on) {
  std::vector<double> m(L, 0.0);
  for (std::size_t i : on) m[i] = 1.0;
  return m;
}

std::vector<double> random_mask(std::size_t L, std::size_t K, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(L);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return mask_from(L, std::span<const std::size_t>(idx.data(), K));
}

// Last-position logits of `prompts` under `w`, used as fixed KL references.
using RefLogits = std::vector<std::vector<double>>;

RefLogits probe_references(const LMWeights& w, std::span<const FactRecord> window) {
  std::vector<Tokens> probes;
  for (const auto& r : window) probes.push_back(r.x_tilde);
  return last_logits(w, probes);
}

LossTerms loss_with_refs(const LMConfig& cfg, const LmTensors& current, std::span<const FactRecord> window,
                         const RefLogits& refs, const ad::Tensor& update_sq_norm, const TrainConfig& tc) {
  ad::Tape& tape = update_sq_norm.tape();
  LossTerms out;
  out.total = ad::scale(update_sq_norm, tc.eta);
  const std::size_t n = window.size();
  if (n == 0) {
    out.window_empty = true;
    return out;
  }
  std::vector<double> decay(n);
  for (std::size_t j = 0; j < n; ++j) decay[j] = std::pow(tc.mu, static_cast<double>(n - 1 - j));

  // Entries [0, n) are edit prompts, [n, 2n) their probes; batch by length.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < 2 * n; ++i) by_len[(i < n ? window[i].x : window[i - n].x_tilde).size()].push_back(i);
  const std::size_t V = cfg.vocab_size;
  for (const auto& [len, idx] : by_len) {
    std::vector<Tokens> batch;
    for (std::size_t i : idx) batch.push_back(i < n ? window[i].x : window[i - n].x_tilde);
    ad::Tensor logits = forward(cfg, current, batch, true);
    std::vector<std::size_t> nll_rows, nll_targets, kl_rows;
    std::vector<double> nll_w, kl_w, ref_vals;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx[r];
      if (i < n) {
        nll_rows.push_back(r);
        nll_targets.push_back(window[i].y);
        nll_w.push_back(decay[i]);
      } else {
        kl_rows.push_back(r);
        kl_w.push_back(tc.kl_weight * decay[i - n]);
        ref_vals.insert(ref_vals.end(), refs[i - n].begin(), refs[i - n].end());
      }
    }
    if (!nll_rows.empty()) {
      ad::Tensor nll = ad::softmax_nll_rows(ad::gather_rows(logits, nll_rows), nll_targets);
      out.total = ad::add(out.total, ad::sum(ad::hadamard(nll, tape.constant({nll_w.size()}, nll_w))));
    }
    if (!kl_rows.empty()) {
      ad::Tensor ref = tape.constant({kl_rows.size(), V}, std::move(ref_vals));
      ad::Tensor kl = ad::kl_div_rows(ref, ad::gather_rows(logits, kl_rows));
      out.total = ad::add(out.total, ad::sum(ad::hadamard(kl, tape.constant({kl_w.size()}, kl_w))));
    }
  }
  return out;
}

// Σ_l ‖mask_l · ΔW_l‖².
ad::Tensor masked_sq_norm(std::span<const ad::Tensor> updates, const ad::Tensor& mask) {
  ad::Tensor total;
  for (std::size_t l = 0; l < updates.size(); ++l) {
    ad::Tensor part = ad::sq_norm(ad::scale(updates[l], ad::index(mask, l)));
    total = total.valid() ? ad::add(total, part) : part;
  }
  return total;
}

}  // namespace

Selection select_layers(ad::Tape& tape, SelectMode mode, const DecomposedGrad& grads, const EditorTensors* et,
                        std::size_t K, std::mt19937_64& rng) {
  const std::size_t L = grads.slots.size();
  if (L == 0) throw ArgumentError("select_layers: no slot gradients");
  if (mode != SelectMode::all && (K < 1 || K > L))
    throw ArgumentError("select_layers: K=" + std::to_string(K) + " outside [1, " + std::to_string(L) + "]");
  Selection s;
  switch (mode) {
    case SelectMode::all:
      s.mask = tape.constant({L}, std::vector<double>(L, 1.0));
      break;
    case SelectMode::random:
      s.mask = tape.constant({L}, random_mask(L, K, rng));
      break;
    case SelectMode::gradnorm: {
      std::vector<double> norms(L);
      for (std::size_t l = 0; l < L; ++l) norms[l] = grads.slots[l].frobenius();
      s.mask = tape.constant({L}, mask_from(L, ad::topk_indices(norms, K)));
      break;
    }
    case SelectMode::hinet: {
      if (!et) throw ArgumentError("select_layers: hinet mode needs the high-level network");
      std::vector<ad::Tensor> h;
      for (std::size_t l = 0; l < L; ++l) {
        const auto& g = grads.slots[l];
        h.push_back(encode_layer(*et, l, tape.constant({g.d_in}, g.u_mean), tape.constant({g.d_out}, g.v_mean)));
      }
      Routing r = route_importance(*et, h, K);
      s.mask = r.mask;
      s.z = r.z;
      break;
    }
  }
  return s;
}

LossTerms editing_loss(const LMConfig& cfg, const LmTensors& current, const LMWeights& previous,
                       std::span<const FactRecord> window, const ad::Tensor& update_sq_norm, const TrainConfig& tc) {
  return loss_with_refs(cfg, current, window, probe_references(previous, window), update_sq_norm, tc);
}

double low_reward(double loss) { return -loss; }

double high_reward(double masked_loss, std::optional<double> full_loss, RewardMode mode,
                   std::optional<double> rand_loss) {
  switch (mode) {
    case RewardMode::full:
      if (!full_loss) throw ArgumentError("high_reward: full mode needs the all-slot counterfactual loss");
      return *full_loss - masked_loss;
    case RewardMode::rand:
      if (!rand_loss) throw ArgumentError("high_reward: rand mode needs the random-slot counterfactual loss");
      return *rand_loss - masked_loss;
    case RewardMode::none:
      return low_reward(masked_loss);
  }
  return 0.0;
}

StepOutput edit_step(ad::Tape& tape, const EditState& state, const FactRecord& record, const EditorTensors& et,
                     const TrainConfig& tc, std::mt19937_64& rng) {
  const Editor& editor = *et.editor;
  const SlotRange& range = editor.range();
  const LMConfig& cfg = state.weights.config();
  const std::size_t L = range.size();
  try {
    const DecomposedGrad dg = capture_decomposed_grads(state.weights, record.x, record.y, range);
    Selection sel = select_layers(tape, tc.select_mode, dg, &et, editor.K(), rng);

    std::vector<ad::Tensor> updates;
    for (std::size_t l = 0; l < L; ++l) {
      const auto& g = dg.slots[l];
      ad::Tensor U = tape.constant({g.positions, g.d_in}, g.u);
      ad::Tensor V = tape.constant({g.positions, g.d_out}, g.v);
      updates.push_back(slot_update(et, l, edit_network_forward(et, l, U, V)));
    }

    std::vector<FactRecord> window(state.history.begin(), state.history.end());
    window.push_back(record);
    const RefLogits refs = probe_references(state.weights, window);

    LmTensors masked = bind_weights(tape, state.weights, Binding::constant);
    apply_masked_update(masked, range, updates, sel.mask);
    LossTerms lt = loss_with_refs(cfg, masked, window, refs, masked_sq_norm(updates, sel.mask), tc);

    StepOutput out;
    out.loss = lt.total;
    if (tc.reward_mode != RewardMode::none) {
      ad::Tensor cf_mask = tc.reward_mode == RewardMode::full
                               ? tape.constant({L}, std::vector<double>(L, 1.0))
                               : tape.constant({L}, random_mask(L, editor.K(), rng));
      LmTensors cf = bind_weights(tape, state.weights, Binding::constant);
      apply_masked_update(cf, range, updates, cf_mask);
      out.cf_loss = loss_with_refs(cfg, cf, window, refs, masked_sq_norm(updates, cf_mask), tc).total;
    }

    StepLog& log = out.log;
    log.t = state.t;
    log.mask = to_vec(sel.mask.values());
    if (sel.z.valid()) log.z = to_vec(sel.z.values());
    log.loss = out.loss.item();
    if (out.cf_loss.valid()) log.cf_loss = out.cf_loss.item();
    log.r_low = low_reward(log.loss);
    log.r_high = tc.reward_mode == RewardMode::full   ? high_reward(log.loss, log.cf_loss, tc.reward_mode)
                 : tc.reward_mode == RewardMode::rand ? high_reward(log.loss, std::nullopt, tc.reward_mode, log.cf_loss)
                                                      : high_reward(log.loss, std::nullopt, tc.reward_mode);
    log.window_empty = lt.window_empty;
    for (const auto& u : updates) log.update_norms.push_back(std::sqrt(ad::sq_norm(u).item()));

    out.next = state.weights;
    for (std::size_t l = 0; l < L; ++l) out.next.slot(range[l]).value = to_vec(masked.slot(range[l]).values());
    return out;
  } catch (const NumericError& e) {
    throw TrajectoryAbort(state.t, e.what());
  }
}

void commit_step(EditState& state, StepOutput&& out, const FactRecord& record, const TrainConfig& tc) {
  state.weights = std::move(out.next);
  state.t += 1;
  if (tc.window > 0) {
    state.history.push_back(record);
    while (state.history.size() > tc.window) state.history.pop_front();
  }
}

TrajectoryResult run_trajectory(const Editor& editor, const LMWeights& base, const EditStream& stream,
                                const TrainConfig& tc) {
  tc.validate();
  std::mt19937_64 rng(tc.seed);
  EditState state{base, 0, {}};
  TrajectoryResult res;
  for (const auto& rec : stream.records) {
    ad::Tape tape;
    EditorTensors et = bind_editor(tape, editor, false, false);
    StepOutput out = edit_step(tape, state, rec, et, tc, rng);
    res.J_low += out.log.r_low;
    res.J_high += out.log.r_high;
    res.steps.push_back(out.log);
    commit_step(state, std::move(out), rec, tc);
  }
  res.final_model = std::move(state.weights);
  return res;
}

LMWeights single_level_step(const Editor& editor, const LMWeights& w, const FactRecord& record) {
  const DecomposedGrad dg = capture_decomposed_grads(w, record.x, record.y, editor.range());
  ad::Tape tape;
  EditorTensors et = bind_editor(tape, editor, false, false);
  LMWeights next = w;
  for (std::size_t l = 0; l < editor.L(); ++l) {
    const auto& g = dg.slots[l];
    ad::Tensor upd = slot_update(et, l,
                                 edit_network_forward(et, l, tape.constant({g.positions, g.d_in}, g.u),
                                                      tape.constant({g.positions, g.d_out}, g.v)));
    auto& p = next.slot(editor.range()[l]).value;
    auto uv = upd.values();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += uv[i];
  }
  return next;
}

std::vector<EpochStats> train_editor(Editor& editor, const LMWeights& base, const EditStream& stream,
                                     const TrainConfig& tc, const EpochCallback& on_epoch) {
  tc.validate();
  const bool learn_high = tc.select_mode == SelectMode::hinet;
  Adam adam_high(editor.high(), AdamOptions{.lr = tc.lr_high});
  Adam adam_low(editor.low(), AdamOptions{.lr = tc.lr_low});
  std::vector<EpochStats> stats;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::seed_seq seq{tc.seed, static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    EditState state{base, 0, {}};
    ParamStore g_low = editor.low().zeros_like();
    ParamStore g_high = editor.high().zeros_like();
    EpochStats es;
    es.epoch = epoch;
    for (const auto& rec : stream.records) {
      ad::Tape tape;
      EditorTensors et = bind_editor(tape, editor, learn_high, true);
      StepOutput out = edit_step(tape, state, rec, et, tc, rng);

      // One backward of the masked loss serves both objectives: J_low needs
      // −∂L/∂θ and every reward mode contributes −∂L/∂φ to J_high.
      std::vector<ad::Tensor> params = et.low.tensors();
      if (learn_high) {
        auto hp = et.high.tensors();
        params.insert(params.end(), hp.begin(), hp.end());
      }
      const ad::GradientMap g = tape.backward(out.loss, params);
      et.low.accumulate_into(g_low, g, -1.0);
      if (learn_high) {
        ParamStore step_high = editor.high().zeros_like();
        et.high.accumulate_into(step_high, g, -1.0);
        if (out.cf_loss.valid()) {
          tape.zero_grad();
          auto hp = et.high.tensors();
          et.high.accumulate_into(step_high, tape.backward(out.cf_loss, hp), 1.0);
        }
        if (tc.rl_training) {
          for (const auto& n : step_high.names()) {
            auto& dst = g_high.at(n).value;
            const auto& src = step_high.at(n).value;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
          }
        } else {
          clip_grad_norm(step_high, tc.clip);
          adam_high.ascend(editor.high(), step_high);
        }
      }
      es.J_low += out.log.r_low;
      es.J_high += out.log.r_high;
      commit_step(state, std::move(out), rec, tc);
    }
    es.grad_norm_low = clip_grad_norm(g_low, tc.clip);
    adam_low.ascend(editor.low(), g_low);
    if (learn_high && tc.rl_training) {
      es.grad_norm_high = clip_grad_norm(g_high, tc.clip);
      adam_high.ascend(editor.high(), g_high);
    }
    stats.push_back(es);
    if (on_epoch) on_epoch(es);
  }
  return stats;
}

// ---- trajlog-v1 ---------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s, std::size_t line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, "expected a number, got '" + s + "'");
  }
}

}  // namespace

void save_trajlog(std::span<const StepLog> logs, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "trajlog-v1\n";
  os << "t\tmask\tloss\tcf_loss\tr_low\tr_high\n";
  for (const auto& s : logs) {
    std::string bits;
    for (double m : s.mask) bits += m != 0.0 ? '1' : '0';
    os << s.t << '\t' << bits << '\t' << fmt(s.loss) << '\t' << (s.cf_loss ? fmt(*s.cf_loss) : "-") << '\t'
       << fmt(s.r_low) << '\t' << fmt(s.r_high) << '\n';
  }
  write_file_atomic(path, os.str());
}

std::vector<StepLog> load_trajlog(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  std::vector<StepLog> out;
  while (std::getline(in, line)) {
    ++n;
    if (n == 1) {
      if (line != "trajlog-v1") throw ParseError(1, "expected format tag 'trajlog-v1'");
      continue;
    }
    if (n == 2 || line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    std::string tok;
    while (std::getline(ls, tok, '\t')) f.push_back(tok);
    if (f.size() != 6) throw ParseError(n, "expected 6 tab-separated fields, got " + std::to_string(f.size()));
    StepLog s;
    s.t = static_cast<std::size_t>(parse_double(f[0], n));
    for (char c : f[1]) {
      if (c != '0' && c != '1') throw ParseError(n, "mask must be a bit string");
      s.mask.push_back(c == '1' ? 1.0 : 0.0);
    }
    s.loss = parse_double(f[2], n);
    if (f[3] != "-") s.cf_loss = parse_double(f[3], n);
    s.r_low = parse_double(f[4], n);
    s.r_high = parse_double(f[5], n);
    out.push_back(std::move(s));
  }
  if (n == 0) throw ParseError(1, "expected format tag 'trajlog-v1'");
  return out;
}

}  // namespace hiedit
