#include "hiedit/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"
#include "hiedit/optim.hpp"

namespace hiedit {

void LMConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || d_ff < 1 || n_blocks < 1 || n_heads < 1 || max_seq < 1)
    throw ValidationError("lm", "all dimensions must be >= 1");
  if (d_model % n_heads != 0) throw ValidationError("lm.n_heads", "d_model must be divisible by n_heads");
}

std::string slot_name(const EditSlot& s) {
  return "b" + std::to_string(s.block) + (s.kind == MatrixKind::gate ? ".gate" : ".up");
}

SlotRange default_slot_range(const LMConfig& cfg) {
  SlotRange r;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    r.push_back({b, MatrixKind::gate});
    r.push_back({b, MatrixKind::up});
  }
  return r;
}

void validate_slot_range(const LMConfig& cfg, const SlotRange& range) {
  if (range.empty()) throw ArgumentError("slot range is empty");
  for (std::size_t i = 0; i < range.size(); ++i) {
    if (range[i].block >= cfg.n_blocks)
      throw ArgumentError("slot " + slot_name(range[i]) + " refers to a missing block");
    for (std::size_t j = 0; j < i; ++j)
      if (range[j] == range[i]) throw ArgumentError("slot " + slot_name(range[i]) + " listed twice");
  }
}

namespace {

std::string bname(std::size_t b, const char* leaf) { return "b" + std::to_string(b) + "." + leaf; }

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace

LMWeights::LMWeights(LMConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t V = cfg_.vocab_size, d = cfg_.d_model, f = cfg_.d_ff;
  // Small embeddings keep the tied head close to uniform at initialization.
  const double emb = 0.02 * std::sqrt(3.0);
  store_.add("tok_emb", {V, d}, uniform(rng, V * d, emb));
  store_.add("pos_emb", {cfg_.max_seq, d}, uniform(rng, cfg_.max_seq * d, emb));
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bf = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
    store_.add(bname(b, "attn_norm"), {d}, std::vector<double>(d, 1.0));
    for (const char* m : {"wq", "wk", "wv", "wo"}) store_.add(bname(b, m), {d, d}, uniform(rng, d * d, bd));
    store_.add(bname(b, "mlp_norm"), {d}, std::vector<double>(d, 1.0));
    store_.add(bname(b, "gate"), {f, d}, uniform(rng, f * d, bd));
    store_.add(bname(b, "up"), {f, d}, uniform(rng, f * d, bd));
    store_.add(bname(b, "down"), {d, f}, uniform(rng, d * f, bf));
  }
  store_.add("final_norm", {d}, std::vector<double>(d, 1.0));
}

LMWeights LMWeights::from_store(LMConfig cfg, ParamStore store) {
  cfg.validate();
  LMWeights ref(cfg);
  if (ref.store_.names() != store.names()) throw ParseError(2, "model arrays do not match the configuration");
  for (const auto& n : store.names())
    if (store.at(n).shape != ref.store_.at(n).shape)
      throw ParseError(2, "array '" + n + "' has shape " + ad::shape_str(store.at(n).shape) + ", expected " +
                              ad::shape_str(ref.store_.at(n).shape));
  LMWeights w;
  w.cfg_ = cfg;
  w.store_ = std::move(store);
  return w;
}

ad::Tensor& LmTensors::slot(const EditSlot& s) {
  auto& b = blocks.at(s.block);
  return s.kind == MatrixKind::gate ? b.gate : b.up;
}

const ad::Tensor& LmTensors::slot(const EditSlot& s) const {
  const auto& b = blocks.at(s.block);
  return s.kind == MatrixKind::gate ? b.gate : b.up;
}

const ad::Tensor& ForwardTrace::slot_output(const EditSlot& s) const {
  return s.kind == MatrixKind::gate ? gate_pre.at(s.block) : up_pre.at(s.block);
}

LmTensors bind_weights(ad::Tape& tape, const LMWeights& w, Binding mode, const SlotRange& range) {
  const auto& st = w.store();
  auto bind = [&](const std::string& name, bool trainable) {
    const auto& p = st.at(name);
    return trainable ? tape.variable(p.shape, p.value) : tape.constant(p.shape, p.value);
  };
  const bool all = mode == Binding::all;
  auto in_range = [&](std::size_t b, MatrixKind k) {
    return mode == Binding::slots && std::find(range.begin(), range.end(), EditSlot{b, k}) != range.end();
  };
  LmTensors t;
  t.tok_emb = bind("tok_emb", all);
  t.pos_emb = bind("pos_emb", all);
  for (std::size_t b = 0; b < w.config().n_blocks; ++b) {
    BlockTensors bt;
    bt.attn_norm = bind(bname(b, "attn_norm"), all);
    bt.wq = bind(bname(b, "wq"), all);
    bt.wk = bind(bname(b, "wk"), all);
    bt.wv = bind(bname(b, "wv"), all);
    bt.wo = bind(bname(b, "wo"), all);
    bt.mlp_norm = bind(bname(b, "mlp_norm"), all);
    bt.gate = bind(bname(b, "gate"), all || in_range(b, MatrixKind::gate));
    bt.up = bind(bname(b, "up"), all || in_range(b, MatrixKind::up));
    bt.down = bind(bname(b, "down"), all);
    t.blocks.push_back(bt);
  }
  t.final_norm = bind("final_norm", all);
  return t;
}

ad::Tensor forward(const LMConfig& cfg, const LmTensors& w, std::span<const Tokens> batch, bool last_only,
                   ForwardTrace* trace) {
  if (batch.empty()) throw ArgumentError("forward: empty batch");
  const std::size_t S = batch[0].size();
  if (S < 1 || S > cfg.max_seq)
    throw ArgumentError("forward: sequence length " + std::to_string(S) + " outside [1, " +
                        std::to_string(cfg.max_seq) + "]");
  std::vector<std::size_t> ids, pos;
  ids.reserve(batch.size() * S);
  for (const auto& seq : batch) {
    if (seq.size() != S) throw DimensionError("forward: batch sequences must share one length");
    for (std::size_t p = 0; p < S; ++p) {
      if (seq[p] >= cfg.vocab_size)
        throw IndexError("token " + std::to_string(seq[p]) + " out of range for vocabulary " +
                         std::to_string(cfg.vocab_size));
      ids.push_back(seq[p]);
      pos.push_back(p);
    }
  }
  if (trace) *trace = ForwardTrace{};
  ad::Tensor x = ad::add(ad::embedding(w.tok_emb, ids), ad::embedding(w.pos_emb, pos));
  for (const auto& b : w.blocks) {
    ad::Tensor h = ad::rmsnorm(x, b.attn_norm);
    ad::Tensor q = ad::matmul_bt(h, b.wq);
    ad::Tensor k = ad::matmul_bt(h, b.wk);
    ad::Tensor v = ad::matmul_bt(h, b.wv);
    ad::Tensor a = ad::causal_attention(q, k, v, S, cfg.n_heads);
    x = ad::add(x, ad::matmul_bt(a, b.wo));
    ad::Tensor hm = ad::rmsnorm(x, b.mlp_norm);
    ad::Tensor g = ad::matmul_bt(hm, b.gate);
    ad::Tensor u = ad::matmul_bt(hm, b.up);
    ad::Tensor act = ad::hadamard(ad::swish(g), u);
    x = ad::add(x, ad::matmul_bt(act, b.down));
    if (trace) {
      trace->mlp_in.push_back(hm);
      trace->gate_pre.push_back(g);
      trace->up_pre.push_back(u);
    }
  }
  if (last_only) {
    std::vector<std::size_t> last(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) last[i] = i * S + S - 1;
    x = ad::gather_rows(x, last);
  }
  ad::Tensor hf = ad::rmsnorm(x, w.final_norm);
  return ad::matmul_bt(hf, w.tok_emb);
}

ad::Tensor lm_forward(ad::Tape& tape, const LMWeights& w, const Tokens& tokens) {
  auto t = bind_weights(tape, w, Binding::constant);
  const Tokens* one = &tokens;
  return forward(w.config(), t, std::span<const Tokens>(one, 1), false);
}

ad::Tensor lm_nll(const LMConfig& cfg, const LmTensors& w, const Tokens& x, Token y) {
  const Tokens* one = &x;
  ad::Tensor logits = forward(cfg, w, std::span<const Tokens>(one, 1), true);
  return ad::softmax_nll(ad::reshape(logits, {cfg.vocab_size}), y);
}

std::vector<std::vector<double>> last_logits(const LMWeights& w, std::span<const Tokens> prompts) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < prompts.size(); ++i) by_len[prompts[i].size()].push_back(i);
  std::vector<std::vector<double>> out(prompts.size());
  const std::size_t V = w.config().vocab_size;
  for (const auto& [len, idx] : by_len) {
    ad::Tape tape;
    auto t = bind_weights(tape, w, Binding::constant);
    std::vector<Tokens> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(prompts[i]);
    ad::Tensor logits = forward(w.config(), t, batch, true);
    auto lv = logits.values();
    for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]].assign(lv.begin() + r * V, lv.begin() + (r + 1) * V);
  }
  return out;
}

std::vector<Token> predict(const LMWeights& w, std::span<const Tokens> prompts) {
  auto logits = last_logits(w, prompts);
  std::vector<Token> out(prompts.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<Token>(std::max_element(logits[i].begin(), logits[i].end()) - logits[i].begin());
  return out;
}

std::vector<double> SlotGrad::full() const {
  std::vector<double> g(d_out * d_in, 0.0);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t i = 0; i < d_out; ++i)
      for (std::size_t j = 0; j < d_in; ++j) g[i * d_in + j] += v[p * d_out + i] * u[p * d_in + j];
  return g;
}

double SlotGrad::frobenius() const {
  double s = 0.0;
  for (double x : full()) s += x * x;
  return std::sqrt(s);
}

DecomposedGrad capture_decomposed_grads(const LMWeights& w, const Tokens& x, Token y, const SlotRange& range) {
  if (range.empty()) throw ArgumentError("capture_decomposed_grads: empty slot range");
  validate_slot_range(w.config(), range);
  ad::Tape tape;
  auto t = bind_weights(tape, w, Binding::slots, range);
  ForwardTrace trace;
  const Tokens* one = &x;
  ad::Tensor logits = forward(w.config(), t, std::span<const Tokens>(one, 1), true, &trace);
  ad::Tensor loss = ad::softmax_nll(ad::reshape(logits, {w.config().vocab_size}), y);
  tape.backward(loss);
  DecomposedGrad out;
  out.loss = loss.item();
  const std::size_t P = x.size();
  for (const auto& s : range) {
    SlotGrad sg;
    sg.positions = P;
    sg.d_in = w.config().d_model;
    sg.d_out = w.config().d_ff;
    auto u = trace.slot_input(s).values();
    auto v = trace.slot_output(s).grad();
    sg.u.assign(u.begin(), u.end());
    sg.v.assign(v.begin(), v.end());
    sg.u_mean.assign(sg.d_in, 0.0);
    sg.v_mean.assign(sg.d_out, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t j = 0; j < sg.d_in; ++j) sg.u_mean[j] += sg.u[p * sg.d_in + j] / static_cast<double>(P);
      for (std::size_t j = 0; j < sg.d_out; ++j) sg.v_mean[j] += sg.v[p * sg.d_out + j] / static_cast<double>(P);
    }
    out.slots.push_back(std::move(sg));
  }
  return out;
}

LMWeights apply_masked_update(const LMWeights& w, const SlotRange& range,
                              std::span<const std::vector<double>> updates, std::span<const double> mask) {
  if (updates.size() != range.size() || mask.size() != range.size())
    throw DimensionError("apply_masked_update: need one update and one mask value per slot");
  LMWeights out = w;
  for (std::size_t l = 0; l < range.size(); ++l) {
    auto& p = out.slot(range[l]);
    if (updates[l].size() != p.value.size())
      throw DimensionError("apply_masked_update: update for " + slot_name(range[l]) + " has wrong size");
    if (mask[l] == 0.0) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += updates[l][i] * mask[l];
  }
  return out;
}

void apply_masked_update(LmTensors& w, const SlotRange& range, std::span<const ad::Tensor> updates,
                         const ad::Tensor& mask) {
  if (updates.size() != range.size() || mask.size() != range.size())
    throw DimensionError("apply_masked_update: need one update and one mask value per slot");
  for (std::size_t l = 0; l < range.size(); ++l) {
    ad::Tensor& slot = w.slot(range[l]);
    if (updates[l].shape() != slot.shape())
      throw DimensionError("apply_masked_update: update for " + slot_name(range[l]) + " has shape " +
                           ad::shape_str(updates[l].shape()) + ", slot has " + ad::shape_str(slot.shape()));
    slot = ad::add(slot, ad::scale(updates[l], ad::index(mask, l)));
  }
}

namespace {

// Mean NLL of the corpus, batched by prompt length.
ad::Tensor corpus_nll(const LMConfig& cfg, const LmTensors& t, std::span<const Example> corpus) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_len[corpus[i].prompt.size()].push_back(i);
  ad::Tensor total;
  for (const auto& [len, idx] : by_len) {
    std::vector<Tokens> batch;
    std::vector<std::size_t> targets;
    for (std::size_t i : idx) {
      batch.push_back(corpus[i].prompt);
      targets.push_back(corpus[i].target);
    }
    ad::Tensor part = ad::sum(ad::softmax_nll_rows(forward(cfg, t, batch, true), targets));
    total = total.valid() ? ad::add(total, part) : part;
  }
  return ad::scale(total, 1.0 / static_cast<double>(corpus.size()));
}

}  // namespace

double corpus_loss(const LMWeights& w, std::span<const Example> corpus) {
  if (corpus.empty()) throw ArgumentError("corpus_loss: empty corpus");
  ad::Tape tape;
  auto t = bind_weights(tape, w, Binding::constant);
  return corpus_nll(w.config(), t, corpus).item();
}

PretrainResult pretrain(LMWeights& w, std::span<const Example> corpus, const PretrainOptions& opts) {
  if (corpus.empty()) throw ArgumentError("pretrain: empty corpus");
  PretrainResult res;
  Adam adam(w.store(), AdamOptions{.lr = opts.lr});
  ParamStore grads = w.store().zeros_like();
  for (std::size_t step = 0; step <= opts.steps; ++step) {
    ad::Tape tape;
    BoundParams bound(tape, w.store(), true);
    LmTensors t;
    t.tok_emb = bound["tok_emb"];
    t.pos_emb = bound["pos_emb"];
    t.final_norm = bound["final_norm"];
    for (std::size_t b = 0; b < w.config().n_blocks; ++b)
      t.blocks.push_back({bound[bname(b, "attn_norm")], bound[bname(b, "wq")], bound[bname(b, "wk")],
                          bound[bname(b, "wv")], bound[bname(b, "wo")], bound[bname(b, "mlp_norm")],
                          bound[bname(b, "gate")], bound[bname(b, "up")], bound[bname(b, "down")]});
    ad::Tensor loss = corpus_nll(w.config(), t, corpus);
    if (step == 0) res.initial_loss = loss.item();
    res.final_loss = loss.item();
    if (step == opts.steps) break;
    auto params = bound.tensors();
    auto g = tape.backward(loss, params);
    grads = w.store().zeros_like();
    bound.accumulate_into(grads, g);
    adam.descend(w.store(), grads);
  }
  return res;
}

namespace {

nlohmann::json lm_config_json(const LMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"d_ff", c.d_ff}, {"n_blocks", c.n_blocks},
          {"n_heads", c.n_heads},       {"max_seq", c.max_seq}, {"seed", c.seed}};
}

}  // namespace

void save_lm(const LMWeights& w, const std::filesystem::path& path) {
  save_container(path, Container{"toylm-v1", lm_config_json(w.config()), w.store()});
}

LMWeights load_lm(const std::filesystem::path& path) {
  Container c = load_container(path, "toylm-v1");
  LMConfig cfg;
  try {
    cfg.vocab_size = c.config.at("vocab_size");
    cfg.d_model = c.config.at("d_model");
    cfg.d_ff = c.config.at("d_ff");
    cfg.n_blocks = c.config.at("n_blocks");
    cfg.n_heads = c.config.at("n_heads");
    cfg.max_seq = c.config.at("max_seq");
    cfg.seed = c.config.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(2, path.string() + ": incomplete model config: " + e.what());
  }
  return LMWeights::from_store(cfg, std::move(c.arrays));
}

}  // namespace hiedit
