#pragma once

// Tiny decoder-only transformer whose gated-MLP matrices form the editable
// slot range, plus exact per-position rank-1 gradient capture.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hiedit/autodiff.hpp"
#include "hiedit/params.hpp"

namespace hiedit {

using Token = std::size_t;
using Tokens = std::vector<Token>;

struct LMConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 1;
  std::size_t max_seq = 8;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const LMConfig&) const = default;
};

enum class MatrixKind { gate, up };

struct EditSlot {
  std::size_t block = 0;
  MatrixKind kind = MatrixKind::gate;
  bool operator==(const EditSlot&) const = default;
};
using SlotRange = std::vector<EditSlot>;

std::string slot_name(const EditSlot& s);  // e.g. "b0.gate"
// gate and up of every block, block-major: b0.gate, b0.up, b1.gate, ...
SlotRange default_slot_range(const LMConfig& cfg);
void validate_slot_range(const LMConfig& cfg, const SlotRange& range);

// Weights of the toy model. Slot matrices are stored [d_ff × d_model]
// (output × input) so that a slot's gradient is Σ_p outer(v_p, u_p).
class LMWeights {
 public:
  LMWeights() = default;
  explicit LMWeights(LMConfig cfg);  // seeded initialization

  static LMWeights from_store(LMConfig cfg, ParamStore store);

  const LMConfig& config() const { return cfg_; }
  const ParamStore& store() const { return store_; }
  ParamStore& store() { return store_; }
  Param& slot(const EditSlot& s) { return store_.at(slot_name(s)); }
  const Param& slot(const EditSlot& s) const { return store_.at(slot_name(s)); }

  LMWeights snapshot() const { return *this; }
  void restore(const LMWeights& snap) { *this = snap; }

  bool operator==(const LMWeights& o) const { return cfg_ == o.cfg_ && store_ == o.store_; }

 private:
  LMConfig cfg_;
  ParamStore store_;
};

struct BlockTensors {
  ad::Tensor attn_norm, wq, wk, wv, wo, mlp_norm, gate, up, down;
};

struct LmTensors {
  ad::Tensor tok_emb, pos_emb, final_norm;
  std::vector<BlockTensors> blocks;

  ad::Tensor& slot(const EditSlot& s);
  const ad::Tensor& slot(const EditSlot& s) const;
};

enum class Binding { constant, all, slots };

// Puts every weight on the tape. With Binding::slots only the matrices of
// `range` are differentiable.
LmTensors bind_weights(ad::Tape& tape, const LMWeights& w, Binding mode, const SlotRange& range = {});

// Per-block handles recorded during a forward pass.
struct ForwardTrace {
  std::vector<ad::Tensor> mlp_in;    // normalized input to gate/up, [rows × d_model]
  std::vector<ad::Tensor> gate_pre;  // [rows × d_ff]
  std::vector<ad::Tensor> up_pre;    // [rows × d_ff]

  const ad::Tensor& slot_input(const EditSlot& s) const { return mlp_in[s.block]; }
  const ad::Tensor& slot_output(const EditSlot& s) const;
};

// Batched causal forward over equal-length sequences. Returns logits of
// every position ([B·S × V]) or of the last position only ([B × V]).
ad::Tensor forward(const LMConfig& cfg, const LmTensors& w, std::span<const Tokens> batch, bool last_only,
                   ForwardTrace* trace = nullptr);

// Causal logits [len × V] of one sequence.
ad::Tensor lm_forward(ad::Tape& tape, const LMWeights& w, const Tokens& tokens);

// −log p(y | x) read at the final prompt position.
ad::Tensor lm_nll(const LMConfig& cfg, const LmTensors& w, const Tokens& x, Token y);

// Last-position logits for many prompts, batched by length; row i belongs to prompts[i].
std::vector<std::vector<double>> last_logits(const LMWeights& w, std::span<const Tokens> prompts);
std::vector<Token> predict(const LMWeights& w, std::span<const Tokens> prompts);

// Rank-1 decomposition of one slot's gradient: row p of u/v holds (u_p, v_p).
struct SlotGrad {
  std::size_t positions = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::vector<double> u;  // [positions × d_in]
  std::vector<double> v;  // [positions × d_out]
  std::vector<double> u_mean;
  std::vector<double> v_mean;

  std::vector<double> full() const;  // Σ_p outer(v_p, u_p), [d_out × d_in]
  double frobenius() const;
};

struct DecomposedGrad {
  std::vector<SlotGrad> slots;
  double loss = 0.0;
};

DecomposedGrad capture_decomposed_grads(const LMWeights& w, const Tokens& x, Token y, const SlotRange& range);

// W_l + mask[l]·update_l for every slot; all other weights untouched.
LMWeights apply_masked_update(const LMWeights& w, const SlotRange& range,
                              std::span<const std::vector<double>> updates, std::span<const double> mask);
// Differentiable variant: replaces slot tensors of `w` by W_l + mask[l]·update_l.
void apply_masked_update(LmTensors& w, const SlotRange& range, std::span<const ad::Tensor> updates,
                         const ad::Tensor& mask);

struct Example {
  Tokens prompt;
  Token target = 0;
};

struct PretrainOptions {
  std::size_t steps = 400;
  double lr = 1e-2;
  bool operator==(const PretrainOptions&) const = default;
};

struct PretrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Full-batch training on the mean next-token NLL of `corpus`.
PretrainResult pretrain(LMWeights& w, std::span<const Example> corpus, const PretrainOptions& opts);
double corpus_loss(const LMWeights& w, std::span<const Example> corpus);

void save_lm(const LMWeights& w, const std::filesystem::path& path);
LMWeights load_lm(const std::filesystem::path& path);

}  // namespace hiedit
