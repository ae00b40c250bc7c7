#pragma once

// Two-level editor. The high-level network scores every editable slot from
// its pooled gradient factors and routes a hard top-K mask; the low-level
// networks turn per-position gradient factors (u_p, v_p) into pseudo factors
// (ũ_p, ṽ_p) whose outer products form the slot update.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include <json.hpp>

#include "hiedit/autodiff.hpp"
#include "hiedit/params.hpp"
#include "hiedit/toy_lm.hpp"

namespace hiedit {

struct EditorConfig {
  std::size_t d1 = 16;   // encoder width
  std::size_t d_r = 8;   // low-rank width of each editing block
  std::size_t C = 2;     // editing blocks per slot shape
  std::size_t K = 0;     // slots edited per step; 0 means L/2
  double edit_lr = 1.0;  // initial per-slot edit step
  std::uint64_t seed = 3;

  std::size_t selected(std::size_t L) const { return K == 0 ? std::max<std::size_t>(1, L / 2) : K; }
  void validate(std::size_t L, std::size_t width) const;
  bool operator==(const EditorConfig&) const = default;
};

struct SlotShape {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t width() const { return d_in + d_out; }
  std::string key() const { return std::to_string(d_in) + "x" + std::to_string(d_out); }
};

SlotShape slot_shape(const LMConfig& lm, const EditSlot& s);

// φ lives in high(), θ in low(). Slots of identical shape share the
// gradient encoder and the low-rank blocks.
class Editor {
 public:
  Editor() = default;
  Editor(EditorConfig cfg, const LMConfig& lm, SlotRange range);

  const EditorConfig& config() const { return cfg_; }
  const LMConfig& lm_config() const { return lm_; }
  const SlotRange& range() const { return range_; }
  std::size_t L() const { return range_.size(); }
  std::size_t K() const { return cfg_.selected(L()); }
  SlotShape shape(std::size_t l) const { return slot_shape(lm_, range_.at(l)); }

  ParamStore& high() { return high_; }
  const ParamStore& high() const { return high_; }
  ParamStore& low() { return low_; }
  const ParamStore& low() const { return low_; }

  bool operator==(const Editor& o) const {
    return cfg_ == o.cfg_ && lm_ == o.lm_ && range_ == o.range_ && high_ == o.high_ && low_ == o.low_;
  }

 private:
  EditorConfig cfg_;
  LMConfig lm_;
  SlotRange range_;
  ParamStore high_;
  ParamStore low_;
};

Editor init_editor(const EditorConfig& cfg, const LMConfig& lm, const SlotRange& range);

// Tape handles for φ and θ.
struct EditorTensors {
  const Editor* editor = nullptr;
  BoundParams high;
  BoundParams low;
};

EditorTensors bind_editor(ad::Tape& tape, const Editor& e, bool train_high, bool train_low);

// h_l = scale_l ⊙ relu(W_enc·(u‖v)) + offset_l, with u [d_in], v [d_out].
ad::Tensor encode_layer(const EditorTensors& et, std::size_t l, const ad::Tensor& u, const ad::Tensor& v);

struct Routing {
  ad::Tensor z;     // [L] importance scores
  ad::Tensor mask;  // [L] hard 0/1, straight-through onto z
};

Routing route_importance(const EditorTensors& et, std::span<const ad::Tensor> h, std::size_t K);

struct PseudoFactors {
  ad::Tensor u;  // [P × d_in]
  ad::Tensor v;  // [P × d_out]
};

// Residual low-rank blocks applied row-wise to (U‖V), U [P × d_in], V [P × d_out].
PseudoFactors edit_network_forward(const EditorTensors& et, std::size_t l, const ad::Tensor& U, const ad::Tensor& V);

// −α_l · Σ_p outer(ṽ_p, ũ_p), shaped like the slot matrix [d_out × d_in].
ad::Tensor slot_update(const EditorTensors& et, std::size_t l, const PseudoFactors& pf);

void save_editor(const Editor& e, const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object());
Editor load_editor(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace hiedit
