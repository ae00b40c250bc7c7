#include "hiedit/hypernets.hpp"

#include <cmath>
#include <random>
#include <set>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"

namespace hiedit {

void EditorConfig::validate(std::size_t L, std::size_t width) const {
  if (d1 < 1 || d1 >= width) throw ValidationError("editor.d1", "must lie in [1, " + std::to_string(width) + ")");
  if (d_r < 1 || d_r >= width) throw ValidationError("editor.d_r", "must lie in [1, " + std::to_string(width) + ")");
  if (C < 1) throw ValidationError("editor.C", "must be >= 1");
  const std::size_t k = selected(L);
  if (k < 1 || k > L)
    throw ValidationError("editor.K", "K=" + std::to_string(k) + " outside [1, L=" + std::to_string(L) + "]");
  if (!std::isfinite(edit_lr)) throw ValidationError("editor.edit_lr", "must be finite");
}

SlotShape slot_shape(const LMConfig& lm, const EditSlot&) { return {lm.d_model, lm.d_ff}; }

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, std::size_t fan_in) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-b, b);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::string enc_name(const SlotShape& s) { return "enc." + s.key(); }
std::string spe_name(std::size_t l, const char* leaf) { return "spe." + std::to_string(l) + "." + leaf; }
std::string a_name(const SlotShape& s, std::size_t c) { return s.key() + ".A" + std::to_string(c); }
std::string b_name(const SlotShape& s, std::size_t c) { return s.key() + ".B" + std::to_string(c); }
std::string block_spe(std::size_t l, std::size_t c, const char* leaf) {
  return "slot" + std::to_string(l) + ".spe" + std::to_string(c) + "." + leaf;
}
std::string lr_name(std::size_t l) { return "slot" + std::to_string(l) + ".lr"; }

}  // namespace

Editor::Editor(EditorConfig cfg, const LMConfig& lm, SlotRange range) : cfg_(cfg), lm_(lm), range_(std::move(range)) {
  validate_slot_range(lm_, range_);
  const std::size_t L = range_.size();
  std::mt19937_64 rng(cfg_.seed);
  std::set<std::string> shapes;
  for (std::size_t l = 0; l < L; ++l) {
    const SlotShape s = shape(l);
    cfg_.validate(L, s.width());
    if (!shapes.insert(s.key()).second) continue;
    high_.add(enc_name(s), {cfg_.d1, s.width()}, uniform(rng, cfg_.d1 * s.width(), s.width()));
    for (std::size_t c = 0; c < cfg_.C; ++c) {
      low_.add(a_name(s, c), {cfg_.d_r, s.width()}, uniform(rng, cfg_.d_r * s.width(), s.width()));
      low_.add_zeros(b_name(s, c), {s.width(), cfg_.d_r});
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    high_.add(spe_name(l, "scale"), {cfg_.d1}, std::vector<double>(cfg_.d1, 1.0));
    high_.add_zeros(spe_name(l, "offset"), {cfg_.d1});
  }
  high_.add("gate_net", {L, cfg_.d1 * L}, uniform(rng, L * cfg_.d1 * L, cfg_.d1 * L));
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t D = shape(l).width();
    for (std::size_t c = 0; c < cfg_.C; ++c) {
      low_.add(block_spe(l, c, "scale"), {D}, std::vector<double>(D, 1.0));
      low_.add_zeros(block_spe(l, c, "offset"), {D});
    }
    low_.add(lr_name(l), {1}, {cfg_.edit_lr});
  }
}

Editor init_editor(const EditorConfig& cfg, const LMConfig& lm, const SlotRange& range) { return Editor(cfg, lm, range); }

EditorTensors bind_editor(ad::Tape& tape, const Editor& e, bool train_high, bool train_low) {
  return {&e, BoundParams(tape, e.high(), train_high), BoundParams(tape, e.low(), train_low)};
}

ad::Tensor encode_layer(const EditorTensors& et, std::size_t l, const ad::Tensor& u, const ad::Tensor& v) {
  const Editor& e = *et.editor;
  if (l >= e.L()) throw IndexError("encode_layer: slot " + std::to_string(l) + " out of range");
  const SlotShape s = e.shape(l);
  if (u.rank() != 1 || v.rank() != 1 || u.size() != s.d_in || v.size() != s.d_out)
    throw DimensionError("encode_layer: expected u[" + std::to_string(s.d_in) + "] and v[" + std::to_string(s.d_out) +
                         "], got " + ad::shape_str(u.shape()) + " and " + ad::shape_str(v.shape()));
  const ad::Tensor parts[] = {u, v};
  ad::Tensor x = ad::reshape(ad::concat(parts), {1, s.width()});
  ad::Tensor h = ad::relu(ad::matmul_bt(x, et.high[enc_name(s)]));
  h = ad::affine_rows(h, et.high[spe_name(l, "scale")], et.high[spe_name(l, "offset")]);
  return ad::reshape(h, {e.config().d1});
}

Routing route_importance(const EditorTensors& et, std::span<const ad::Tensor> h, std::size_t K) {
  const Editor& e = *et.editor;
  if (h.size() != e.L())
    throw DimensionError("route_importance: expected " + std::to_string(e.L()) + " slot features, got " +
                         std::to_string(h.size()));
  ad::Tensor cat = ad::reshape(ad::concat(h), {1, e.config().d1 * e.L()});
  Routing r;
  r.z = ad::reshape(ad::matmul_bt(cat, et.high["gate_net"]), {e.L()});
  r.mask = ad::topk_mask_st(r.z, K);
  return r;
}

PseudoFactors edit_network_forward(const EditorTensors& et, std::size_t l, const ad::Tensor& U, const ad::Tensor& V) {
  const Editor& e = *et.editor;
  if (l >= e.L()) throw IndexError("edit_network_forward: slot " + std::to_string(l) + " out of range");
  const SlotShape s = e.shape(l);
  if (U.rank() != 2 || V.rank() != 2 || U.cols() != s.d_in || V.cols() != s.d_out || U.rows() != V.rows())
    throw DimensionError("edit_network_forward: expected U[P×" + std::to_string(s.d_in) + "] and V[P×" +
                         std::to_string(s.d_out) + "], got " + ad::shape_str(U.shape()) + " and " +
                         ad::shape_str(V.shape()));
  ad::Tensor h = ad::concat_cols(U, V);
  for (std::size_t c = 0; c < e.config().C; ++c) {
    ad::Tensor inner = ad::matmul_bt(ad::matmul_bt(h, et.low[a_name(s, c)]), et.low[b_name(s, c)]);
    ad::Tensor out = ad::affine_rows(ad::relu(inner), et.low[block_spe(l, c, "scale")], et.low[block_spe(l, c, "offset")]);
    h = ad::add(h, out);
  }
  return {ad::slice_cols(h, 0, s.d_in), ad::slice_cols(h, s.d_in, s.width())};
}

ad::Tensor slot_update(const EditorTensors& et, std::size_t l, const PseudoFactors& pf) {
  ad::Tensor sum_outer = ad::matmul(ad::transpose(pf.v), pf.u);
  return ad::scale(ad::scale(sum_outer, et.low[lr_name(l)]), -1.0);
}

namespace {

nlohmann::json editor_json(const Editor& e) {
  const auto& c = e.config();
  const auto& m = e.lm_config();
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : e.range()) slots.push_back(slot_name(s));
  return {{"d1", c.d1},
          {"d_r", c.d_r},
          {"C", c.C},
          {"K", c.K},
          {"edit_lr", c.edit_lr},
          {"seed", c.seed},
          {"lm", {{"vocab_size", m.vocab_size}, {"d_model", m.d_model}, {"d_ff", m.d_ff}, {"n_blocks", m.n_blocks},
                  {"n_heads", m.n_heads}, {"max_seq", m.max_seq}, {"seed", m.seed}}},
          {"slots", slots}};
}

EditSlot parse_slot(const std::string& name) {
  const auto dot = name.find('.');
  if (name.empty() || name[0] != 'b' || dot == std::string::npos) throw ParseError(2, "bad slot name '" + name + "'");
  EditSlot s;
  s.block = std::stoul(name.substr(1, dot - 1));
  const std::string kind = name.substr(dot + 1);
  if (kind == "gate") s.kind = MatrixKind::gate;
  else if (kind == "up") s.kind = MatrixKind::up;
  else throw ParseError(2, "bad slot kind in '" + name + "'");
  return s;
}

}  // namespace

void save_editor(const Editor& e, const std::filesystem::path& path, const nlohmann::json& extra) {
  ParamStore arrays;
  for (const auto& n : e.high().names()) arrays.add("high/" + n, e.high().at(n).shape, e.high().at(n).value);
  for (const auto& n : e.low().names()) arrays.add("low/" + n, e.low().at(n).shape, e.low().at(n).value);
  nlohmann::json cfg = editor_json(e);
  cfg["extra"] = extra;
  save_container(path, Container{"editor-v1", cfg, arrays});
}

Editor load_editor(const std::filesystem::path& path, nlohmann::json* extra) {
  Container c = load_container(path, "editor-v1");
  EditorConfig ec;
  LMConfig lm;
  SlotRange range;
  try {
    const auto& j = c.config;
    ec.d1 = j.at("d1");
    ec.d_r = j.at("d_r");
    ec.C = j.at("C");
    ec.K = j.at("K");
    ec.edit_lr = j.at("edit_lr");
    ec.seed = j.at("seed");
    const auto& m = j.at("lm");
    lm.vocab_size = m.at("vocab_size");
    lm.d_model = m.at("d_model");
    lm.d_ff = m.at("d_ff");
    lm.n_blocks = m.at("n_blocks");
    lm.n_heads = m.at("n_heads");
    lm.max_seq = m.at("max_seq");
    lm.seed = m.at("seed");
    for (const auto& s : j.at("slots")) range.push_back(parse_slot(s.get<std::string>()));
    if (extra) *extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(2, path.string() + ": incomplete editor config: " + ex.what());
  }
  Editor e(ec, lm, range);
  auto fill = [&](ParamStore& store, const std::string& prefix) {
    for (const auto& n : store.names()) {
      const std::string key = prefix + n;
      if (!c.arrays.contains(key)) throw ParseError(2, path.string() + ": missing array '" + key + "'");
      const Param& p = c.arrays.at(key);
      if (p.shape != store.at(n).shape) throw ParseError(2, path.string() + ": array '" + key + "' has wrong shape");
      store.at(n).value = p.value;
    }
  };
  fill(e.high(), "high/");
  fill(e.low(), "low/");
  if (c.arrays.size() != e.high().size() + e.low().size())
    throw ParseError(2, path.string() + ": unexpected extra arrays");
  return e;
}

}  // namespace hiedit
