#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "editor_fd.hpp"
#include "hiedit/error.hpp"
#include "hiedit/hypernets.hpp"

using namespace hiedit;

namespace {

LMConfig tiny_lm() {
  LMConfig c;
  c.vocab_size = 32;
  c.d_model = 6;
  c.d_ff = 10;
  c.n_blocks = 2;
  c.n_heads = 1;
  c.max_seq = 5;
  return c;
}

EditorConfig tiny_editor(std::uint64_t seed = 3) {
  EditorConfig c;
  c.d1 = 5;
  c.d_r = 3;
  c.C = 2;
  c.seed = seed;
  return c;
}

Editor make_editor(std::uint64_t seed = 3) {
  const auto lm = tiny_lm();
  return Editor(tiny_editor(seed), lm, default_slot_range(lm));
}

std::vector<double> values(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("init_editor is deterministic and follows the init contract") {
  const auto a = make_editor(9), b = make_editor(9), c = make_editor(10);
  CHECK(a == b);
  CHECK(!(a == c));
  CHECK(a.L() == 4);
  CHECK(a.K() == 2);
  const SlotShape s = a.shape(0);
  for (std::size_t k = 0; k < a.config().C; ++k) {
    for (double x : a.low().at(s.key() + ".B" + std::to_string(k)).value) CHECK(x == 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.width()));
    for (double x : a.low().at(s.key() + ".A" + std::to_string(k)).value) CHECK(std::abs(x) <= bound);
  }
  for (std::size_t l = 0; l < a.L(); ++l) {
    for (double x : a.high().at("spe." + std::to_string(l) + ".scale").value) CHECK(x == 1.0);
    for (double x : a.high().at("spe." + std::to_string(l) + ".offset").value) CHECK(x == 0.0);
  }
  CHECK(a.high().at("gate_net").shape == ad::Shape{4, 5 * 4});
}

TEST_CASE("editor config validation names the key") {
  const auto lm = tiny_lm();
  auto cfg = tiny_editor();
  cfg.K = 9;
  try {
    Editor(cfg, lm, default_slot_range(lm));
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.key() == "editor.K");
  }
  cfg = tiny_editor();
  cfg.d1 = 16;  // not below d_in + d_out
  CHECK_THROWS_AS(Editor(cfg, lm, default_slot_range(lm)), ValidationError);
}

TEST_CASE("edit network is the identity at init") {
  const auto e = make_editor();
  std::mt19937_64 rng(4);
  ad::Tape tape;
  auto et = bind_editor(tape, e, false, false);
  const auto s = e.shape(1);
  auto U = tape.constant({3, s.d_in}, fdcheck::random_values(rng, 3 * s.d_in));
  auto V = tape.constant({3, s.d_out}, fdcheck::random_values(rng, 3 * s.d_out));
  auto pf = edit_network_forward(et, 1, U, V);
  CHECK(values(pf.u) == values(U));
  CHECK(values(pf.v) == values(V));
  CHECK(pf.u.shape() == U.shape());
  CHECK(pf.v.shape() == V.shape());

  // At init the update is −edit_lr times the raw gradient Σ_p v_p u_pᵀ.
  auto upd = values(slot_update(et, 1, pf));
  const auto u = values(U), v = values(V);
  for (std::size_t o = 0; o < s.d_out; ++o)
    for (std::size_t i = 0; i < s.d_in; ++i) {
      double g = 0.0;
      for (std::size_t p = 0; p < 3; ++p) g += v[p * s.d_out + o] * u[p * s.d_in + i];
      CHECK(upd[o * s.d_in + i] == doctest::Approx(-e.config().edit_lr * g).epsilon(1e-12));
    }
}

TEST_CASE("slots of one shape share their blocks") {
  auto e = make_editor();
  std::mt19937_64 rng(5);
  const auto s = e.shape(0);
  const auto u = fdcheck::random_values(rng, 2 * s.d_in), v = fdcheck::random_values(rng, 2 * s.d_out);
  auto outputs = [&] {
    ad::Tape tape;
    auto et = bind_editor(tape, e, false, false);
    auto U = tape.constant({2, s.d_in}, u), V = tape.constant({2, s.d_out}, v);
    return std::pair{values(edit_network_forward(et, 0, U, V).u), values(edit_network_forward(et, 3, U, V).u)};
  };
  const auto before = outputs();
  CHECK(before.first == before.second);
  for (double& x : e.low().at(s.key() + ".B0").value) x = 0.3;
  const auto after = outputs();
  CHECK(after.first != before.first);
  CHECK(after.second != before.second);
  CHECK(after.first == after.second);
}

TEST_CASE("encode_layer contract") {
  auto e = make_editor();
  const auto s = e.shape(0);
  ad::Tape tape;
  auto et = bind_editor(tape, e, false, false);
  auto h = encode_layer(et, 0, tape.constant({s.d_in}, std::vector<double>(s.d_in, 0.0)),
                        tape.constant({s.d_out}, std::vector<double>(s.d_out, 0.0)));
  for (double x : h.values()) CHECK(x == 0.0);
  CHECK(h.shape() == ad::Shape{e.config().d1});
  CHECK_THROWS_AS(encode_layer(et, 0, tape.constant({s.d_in + 1}, std::vector<double>(s.d_in + 1, 0.0)),
                               tape.constant({s.d_out}, std::vector<double>(s.d_out, 0.0))),
                  DimensionError);
  CHECK_THROWS_AS(edit_network_forward(et, 0, tape.constant({2, s.d_in}, std::vector<double>(2 * s.d_in, 0.0)),
                                       tape.constant({3, s.d_out}, std::vector<double>(3 * s.d_out, 0.0))),
                  DimensionError);
}

TEST_CASE("route_importance masks and straight-through gradient") {
  auto e = make_editor();
  std::mt19937_64 rng(6);
  fdcheck::randomize(e.high(), rng);
  for (std::size_t K = 1; K <= e.L(); ++K) {
    ad::Tape tape;
    auto et = bind_editor(tape, e, true, false);
    std::vector<ad::Tensor> h;
    for (std::size_t l = 0; l < e.L(); ++l) h.push_back(tape.constant({e.config().d1}, fdcheck::random_values(rng, e.config().d1)));
    auto r = route_importance(et, h, K);
    const auto m = values(r.mask);
    CHECK(std::accumulate(m.begin(), m.end(), 0.0) == static_cast<double>(K));
    for (double x : m) CHECK((x == 0.0 || x == 1.0));
    if (K == e.L())
      for (double x : m) CHECK(x == 1.0);

    // J = Σ_l m_l·c_l gives dJ/dz = c through the straight-through path.
    const std::vector<double> c{1.5, -2.0, 0.25, 3.0};
    auto J = ad::sum(ad::hadamard(r.mask, tape.constant({4}, c)));
    tape.backward(J);
    const auto gz = r.z.grad();
    for (std::size_t l = 0; l < 4; ++l) CHECK(gz[l] == doctest::Approx(c[l]).epsilon(1e-12));
  }
  ad::Tape tape;
  auto et = bind_editor(tape, e, false, false);
  std::vector<ad::Tensor> h(e.L(), tape.constant({e.config().d1}, std::vector<double>(e.config().d1, 1.0)));
  CHECK_THROWS(route_importance(et, h, 0));
  CHECK_THROWS(route_importance(et, h, 5));
  h.pop_back();
  CHECK_THROWS_AS(route_importance(et, h, 2), DimensionError);
}

TEST_CASE("importance scores are not constant at init") {
  const auto e = make_editor();
  std::mt19937_64 rng(7);
  const auto s = e.shape(0);
  double sum_sd = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ad::Tape tape;
    auto et = bind_editor(tape, e, false, false);
    std::vector<ad::Tensor> h;
    for (std::size_t l = 0; l < e.L(); ++l)
      h.push_back(encode_layer(et, l, tape.constant({s.d_in}, fdcheck::random_values(rng, s.d_in)),
                               tape.constant({s.d_out}, fdcheck::random_values(rng, s.d_out))));
    const auto z = values(route_importance(et, h, 2).z);
    const double mean = std::accumulate(z.begin(), z.end(), 0.0) / z.size();
    double var = 0.0;
    for (double x : z) var += (x - mean) * (x - mean);
    sum_sd += std::sqrt(var / z.size());
  }
  CHECK(sum_sd / 100.0 > 0.0);
}

TEST_CASE("hypernetwork gradients match finite differences") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    auto e = make_editor(20 + trial);
    fdcheck::randomize(e.high(), rng);
    fdcheck::randomize(e.low(), rng);
    const auto s = e.shape(0);
    const auto u1 = fdcheck::random_values(rng, s.d_in), v1 = fdcheck::random_values(rng, s.d_out);
    const auto U = fdcheck::random_values(rng, 3 * s.d_in), V = fdcheck::random_values(rng, 3 * s.d_out);
    const std::uint64_t wseed = 100 + trial;

    fdcheck::EditorProgram enc = [&](ad::Tape& tape, const EditorTensors& et) {
      std::vector<ad::Tensor> h;
      for (std::size_t l = 0; l < e.L(); ++l)
        h.push_back(encode_layer(et, l, tape.constant({s.d_in}, u1), tape.constant({s.d_out}, v1)));
      return fdcheck::weighted_sum(tape, route_importance(et, h, 2).z, wseed);
    };
    const std::string enc_name = "enc." + s.key();
    CHECK(fdcheck::editor_param_error(e, true, enc_name, enc) <= 1e-5);
    CHECK(fdcheck::editor_param_error(e, true, "gate_net", enc) <= 1e-5);
    CHECK(fdcheck::editor_param_error(e, true, "spe.2.scale", enc) <= 1e-5);

    fdcheck::EditorProgram low = [&](ad::Tape& tape, const EditorTensors& et) {
      auto pf = edit_network_forward(et, 2, tape.constant({3, s.d_in}, U), tape.constant({3, s.d_out}, V));
      return fdcheck::weighted_sum(tape, slot_update(et, 2, pf), wseed);
    };
    for (const char* n : {"A0", "B0", "A1", "B1"}) CHECK(fdcheck::editor_param_error(e, false, s.key() + "." + n, low) <= 1e-5);
    CHECK(fdcheck::editor_param_error(e, false, "slot2.spe0.offset", low) <= 1e-5);
    CHECK(fdcheck::editor_param_error(e, false, "slot2.lr", low) <= 1e-5);
  }
}

TEST_CASE("editor checkpoint round trip") {
  auto e = make_editor();
  std::mt19937_64 rng(11);
  fdcheck::randomize(e.low(), rng);
  const auto p = std::filesystem::temp_directory_path() / "hiedit_editor_rt.ckpt";
  save_editor(e, p, {{"note", "x"}});
  nlohmann::json extra;
  const auto back = load_editor(p, &extra);
  CHECK(back == e);
  CHECK(extra.at("note") == "x");
  std::filesystem::remove(p);
}
