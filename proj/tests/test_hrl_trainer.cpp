#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fixtures.hpp"
#include "hiedit/error.hpp"
#include "hiedit/hrl_trainer.hpp"

using namespace hiedit;
using fixtures::active_editor;
using fixtures::noisy_weights;
using fixtures::tiny_lm;
using fixtures::tiny_stream;

namespace {

DecomposedGrad grads_with_norms(std::initializer_list<double> norms) {
  DecomposedGrad g;
  for (double n : norms) {
    SlotGrad s;
    s.positions = 1;
    s.d_in = 1;
    s.d_out = 1;
    s.u = s.u_mean = {1.0};
    s.v = s.v_mean = {n};
    g.slots.push_back(s);
  }
  return g;
}

std::vector<double> values(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<double> log_softmax(const std::vector<double>& l) {
  double mx = l[0];
  for (double x : l) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : l) s += std::exp(x - mx);
  std::vector<double> out;
  for (double x : l) out.push_back(x - mx - std::log(s));
  return out;
}

// −log p(y | x) + λ·KL(prev ‖ cur) on the probe, by explicit loops.
double fact_term(const LMWeights& cur, const LMWeights& prev, const FactRecord& r, double kl_weight) {
  const Tokens* x = &r.x;
  const Tokens* xt = &r.x_tilde;
  const auto lx = log_softmax(last_logits(cur, std::span<const Tokens>(x, 1))[0]);
  const auto lc = log_softmax(last_logits(cur, std::span<const Tokens>(xt, 1))[0]);
  const auto lp = log_softmax(last_logits(prev, std::span<const Tokens>(xt, 1))[0]);
  double kl = 0.0;
  for (std::size_t i = 0; i < lc.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lc[i]);
  return -lx[r.y] + kl_weight * kl;
}

double max_abs_diff(const LMWeights& a, const LMWeights& b) {
  double worst = 0.0;
  for (const auto& n : a.store().names()) {
    const auto& x = a.store().at(n).value;
    const auto& y = b.store().at(n).value;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  }
  return worst;
}

}  // namespace

TEST_CASE("mode names round trip") {
  for (auto m : {RewardMode::full, RewardMode::rand, RewardMode::none}) CHECK(parse_reward_mode(to_string(m)) == m);
  for (auto m : {SelectMode::hinet, SelectMode::random, SelectMode::gradnorm, SelectMode::all})
    CHECK(parse_select_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_reward_mode("partial"), ArgumentError);
  CHECK_THROWS_AS(parse_select_mode("best"), ArgumentError);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  auto bad = tc;
  bad.mu = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = tc;
  bad.gamma = 0.9;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = tc;
  bad.eta = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("select_layers fixed modes") {
  ad::Tape tape;
  std::mt19937_64 rng(1);
  const auto g = grads_with_norms({3, 1, 2, 5});
  CHECK(values(select_layers(tape, SelectMode::gradnorm, g, nullptr, 2, rng).mask) == std::vector<double>{1, 0, 0, 1});
  CHECK(values(select_layers(tape, SelectMode::all, g, nullptr, 2, rng).mask) == std::vector<double>{1, 1, 1, 1});

  std::mt19937_64 r1(42), r2(42);
  for (int i = 0; i < 10; ++i) {
    const auto a = values(select_layers(tape, SelectMode::random, g, nullptr, 2, r1).mask);
    const auto b = values(select_layers(tape, SelectMode::random, g, nullptr, 2, r2).mask);
    CHECK(a == b);
    CHECK(a[0] + a[1] + a[2] + a[3] == 2.0);
  }
  CHECK_THROWS_AS(select_layers(tape, SelectMode::hinet, g, nullptr, 2, rng), ArgumentError);
  CHECK_THROWS_AS(select_layers(tape, SelectMode::random, g, nullptr, 5, rng), ArgumentError);
  CHECK(select_layers(tape, SelectMode::gradnorm, g, nullptr, 2, rng).z.valid() == false);
}

TEST_CASE("select_layers hinet returns scores on the tape") {
  const auto lm = tiny_lm();
  const auto w = noisy_weights(lm, 2);
  const auto e = active_editor(lm);
  const auto s = tiny_stream(1, 5);
  const auto dg = capture_decomposed_grads(w, s.records[0].x, s.records[0].y, e.range());
  ad::Tape tape;
  auto et = bind_editor(tape, e, true, false);
  std::mt19937_64 rng(1);
  auto sel = select_layers(tape, SelectMode::hinet, dg, &et, 2, rng);
  REQUIRE(sel.z.valid());
  CHECK(sel.z.size() == 4);
  const auto m = values(sel.mask);
  CHECK(m[0] + m[1] + m[2] + m[3] == 2.0);
}

TEST_CASE("editing_loss reductions") {
  const auto lm = tiny_lm();
  const auto w = noisy_weights(lm, 3);
  const auto s = tiny_stream(3, 6);
  TrainConfig tc;
  tc.eta = 0.0;

  ad::Tape tape;
  auto cur = bind_weights(tape, w, Binding::constant);
  std::span<const FactRecord> one(&s.records[2], 1);
  auto lt = editing_loss(lm, cur, w, one, tape.scalar(0.0), tc);
  CHECK(lt.total.item() == doctest::Approx(lm_nll(lm, cur, s.records[2].x, s.records[2].y).item()).epsilon(1e-12));
  CHECK_FALSE(lt.window_empty);

  // Identical models: every KL term is exactly zero.
  auto full = editing_loss(lm, cur, w, s.records, tape.scalar(0.0), tc).total.item();
  tc.kl_weight = 0.0;
  CHECK(editing_loss(lm, cur, w, s.records, tape.scalar(0.0), tc).total.item() == doctest::Approx(full).epsilon(1e-13));

  tc.eta = 0.5;
  auto empty = editing_loss(lm, cur, w, {}, tape.scalar(3.0), tc);
  CHECK(empty.window_empty);
  CHECK(empty.total.item() == 1.5);
}

TEST_CASE("editing_loss matches explicit summation with backtracking") {
  const auto lm = tiny_lm();
  const auto prev = noisy_weights(lm, 4);
  const auto cur_w = noisy_weights(lm, 5);
  const auto s = tiny_stream(3, 7);
  TrainConfig tc;
  tc.eta = 0.3;
  tc.mu = 0.5;
  tc.kl_weight = 0.7;
  ad::Tape tape;
  auto cur = bind_weights(tape, cur_w, Binding::constant);
  const double sq = 2.25;
  const double got = editing_loss(lm, cur, prev, s.records, tape.scalar(sq), tc).total.item();
  // window = (t−2, t−1, t): weights 0.25, 0.5, 1.
  const double want = tc.eta * sq + fact_term(cur_w, prev, s.records[2], 0.7) +
                      0.5 * fact_term(cur_w, prev, s.records[1], 0.7) +
                      0.25 * fact_term(cur_w, prev, s.records[0], 0.7);
  CHECK(std::abs(got - want) <= 1e-12);
}

TEST_CASE("reward definitions") {
  CHECK(low_reward(2.5) == -2.5);
  CHECK(low_reward(0.0) == 0.0);
  CHECK(low_reward(1.0) > low_reward(2.0));
  CHECK(high_reward(1.7, 1.7, RewardMode::full) == 0.0);
  CHECK(high_reward(1.0, 1.4, RewardMode::full) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(high_reward(1.0, std::nullopt, RewardMode::rand, 1.25) == 0.25);
  CHECK(high_reward(3.0, std::nullopt, RewardMode::none) == low_reward(3.0));
  CHECK(high_reward(3.0, 9.0, RewardMode::none) == low_reward(3.0));
  CHECK_THROWS_AS(high_reward(1.0, std::nullopt, RewardMode::full), ArgumentError);
  CHECK_THROWS_AS(high_reward(1.0, 2.0, RewardMode::rand), ArgumentError);
}

TEST_CASE("edit_step contracts") {
  const auto lm = tiny_lm();
  const auto w = noisy_weights(lm, 8);
  const auto e = active_editor(lm);
  const auto s = tiny_stream(4, 9);
  for (auto rm : {RewardMode::full, RewardMode::rand, RewardMode::none}) {
    TrainConfig tc;
    tc.reward_mode = rm;
    EditState state{w, 0, {}};
    std::mt19937_64 rng(1);
    for (std::size_t t = 0; t < s.size(); ++t) {
      const LMWeights before = state.weights;
      ad::Tape tape;
      auto et = bind_editor(tape, e, false, false);
      auto out = edit_step(tape, state, s.records[t], et, tc, rng);
      CHECK(max_abs_diff(state.weights, before) == 0.0);  // counterfactual never touches the state
      CHECK(out.log.t == t);
      CHECK(out.log.r_low == -out.log.loss);
      CHECK(out.log.update_norms.size() == 4);
      CHECK(out.log.cf_loss.has_value() == (rm != RewardMode::none));
      for (std::size_t l = 0; l < 4; ++l) {
        const auto& slot = e.range()[l];
        const bool same = out.next.slot(slot).value == before.slot(slot).value;
        CHECK(same == (out.log.mask[l] == 0.0));
      }
      for (const auto& n : before.store().names()) {
        bool is_slot = false;
        for (const auto& slot : e.range()) is_slot |= slot_name(slot) == n;
        if (!is_slot) CHECK(out.next.store().at(n).value == before.store().at(n).value);
      }
      commit_step(state, std::move(out), s.records[t], tc);
      CHECK(state.t == t + 1);
    }
    CHECK(state.history.size() == s.size());
  }
}

TEST_CASE("all-slot selection gives a zero intrinsic reward") {
  const auto lm = tiny_lm();
  TrainConfig tc;
  tc.select_mode = SelectMode::all;
  tc.reward_mode = RewardMode::full;
  const auto r = run_trajectory(active_editor(lm), noisy_weights(lm, 10), tiny_stream(12, 11), tc);
  for (const auto& st : r.steps) CHECK(std::abs(st.r_high) == 0.0);
}

TEST_CASE("all-slot selection without reward reproduces the single-level pipeline") {
  const auto lm = tiny_lm();
  const auto e = active_editor(lm);
  const auto base = noisy_weights(lm, 12);
  const auto s = tiny_stream(15, 13);
  TrainConfig tc;
  tc.select_mode = SelectMode::all;
  tc.reward_mode = RewardMode::none;
  EditState state{base, 0, {}};
  LMWeights ref = base;
  std::mt19937_64 rng(tc.seed);
  for (const auto& rec : s.records) {
    ad::Tape tape;
    auto et = bind_editor(tape, e, false, false);
    auto out = edit_step(tape, state, rec, et, tc, rng);
    ref = single_level_step(e, ref, rec);
    CHECK(max_abs_diff(out.next, ref) == 0.0);
    commit_step(state, std::move(out), rec, tc);
  }
}

TEST_CASE("run_trajectory accounting and determinism") {
  const auto lm = tiny_lm();
  const auto e = active_editor(lm);
  const auto base = noisy_weights(lm, 14);
  const auto s = tiny_stream(10, 15);
  TrainConfig tc;
  const auto a = run_trajectory(e, base, s, tc);
  const auto b = run_trajectory(e, base, s, tc);
  CHECK(a == b);
  REQUIRE(a.steps.size() == s.size());
  double jl = 0.0, jh = 0.0;
  for (const auto& st : a.steps) {
    jl += st.r_low;
    jh += st.r_high;
  }
  CHECK(a.J_low == jl);
  CHECK(a.J_high == jh);
  tc.window = 0;
  const auto c = run_trajectory(e, base, s, tc);
  CHECK(c.steps.size() == s.size());
}

TEST_CASE("divergence aborts with the step index") {
  const auto lm = tiny_lm();
  auto e = active_editor(lm);
  for (std::size_t l = 0; l < e.L(); ++l) e.low().at("slot" + std::to_string(l) + ".lr").value[0] = 1e300;
  TrainConfig tc;
  try {
    run_trajectory(e, noisy_weights(lm, 16), tiny_stream(3, 17), tc);
    FAIL("expected a trajectory abort");
  } catch (const TrajectoryAbort& a) {
    CHECK(a.step() == 0);
  }
}

TEST_CASE("train_editor gradient scoping") {
  const auto lm = tiny_lm();
  const auto base = noisy_weights(lm, 18);
  const auto s = tiny_stream(6, 19);
  const auto e0 = active_editor(lm);
  TrainConfig tc;
  tc.epochs = 2;

  SUBCASE("frozen selector") {
    auto e = e0;
    tc.lr_high = 0.0;
    const auto stats = train_editor(e, base, s, tc);
    CHECK(stats.size() == 2);
    CHECK(e.high() == e0.high());
    CHECK(!(e.low() == e0.low()));
  }
  SUBCASE("frozen editing networks") {
    auto e = e0;
    tc.lr_low = 0.0;
    train_editor(e, base, s, tc);
    CHECK(e.low() == e0.low());
    CHECK(!(e.high() == e0.high()));
  }
  SUBCASE("fixed selection never trains the selector") {
    auto e = e0;
    tc.select_mode = SelectMode::all;
    train_editor(e, base, s, tc);
    CHECK(e.high() == e0.high());
  }
  SUBCASE("per-edit selector updates") {
    auto a = e0, b = e0;
    tc.epochs = 1;
    train_editor(a, base, s, tc);
    tc.rl_training = false;
    train_editor(b, base, s, tc);
    CHECK(!(a.high() == b.high()));
    CHECK(a.low() == b.low());  // θ sees the same trajectory in epoch 0
  }
  SUBCASE("determinism") {
    auto a = e0, b = e0;
    const auto sa = train_editor(a, base, s, tc);
    const auto sb = train_editor(b, base, s, tc);
    CHECK(a == b);
    CHECK(sa.back().J_low == sb.back().J_low);
  }
}

TEST_CASE("trajlog round trip") {
  const auto lm = tiny_lm();
  const auto r = run_trajectory(active_editor(lm), noisy_weights(lm, 20), tiny_stream(5, 21), TrainConfig{});
  const auto p = std::filesystem::temp_directory_path() / "hiedit_traj.log";
  save_trajlog(r.steps, p);
  const auto back = load_trajlog(p);
  REQUIRE(back.size() == r.steps.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].t == r.steps[i].t);
    CHECK(back[i].mask == r.steps[i].mask);
    CHECK(back[i].loss == r.steps[i].loss);
    CHECK(back[i].cf_loss == r.steps[i].cf_loss);
    CHECK(back[i].r_low == r.steps[i].r_low);
    CHECK(back[i].r_high == r.steps[i].r_high);
  }
  std::ofstream(p) << "trajlog-v1\nt\tmask\tloss\tcf_loss\tr_low\tr_high\n0\t1100\t1.0\t-\t-1.0\n";
  try {
    load_trajlog(p);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::filesystem::remove(p);
}
