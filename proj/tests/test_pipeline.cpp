#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"
#include "hiedit/pipeline.hpp"

using namespace hiedit;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(const fs::path& dir) {
  RunConfig c;
  c.lm.d_model = 16;
  c.lm.d_ff = 16;
  c.corpus.n_facts = 60;
  c.corpus.n_probe_facts = 20;
  c.pretrain.steps = 150;
  c.pretrain.lr = 2e-2;
  c.T = 8;
  c.t0 = 4;
  c.editor.d1 = 6;
  c.editor.d_r = 3;
  c.train.epochs = 2;
  c.train.window = 3;
  c.work_dir = dir;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::size_t line_count(const fs::path& p) {
  std::size_t n = 0;
  for (char c : read_file(p)) n += c == '\n';
  return n;
}

std::string missing_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DependencyError& e) {
    return e.missing();
  }
  return "";
}

}  // namespace

TEST_CASE("edit modes") {
  CHECK(all_edit_modes().size() == 7);
  for (EditMode m : all_edit_modes()) CHECK(parse_edit_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_edit_mode("hiedit"), ArgumentError);
  const TrainConfig base;
  const auto r = mode_train_config(base, EditMode::rledit);
  CHECK(r.select_mode == SelectMode::all);
  CHECK(r.reward_mode == RewardMode::none);
  CHECK_FALSE(mode_train_config(base, EditMode::no_rl).rl_training);
  CHECK(mode_train_config(base, EditMode::hiedit_rand).reward_mode == RewardMode::rand);
  CHECK(mode_train_config(base, EditMode::no_advantage).reward_mode == RewardMode::none);
  CHECK(mode_train_config(base, EditMode::random).select_mode == SelectMode::random);
  CHECK(mode_train_config(base, EditMode::gradnorm).select_mode == SelectMode::gradnorm);
  CHECK(mode_train_config(base, EditMode::hiedit_full) == base);
}

TEST_CASE("commands refuse to run without their inputs") {
  const auto cfg = small_run(fresh_dir("hiedit_pipe_missing"));
  const Artifacts a(cfg.work_dir);
  std::ostringstream log;
  CHECK(missing_of([&] { cmd_gen_stream(cfg, log); }) == a.base_model().string());
  CHECK(missing_of([&] { cmd_edit_run(cfg, EditMode::hiedit_full, log); }) ==
        a.editor(EditMode::hiedit_full).string());
  CHECK(missing_of([&] { cmd_report(cfg, log); }) == a.metrics().string());
  cmd_pretrain(cfg, log);
  CHECK(missing_of([&] { cmd_train_editor(cfg, EditMode::random, log); }) == a.train_stream().string());
  fs::remove_all(cfg.work_dir);
}

TEST_CASE("small pipeline end to end") {
  const auto cfg = small_run(fresh_dir("hiedit_pipe_e2e"));
  const Artifacts a(cfg.work_dir);
  std::ostringstream log;
  const auto pre = cmd_pretrain(cfg, log);
  CHECK(pre.loss.final_loss < pre.loss.initial_loss);
  CHECK(load_config(a.config()) == cfg);
  cmd_gen_stream(cfg, log);
  CHECK(load_stream(a.train_stream()).size() == cfg.T);
  CHECK(load_stream(a.eval_stream()).size() == cfg.T);
  CHECK_FALSE(load_stream(a.train_stream()) == load_stream(a.eval_stream()));

  for (EditMode m : {EditMode::hiedit_full, EditMode::rledit}) {
    const auto stats = cmd_train_editor(cfg, m, log);
    CHECK(stats.size() == cfg.train.epochs);
    CHECK(line_count(a.training_curve(m)) == cfg.train.epochs + 1);
    const auto res = cmd_edit_run(cfg, m, log);
    CHECK(res.steps.size() == cfg.T);
    const auto back = load_trajlog(a.trajlog(m));
    REQUIRE(back.size() == res.steps.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].mask == res.steps[i].mask);
      CHECK(back[i].loss == res.steps[i].loss);
    }
    CHECK(load_lm(a.final_model(m)) == res.final_model);
  }

  const auto rows = cmd_eval(cfg, cfg.t0, log);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "pre-edit");
  CHECK(rows[1].name == "hiedit-full");
  CHECK(rows[2].name == "rledit");
  for (const auto& r : rows) CHECK(r.report.edited_retention.n == 2 * cfg.t0);
  const auto first = read_file(a.metrics());
  cmd_eval(cfg, cfg.t0, log);
  CHECK(read_file(a.metrics()) == first);

  cmd_report(cfg, log);
  const auto rd = a.report_dir();
  CHECK(read_file(rd / "metrics.tsv").rfind("model\tmode\tEff\tGen\tSpe\tRet\tGenRet\n", 0) == 0);
  CHECK(line_count(rd / "metrics.tsv") == 4);
  CHECK(line_count(rd / "curves-hiedit-full.tsv") == cfg.T + 1);
  CHECK(line_count(rd / "curves-rledit.tsv") == cfg.T + 1);
  CHECK(line_count(rd / "mask_freq.tsv") == 4 + 1);
  CHECK(read_file(rd / "mask_freq.tsv").rfind("slot\thiedit-full\trledit\n", 0) == 0);
  CHECK_THROWS_AS(cmd_eval(cfg, cfg.T + 1, log), ArgumentError);

  // A changed model shape invalidates the stored base model.
  auto other = cfg;
  other.lm.d_ff = 24;
  CHECK_THROWS_AS(cmd_gen_stream(other, log), ValidationError);
  fs::remove_all(cfg.work_dir);
}

TEST_CASE("report directory must be writable") {
  const auto dir = fresh_dir("hiedit_pipe_blocked");
  fs::create_directories(dir);
  write_file_atomic(dir / "report", "a file, not a directory");
  CHECK_THROWS_AS(write_report({}, {}, default_slot_range(LMConfig{}), dir / "report"), IoError);
  fs::remove_all(dir);
}
