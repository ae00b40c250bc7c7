#include "hiedit/pipeline.hpp"

#include <cstdio>
#include <system_error>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"

namespace hiedit {

namespace fs = std::filesystem;

namespace {

struct ModeEntry {
  EditMode mode;
  const char* name;
};

constexpr ModeEntry kModes[] = {
    {EditMode::hiedit_full, "hiedit-full"}, {EditMode::hiedit_rand, "hiedit-rand"},
    {EditMode::no_advantage, "no-advantage"}, {EditMode::no_rl, "no-rl"},
    {EditMode::rledit, "rledit"}, {EditMode::gradnorm, "gradnorm"},
    {EditMode::random, "random"},
};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void require(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p))
    throw DependencyError(p.string(), "missing " + p.string() + " (run `" + produced_by + "` first)");
}

void ensure_dir(const fs::path& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec || !fs::is_directory(d)) throw IoError("cannot create directory " + d.string());
}

LMWeights base_model(const RunConfig& cfg) {
  const Artifacts a(cfg.work_dir);
  require(a.base_model(), "pretrain");
  LMWeights w = load_lm(a.base_model());
  if (!(w.config() == cfg.lm))
    throw ValidationError("lm", a.base_model().string() + " was trained with a different model configuration");
  return w;
}

EditStream stream_at(const fs::path& p) {
  require(p, "gen-stream");
  return load_stream(p);
}

std::string curves_tsv(const std::vector<StepLog>& logs) {
  std::string out = "t\tloss\tcf_loss\tr_low\tr_high\tselected\n";
  for (const auto& s : logs) {
    std::string sel;
    for (std::size_t l = 0; l < s.mask.size(); ++l)
      if (s.mask[l] != 0.0) sel += (sel.empty() ? "" : ",") + std::to_string(l);
    out += std::to_string(s.t) + "\t" + num(s.loss) + "\t" + (s.cf_loss ? num(*s.cf_loss) : "nan") + "\t" +
           num(s.r_low) + "\t" + num(s.r_high) + "\t" + sel + "\n";
  }
  return out;
}

}  // namespace

std::string to_string(EditMode m) {
  for (const auto& e : kModes)
    if (e.mode == m) return e.name;
  throw ArgumentError("unknown edit mode");
}

EditMode parse_edit_mode(const std::string& s) {
  for (const auto& e : kModes)
    if (s == e.name) return e.mode;
  throw ArgumentError("unknown edit mode '" + s + "'");
}

const std::vector<EditMode>& all_edit_modes() {
  static const std::vector<EditMode> v = [] {
    std::vector<EditMode> r;
    for (const auto& e : kModes) r.push_back(e.mode);
    return r;
  }();
  return v;
}

TrainConfig mode_train_config(TrainConfig t, EditMode m) {
  t.select_mode = SelectMode::hinet;
  t.reward_mode = RewardMode::full;
  t.rl_training = true;
  switch (m) {
    case EditMode::hiedit_full: break;
    case EditMode::hiedit_rand: t.reward_mode = RewardMode::rand; break;
    case EditMode::no_advantage: t.reward_mode = RewardMode::none; break;
    case EditMode::no_rl: t.rl_training = false; break;
    case EditMode::rledit:
      t.select_mode = SelectMode::all;
      t.reward_mode = RewardMode::none;
      break;
    case EditMode::gradnorm: t.select_mode = SelectMode::gradnorm; break;
    case EditMode::random: t.select_mode = SelectMode::random; break;
  }
  return t;
}

double corpus_accuracy(const LMWeights& w, const KnowledgeCorpus& corpus) {
  const auto ex = corpus.examples(true);
  if (ex.empty()) throw ArgumentError("empty corpus");
  std::vector<Tokens> prompts;
  prompts.reserve(ex.size());
  for (const auto& e : ex) prompts.push_back(e.prompt);
  const auto pred = predict(w, prompts);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ex.size(); ++i) hits += pred[i] == ex[i].target;
  return static_cast<double>(hits) / static_cast<double>(ex.size());
}

PretrainSummary cmd_pretrain(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  ensure_dir(a.dir);
  write_file_atomic(a.config(), format_config(cfg));
  const auto corpus = make_pretrain_corpus(cfg.corpus);
  LMWeights w(cfg.lm);
  PretrainSummary s;
  s.loss = pretrain(w, corpus.examples(true), cfg.pretrain);
  s.accuracy = corpus_accuracy(w, corpus);
  save_lm(w, a.base_model());
  log << "pretrain loss " << num(s.loss.initial_loss) << " -> " << num(s.loss.final_loss) << " accuracy "
      << num(s.accuracy) << "\n";
  return s;
}

void cmd_gen_stream(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  const auto base = base_model(cfg);
  const auto ok = probe_check_for(base);
  const auto train = synth_stream(cfg.train_stream_spec(), ok);
  const auto eval = synth_stream(cfg.eval_stream_spec(), ok);
  save_stream(train, a.train_stream());
  save_stream(eval, a.eval_stream());
  log << "streams " << train.size() << " train / " << eval.size() << " eval edits\n";
}

std::vector<EpochStats> cmd_train_editor(const RunConfig& cfg, EditMode mode, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  const auto base = base_model(cfg);
  const auto stream = stream_at(a.train_stream());
  const auto tc = mode_train_config(cfg.train_config(), mode);
  Editor editor = init_editor(cfg.editor_config(), cfg.lm, default_slot_range(cfg.lm));
  std::string curve = "epoch\tJ_high\tJ_low\tgrad_norm_high\tgrad_norm_low\n";
  const auto stats = train_editor(editor, base, stream, tc, [&](const EpochStats& e) {
    curve += std::to_string(e.epoch) + "\t" + num(e.J_high) + "\t" + num(e.J_low) + "\t" + num(e.grad_norm_high) +
             "\t" + num(e.grad_norm_low) + "\n";
    log << to_string(mode) << " epoch " << e.epoch << " J_low " << num(e.J_low) << " J_high " << num(e.J_high)
        << "\n";
  });
  save_editor(editor, a.editor(mode), {{"mode", to_string(mode)}, {"epochs", tc.epochs}});
  write_file_atomic(a.training_curve(mode), curve);
  return stats;
}

TrajectoryResult cmd_edit_run(const RunConfig& cfg, EditMode mode, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  require(a.editor(mode), "train-editor --mode " + to_string(mode));
  const auto stream = stream_at(a.eval_stream());
  const auto base = base_model(cfg);
  const Editor editor = load_editor(a.editor(mode));
  if (!(editor.lm_config() == cfg.lm))
    throw ValidationError("lm", a.editor(mode).string() + " targets a different model configuration");
  auto res = run_trajectory(editor, base, stream, mode_train_config(cfg.train_config(), mode));
  ensure_dir(a.run_dir(mode));
  save_trajlog(res.steps, a.trajlog(mode));
  save_lm(res.final_model, a.final_model(mode));
  log << to_string(mode) << " edit-run " << res.steps.size() << " edits J_low " << num(res.J_low) << "\n";
  return res;
}

std::vector<NamedReport> cmd_eval(const RunConfig& cfg, std::size_t t0, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  const auto base = base_model(cfg);
  const auto stream = stream_at(a.eval_stream());
  const auto held = heldout_facts(make_pretrain_corpus(cfg.corpus), stream);
  std::vector<NamedReport> rows{{"pre-edit", evaluate(base, stream, held, t0, cfg.metric_mode)}};
  for (EditMode m : all_edit_modes()) {
    if (!fs::exists(a.final_model(m))) continue;
    rows.push_back({to_string(m), evaluate(load_lm(a.final_model(m)), stream, held, t0, cfg.metric_mode)});
  }
  save_metrics(rows, a.metrics());
  log << metrics_table(rows);
  return rows;
}

void cmd_report(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Artifacts a(cfg.work_dir);
  require(a.metrics(), "eval");
  const auto rows = load_metrics(a.metrics());
  std::map<std::string, std::vector<StepLog>> logs;
  for (EditMode m : all_edit_modes())
    if (fs::exists(a.trajlog(m))) logs[to_string(m)] = load_trajlog(a.trajlog(m));
  write_report(logs, rows, default_slot_range(cfg.lm), a.report_dir());
  log << "report written to " << a.report_dir().string() << "\n";
}

void write_report(const std::map<std::string, std::vector<StepLog>>& logs, std::span<const NamedReport> reports,
                  const SlotRange& range, const fs::path& out_dir) {
  ensure_dir(out_dir);
  write_file_atomic(out_dir / "metrics.tsv", metrics_table(reports));

  std::vector<std::vector<double>> freq;
  std::string header = "slot";
  for (const auto& [name, steps] : logs) {
    write_file_atomic(out_dir / ("curves-" + name + ".tsv"), curves_tsv(steps));
    header += "\t" + name;
    auto f = mask_frequency_report(steps);
    if (f.size() != range.size())
      throw DimensionError("trajectory log of " + name + " has " + std::to_string(f.size()) + " slots, expected " +
                           std::to_string(range.size()));
    freq.push_back(std::move(f));
  }
  std::string table = header + "\n";
  for (std::size_t l = 0; l < range.size(); ++l) {
    table += slot_name(range[l]);
    for (const auto& f : freq) table += "\t" + num(f[l]);
    table += "\n";
  }
  write_file_atomic(out_dir / "mask_freq.tsv", table);
}

}  // namespace hiedit
