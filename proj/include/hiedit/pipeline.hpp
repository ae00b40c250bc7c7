#pragma once

// The pretrain → gen-stream → train-editor → edit-run → eval → report
// pipeline. Every command reads and writes fixed file names under the
// configured work directory and fails with DependencyError when an input
// artifact is missing.

#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hiedit/eval_metrics.hpp"
#include "hiedit/hrl_trainer.hpp"
#include "hiedit/run_config.hpp"

namespace hiedit {

enum class EditMode { hiedit_full, hiedit_rand, no_advantage, no_rl, rledit, gradnorm, random };

std::string to_string(EditMode m);
EditMode parse_edit_mode(const std::string& s);
const std::vector<EditMode>& all_edit_modes();

// The trainer settings a mode implies on top of `base`.
TrainConfig mode_train_config(TrainConfig base, EditMode m);

struct Artifacts {
  std::filesystem::path dir;

  explicit Artifacts(std::filesystem::path work_dir) : dir(std::move(work_dir)) {}
  std::filesystem::path config() const { return dir / "config.txt"; }
  std::filesystem::path base_model() const { return dir / "base.toylm"; }
  std::filesystem::path train_stream() const { return dir / "train.stream"; }
  std::filesystem::path eval_stream() const { return dir / "eval.stream"; }
  std::filesystem::path editor(EditMode m) const { return dir / ("editor-" + to_string(m) + ".ckpt"); }
  std::filesystem::path training_curve(EditMode m) const { return dir / ("train-" + to_string(m) + ".tsv"); }
  std::filesystem::path run_dir(EditMode m) const { return dir / "runs" / to_string(m); }
  std::filesystem::path trajlog(EditMode m) const { return run_dir(m) / "traj.log"; }
  std::filesystem::path final_model(EditMode m) const { return run_dir(m) / "final.toylm"; }
  std::filesystem::path metrics() const { return dir / "metrics.txt"; }
  std::filesystem::path report_dir() const { return dir / "report"; }
};

struct PretrainSummary {
  PretrainResult loss;
  double accuracy = 0.0;  // top-1 over every corpus prompt and paraphrase
};

PretrainSummary cmd_pretrain(const RunConfig& cfg, std::ostream& log);
void cmd_gen_stream(const RunConfig& cfg, std::ostream& log);
std::vector<EpochStats> cmd_train_editor(const RunConfig& cfg, EditMode mode, std::ostream& log);
TrajectoryResult cmd_edit_run(const RunConfig& cfg, EditMode mode, std::ostream& log);
// Rows: "pre-edit" for the base model, then every edit-run present, in mode order.
std::vector<NamedReport> cmd_eval(const RunConfig& cfg, std::size_t t0, std::ostream& log);
void cmd_report(const RunConfig& cfg, std::ostream& log);

// metrics.tsv (one row per report), curves-<name>.tsv (one row per step)
// and mask_freq.tsv (one row per slot, one column per run).
void write_report(const std::map<std::string, std::vector<StepLog>>& logs, std::span<const NamedReport> reports,
                  const SlotRange& range, const std::filesystem::path& out_dir);

// Corpus facts (prompts and paraphrases) the model answers top-1 correctly.
double corpus_accuracy(const LMWeights& w, const KnowledgeCorpus& corpus);

}  // namespace hiedit
