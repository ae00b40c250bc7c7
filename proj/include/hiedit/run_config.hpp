#pragma once

// Experiment configuration: a flat `section.key = value` text format with
// command-line overrides, validated as a whole before any work starts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hiedit/eval_metrics.hpp"
#include "hiedit/hrl_trainer.hpp"
#include "hiedit/hypernets.hpp"
#include "hiedit/knowledge_stream.hpp"
#include "hiedit/toy_lm.hpp"

namespace hiedit {

struct RunConfig {
  LMConfig lm;
  CorpusSpec corpus;
  PretrainOptions pretrain;
  std::size_t T = 200;
  std::uint64_t train_stream_seed = 101;
  std::uint64_t eval_stream_seed = 202;
  EditorConfig editor;
  TrainConfig train;
  std::size_t t0 = 50;
  MetricMode metric_mode = MetricMode::top1;
  std::filesystem::path work_dir = "hiedit_run";
  // Added to the editor, trainer and stream seeds; the base model and
  // corpus stay fixed so that seeds share one pretrained model.
  std::uint64_t seed = 0;

  RunConfig();

  // Cross-field checks; throws ValidationError naming the offending key.
  void validate() const;

  StreamSpec train_stream_spec() const;
  StreamSpec eval_stream_spec() const;
  EditorConfig editor_config() const;
  TrainConfig train_config() const;

  bool operator==(const RunConfig&) const = default;
};

// Sets one dotted key from its text value. Unknown keys and malformed
// values raise ValidationError naming the key.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// `key=value` as given on the command line.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Lines of `key = value`; blank lines and `#` comments are skipped.
// Syntax errors raise ParseError with the line number.
RunConfig parse_config_text(const std::string& text, const RunConfig& base = RunConfig{});
RunConfig load_config(const std::filesystem::path& path);

// Every key with its current value, one `key = value` line each, in a fixed order.
std::string format_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace hiedit
