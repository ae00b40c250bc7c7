#pragma once

// Editing metrics over a frozen model: per-record success on the edit prompt,
// its paraphrase and an unrelated probe, plus retention and slot-usage summaries.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hiedit/hrl_trainer.hpp"
#include "hiedit/knowledge_stream.hpp"
#include "hiedit/toy_lm.hpp"

namespace hiedit {

enum class MetricMode { top1, prob_compare };

std::string to_string(MetricMode m);
MetricMode parse_metric_mode(const std::string& s);

struct Score {
  std::size_t hits = 0;
  std::size_t n = 0;
  double value() const { return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0; }
  bool operator==(const Score&) const = default;
};

// top1: argmax at the last prompt position equals y (ties go to the lowest id).
// prob_compare: p(y | x) > p(y_prev | x).
Score efficacy(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode);
// As efficacy, prompting with x_bar.
Score generalization(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode);
// top1: argmax on x_tilde equals y_tilde. prob_compare: p(y_tilde | x_tilde) > p(y | x_tilde).
Score specificity(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode);
// Mean of efficacy and generalization over the first T0 records.
Score edited_retention(const LMWeights& w, const EditStream& stream, std::size_t T0, MetricMode mode);
// Top-1 accuracy on facts no edit touched.
Score general_retention(const LMWeights& w, std::span<const Example> heldout);

// frequency[l] = fraction of steps whose mask selected slot l.
std::vector<double> mask_frequency_report(std::span<const StepLog> logs);

struct MetricReport {
  MetricMode mode = MetricMode::top1;
  std::size_t t0 = 0;
  Score efficacy, generalization, specificity, edited_retention, general_retention;
  bool operator==(const MetricReport&) const = default;
};

MetricReport evaluate(const LMWeights& w, const EditStream& stream, std::span<const Example> heldout, std::size_t T0,
                      MetricMode mode);

struct NamedReport {
  std::string name;
  MetricReport report;
};

// "metrics-v1": `<row>.<field>=<value>` lines, one block per named report.
std::string format_metrics(std::span<const NamedReport> rows);
void save_metrics(std::span<const NamedReport> rows, const std::filesystem::path& path);
std::vector<NamedReport> load_metrics(const std::filesystem::path& path);

// Tab-separated Eff/Gen/Spe/Ret/GenRet table, one line per report.
std::string metrics_table(std::span<const NamedReport> rows);

}  // namespace hiedit
