#include "hiedit/eval_metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"

namespace hiedit {

std::string to_string(MetricMode m) { return m == MetricMode::top1 ? "top1" : "prob-compare"; }

MetricMode parse_metric_mode(const std::string& s) {
  if (s == "top1") return MetricMode::top1;
  if (s == "prob-compare") return MetricMode::prob_compare;
  throw ArgumentError("unknown metric mode '" + s + "'");
}

namespace {

// Counts prompts whose last-position logits favour `want`: as the argmax in
// top1 mode, or over `against` in prob_compare mode.
Score judge(const LMWeights& w, const std::vector<Tokens>& prompts, const std::vector<Token>& want,
            const std::vector<Token>& against, MetricMode mode) {
  Score s;
  s.n = prompts.size();
  if (s.n == 0) throw ArgumentError("metric over an empty fact set");
  const auto logits = last_logits(w, prompts);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& l = logits[i];
    if (mode == MetricMode::top1) {
      const auto best = static_cast<Token>(std::max_element(l.begin(), l.end()) - l.begin());
      s.hits += best == want[i];
    } else {
      s.hits += l.at(want[i]) > l.at(against[i]);
    }
  }
  return s;
}

}  // namespace

Score efficacy(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode) {
  std::vector<Tokens> p;
  std::vector<Token> y, prev;
  for (const auto& f : facts) {
    p.push_back(f.x);
    y.push_back(f.y);
    prev.push_back(f.y_prev);
  }
  return judge(w, p, y, prev, mode);
}

Score generalization(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode) {
  std::vector<Tokens> p;
  std::vector<Token> y, prev;
  for (const auto& f : facts) {
    p.push_back(f.x_bar);
    y.push_back(f.y);
    prev.push_back(f.y_prev);
  }
  return judge(w, p, y, prev, mode);
}

Score specificity(const LMWeights& w, std::span<const FactRecord> facts, MetricMode mode) {
  std::vector<Tokens> p;
  std::vector<Token> yt, y;
  for (const auto& f : facts) {
    p.push_back(f.x_tilde);
    yt.push_back(f.y_tilde);
    y.push_back(f.y);
  }
  return judge(w, p, yt, y, mode);
}

Score edited_retention(const LMWeights& w, const EditStream& stream, std::size_t T0, MetricMode mode) {
  if (T0 < 1 || T0 > stream.size())
    throw ArgumentError("edited_retention: T0=" + std::to_string(T0) + " outside [1, " +
                        std::to_string(stream.size()) + "]");
  std::span<const FactRecord> first(stream.records.data(), T0);
  const Score e = efficacy(w, first, mode), g = generalization(w, first, mode);
  return {e.hits + g.hits, e.n + g.n};
}

Score general_retention(const LMWeights& w, std::span<const Example> heldout) {
  std::vector<Tokens> p;
  std::vector<Token> y;
  for (const auto& e : heldout) {
    p.push_back(e.prompt);
    y.push_back(e.target);
  }
  return judge(w, p, y, y, MetricMode::top1);
}

std::vector<double> mask_frequency_report(std::span<const StepLog> logs) {
  if (logs.empty()) throw ArgumentError("mask_frequency_report: no steps");
  const std::size_t L = logs.front().mask.size();
  std::vector<double> counts(L, 0.0);
  for (const auto& s : logs) {
    if (s.mask.size() != L) throw DimensionError("mask_frequency_report: masks of different lengths");
    for (std::size_t l = 0; l < L; ++l) counts[l] += s.mask[l] != 0.0 ? 1.0 : 0.0;
  }
  for (double& c : counts) c /= static_cast<double>(logs.size());
  return counts;
}

MetricReport evaluate(const LMWeights& w, const EditStream& stream, std::span<const Example> heldout, std::size_t T0,
                      MetricMode mode) {
  MetricReport r;
  r.mode = mode;
  r.t0 = T0;
  r.efficacy = efficacy(w, stream.records, mode);
  r.generalization = generalization(w, stream.records, mode);
  r.specificity = specificity(w, stream.records, mode);
  r.edited_retention = edited_retention(w, stream, T0, mode);
  r.general_retention = general_retention(w, heldout);
  return r;
}

// ---- metrics-v1 ---------------------------------------------------------------

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const std::pair<const char*, Score MetricReport::*> kFields[] = {
    {"efficacy", &MetricReport::efficacy},
    {"generalization", &MetricReport::generalization},
    {"specificity", &MetricReport::specificity},
    {"edited_retention", &MetricReport::edited_retention},
    {"general_retention", &MetricReport::general_retention},
};

}  // namespace

std::string format_metrics(std::span<const NamedReport> rows) {
  std::ostringstream os;
  os << "metrics-v1\n";
  for (const auto& [name, r] : rows) {
    os << name << ".mode=" << to_string(r.mode) << "\n";
    os << name << ".t0=" << r.t0 << "\n";
    for (const auto& [field, member] : kFields) {
      const Score& s = r.*member;
      os << name << "." << field << "=" << fixed(s.value()) << "\n";
      os << name << "." << field << ".hits=" << s.hits << "\n";
      os << name << "." << field << ".n=" << s.n << "\n";
    }
  }
  return os.str();
}

void save_metrics(std::span<const NamedReport> rows, const std::filesystem::path& path) {
  write_file_atomic(path, format_metrics(rows));
}

std::vector<NamedReport> load_metrics(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  std::vector<NamedReport> rows;
  std::map<std::string, std::size_t> index;
  auto row = [&](const std::string& name) -> MetricReport& {
    auto it = index.find(name);
    if (it == index.end()) {
      it = index.emplace(name, rows.size()).first;
      rows.push_back({name, {}});
    }
    return rows[it->second].report;
  };
  while (std::getline(in, line)) {
    ++n;
    if (n == 1) {
      if (line != "metrics-v1") throw ParseError(1, "expected format tag 'metrics-v1'");
      continue;
    }
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto dot = line.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) throw ParseError(n, "expected <row>.<field>=<value>");
    const std::string name = line.substr(0, dot), key = line.substr(dot + 1, eq - dot - 1), val = line.substr(eq + 1);
    MetricReport& r = row(name);
    try {
      if (key == "mode") {
        r.mode = parse_metric_mode(val);
        continue;
      }
      if (key == "t0") {
        r.t0 = std::stoul(val);
        continue;
      }
      bool known = false;
      for (const auto& [field, member] : kFields) {
        const std::string f = field;
        if (key == f) known = true;
        else if (key == f + ".hits") (r.*member).hits = std::stoul(val), known = true;
        else if (key == f + ".n") (r.*member).n = std::stoul(val), known = true;
      }
      if (!known) throw ParseError(n, "unknown field '" + key + "'");
    } catch (const std::logic_error&) {
      throw ParseError(n, "bad value '" + val + "'");
    } catch (const ArgumentError& e) {
      throw ParseError(n, e.what());
    }
  }
  if (n == 0) throw ParseError(1, "expected format tag 'metrics-v1'");
  return rows;
}

std::string metrics_table(std::span<const NamedReport> rows) {
  std::ostringstream os;
  os << "model\tmode\tEff\tGen\tSpe\tRet\tGenRet\n";
  for (const auto& [name, r] : rows)
    os << name << '\t' << to_string(r.mode) << '\t' << fixed(r.efficacy.value()) << '\t' << fixed(r.generalization.value())
       << '\t' << fixed(r.specificity.value()) << '\t' << fixed(r.edited_retention.value()) << '\t'
       << fixed(r.general_retention.value()) << '\n';
  return os.str();
}

}  // namespace hiedit
