#include "hiedit/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"

namespace hiedit {

RunConfig::RunConfig() {
  lm.d_ff = 256;
  pretrain.steps = 200;
  pretrain.lr = 1e-2;
  editor.edit_lr = 0.03;
  train.eta = 1.0;
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ValidationError(key, "expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos == v.size() && std::isfinite(x)) return x;
  } catch (const std::exception&) {
  }
  throw ValidationError(key, "expected a finite number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError(key, "expected true or false, got '" + v + "'");
}

// Shortest of %.15g / %.17g that reads back to the same double.
std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", x);
  if (std::strtod(buf, nullptr) != x) std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class M>
Field size_field(const char* key, M member) {
  return {key, [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_u64(k, v); },
          [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <class M>
Field double_field(const char* key, M member) {
  return {key, [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_double(k, v); },
          [member](const RunConfig& c) { return num(member(c)); }};
}

#define HIEDIT_REF(expr) [](auto& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      size_field("lm.vocab_size", HIEDIT_REF(c.lm.vocab_size)),
      size_field("lm.d_model", HIEDIT_REF(c.lm.d_model)),
      size_field("lm.d_ff", HIEDIT_REF(c.lm.d_ff)),
      size_field("lm.n_blocks", HIEDIT_REF(c.lm.n_blocks)),
      size_field("lm.n_heads", HIEDIT_REF(c.lm.n_heads)),
      size_field("lm.max_seq", HIEDIT_REF(c.lm.max_seq)),
      size_field("lm.seed", HIEDIT_REF(c.lm.seed)),
      size_field("corpus.n_facts", HIEDIT_REF(c.corpus.n_facts)),
      size_field("corpus.n_probe_facts", HIEDIT_REF(c.corpus.n_probe_facts)),
      size_field("corpus.subject_len", HIEDIT_REF(c.corpus.subject_len)),
      size_field("corpus.seed", HIEDIT_REF(c.corpus.seed)),
      size_field("pretrain.steps", HIEDIT_REF(c.pretrain.steps)),
      double_field("pretrain.lr", HIEDIT_REF(c.pretrain.lr)),
      size_field("stream.T", HIEDIT_REF(c.T)),
      size_field("stream.train_seed", HIEDIT_REF(c.train_stream_seed)),
      size_field("stream.eval_seed", HIEDIT_REF(c.eval_stream_seed)),
      size_field("editor.d1", HIEDIT_REF(c.editor.d1)),
      size_field("editor.d_r", HIEDIT_REF(c.editor.d_r)),
      size_field("editor.C", HIEDIT_REF(c.editor.C)),
      size_field("editor.K", HIEDIT_REF(c.editor.K)),
      double_field("editor.edit_lr", HIEDIT_REF(c.editor.edit_lr)),
      size_field("editor.seed", HIEDIT_REF(c.editor.seed)),
      double_field("train.eta", HIEDIT_REF(c.train.eta)),
      double_field("train.mu", HIEDIT_REF(c.train.mu)),
      double_field("train.kl_weight", HIEDIT_REF(c.train.kl_weight)),
      size_field("train.window", HIEDIT_REF(c.train.window)),
      double_field("train.gamma", HIEDIT_REF(c.train.gamma)),
      size_field("train.epochs", HIEDIT_REF(c.train.epochs)),
      double_field("train.lr_high", HIEDIT_REF(c.train.lr_high)),
      double_field("train.lr_low", HIEDIT_REF(c.train.lr_low)),
      double_field("train.clip", HIEDIT_REF(c.train.clip)),
      {"train.reward_mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.train.reward_mode = parse_reward_mode(v);
         } catch (const ArgumentError&) {
           throw ValidationError(k, "expected full, rand or none, got '" + v + "'");
         }
       },
       [](const RunConfig& c) { return to_string(c.train.reward_mode); }},
      {"train.select_mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.train.select_mode = parse_select_mode(v);
         } catch (const ArgumentError&) {
           throw ValidationError(k, "expected hinet, random, gradnorm or all, got '" + v + "'");
         }
       },
       [](const RunConfig& c) { return to_string(c.train.select_mode); }},
      {"train.rl_training",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.rl_training = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.train.rl_training ? "true" : "false"); }},
      size_field("train.seed", HIEDIT_REF(c.train.seed)),
      size_field("eval.t0", HIEDIT_REF(c.t0)),
      {"eval.mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.metric_mode = parse_metric_mode(v);
         } catch (const ArgumentError&) {
           throw ValidationError(k, "expected top1 or prob-compare, got '" + v + "'");
         }
       },
       [](const RunConfig& c) { return to_string(c.metric_mode); }},
      {"paths.work_dir",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v.empty()) throw ValidationError(k, "must not be empty");
         c.work_dir = v;
       },
       [](const RunConfig& c) { return c.work_dir.string(); }},
      size_field("seed", HIEDIT_REF(c.seed)),
  };
  return f;
}

#undef HIEDIT_REF

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) return f.set(cfg, key, value);
  throw ValidationError(key, "unknown configuration key");
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ValidationError(trim(assignment), "override must look like key=value");
  set_config_value(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig parse_config_text(const std::string& text, const RunConfig& base) {
  RunConfig cfg = base;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(n, "expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(n, "missing key before '='");
    set_config_value(cfg, key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config_text(read_file(path)); }

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

void RunConfig::validate() const {
  lm.validate();
  try {
    corpus.validate(lm.vocab_size);
  } catch (const CapacityError& e) {
    throw ValidationError("corpus.n_facts", e.what());
  }
  if (lm.max_seq < corpus.subject_len + 1)
    throw ValidationError("lm.max_seq", "prompts of " + std::to_string(corpus.subject_len + 1) + " tokens do not fit");
  if (!(pretrain.lr > 0.0)) throw ValidationError("pretrain.lr", "must be > 0");
  const SlotRange range = default_slot_range(lm);
  editor.validate(range.size(), lm.d_model + lm.d_ff);
  train.validate();
  const std::size_t editable = corpus.n_facts - corpus.n_probe_facts;
  if (T < 1 || T > editable)
    throw ValidationError("stream.T", "must lie in [1, " + std::to_string(editable) + "], the editable fact count");
  if (t0 < 1 || t0 > T) throw ValidationError("eval.t0", "must lie in [1, stream.T=" + std::to_string(T) + "]");
  if (work_dir.empty()) throw ValidationError("paths.work_dir", "must not be empty");
}

StreamSpec RunConfig::train_stream_spec() const { return {corpus, T, train_stream_seed + seed}; }
StreamSpec RunConfig::eval_stream_spec() const { return {corpus, T, eval_stream_seed + seed}; }

EditorConfig RunConfig::editor_config() const {
  EditorConfig e = editor;
  e.seed += seed;
  return e;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed += seed;
  return t;
}

}  // namespace hiedit
