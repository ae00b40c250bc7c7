#include "hiedit/knowledge_stream.hpp"

#include <algorithm>
#include <charconv>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"

namespace hiedit {

namespace {

void require_disjoint(const std::vector<std::pair<const char*, TokenRange>>& parts) {
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].second.size() == 0)
      throw ValidationError(std::string("corpus.vocab.") + parts[i].first, "token range is empty");
    for (std::size_t j = 0; j < i; ++j) {
      const auto& a = parts[i].second;
      const auto& b = parts[j].second;
      if (a.begin < b.end && b.begin < a.end)
        throw ValidationError(std::string("corpus.vocab.") + parts[i].first,
                              std::string("overlaps the ") + parts[j].first + " range");
    }
  }
}

}  // namespace

void VocabLayout::validate(std::size_t vocab_size) const {
  const std::vector<std::pair<const char*, TokenRange>> parts{
      {"subject", subject}, {"probe_subject", probe_subject}, {"relation", relation},
      {"synonym", synonym}, {"object", object}};
  require_disjoint(parts);
  for (const auto& [name, r] : parts)
    if (r.end > vocab_size)
      throw ValidationError(std::string("corpus.vocab.") + name, "range exceeds the vocabulary size");
}

Token CorpusSpec::paraphrase_of(Token relation) const {
  if (!vocab.relation.contains(relation)) throw IndexError("token " + std::to_string(relation) + " is not a relation");
  const std::size_t i = relation - vocab.relation.begin;
  if (paraphrase_table.empty()) return vocab.synonym.begin + i;
  return paraphrase_table.at(i);
}

void CorpusSpec::validate(std::size_t vocab_size) const {
  vocab.validate(vocab_size);
  if (subject_len < 1) throw ValidationError("corpus.subject_len", "must be >= 1");
  if (n_probe_facts < 1) throw ValidationError("corpus.n_probe_facts", "must be >= 1");
  if (n_probe_facts >= n_facts) throw ValidationError("corpus.n_probe_facts", "must be smaller than n_facts");
  if (vocab.object.size() < 2) throw ValidationError("corpus.vocab.object", "need at least two objects");
  if (paraphrase_table.empty() && vocab.synonym.size() < vocab.relation.size())
    throw ValidationError("corpus.vocab.synonym", "need one synonym per relation");
  if (!paraphrase_table.empty()) {
    if (paraphrase_table.size() != vocab.relation.size())
      throw ValidationError("corpus.paraphrase", "table needs one entry per relation");
    for (Token t : paraphrase_table)
      if (t >= vocab_size) throw ValidationError("corpus.paraphrase", "token outside the vocabulary");
  }
  auto capacity = [&](const TokenRange& r) {
    double c = 1.0;
    for (std::size_t i = 0; i < subject_len; ++i) c *= static_cast<double>(r.size());
    return c;
  };
  if (capacity(vocab.subject) < static_cast<double>(n_facts - n_probe_facts))
    throw CapacityError("subject range too small for " + std::to_string(n_facts - n_probe_facts) + " distinct subjects");
  if (capacity(vocab.probe_subject) < static_cast<double>(n_probe_facts))
    throw CapacityError("probe subject range too small for " + std::to_string(n_probe_facts) + " distinct subjects");
}

Tokens Fact::prompt() const {
  Tokens t = subject;
  t.push_back(relation);
  return t;
}

Tokens Fact::paraphrase(const CorpusSpec& spec) const {
  Tokens t = subject;
  t.push_back(spec.paraphrase_of(relation));
  return t;
}

std::vector<Example> KnowledgeCorpus::examples(bool with_paraphrases) const {
  std::vector<Example> out;
  for (const auto& f : facts) {
    out.push_back({f.prompt(), f.object});
    if (with_paraphrases) out.push_back({f.paraphrase(spec), f.object});
  }
  return out;
}

KnowledgeCorpus make_pretrain_corpus(const CorpusSpec& spec) {
  KnowledgeCorpus c;
  c.spec = spec;
  std::mt19937_64 rng(spec.seed);
  auto pick = [&](const TokenRange& r) { return std::uniform_int_distribution<Token>(r.begin, r.end - 1)(rng); };
  std::set<Tokens> used;
  for (std::size_t i = 0; i < spec.n_facts; ++i) {
    Fact f;
    f.probe_reserved = i >= spec.n_facts - spec.n_probe_facts;
    const TokenRange& subj = f.probe_reserved ? spec.vocab.probe_subject : spec.vocab.subject;
    do {
      f.subject.clear();
      for (std::size_t k = 0; k < spec.subject_len; ++k) f.subject.push_back(pick(subj));
    } while (!used.insert(f.subject).second);
    f.relation = pick(spec.vocab.relation);
    f.object = pick(spec.vocab.object);
    c.facts.push_back(std::move(f));
  }
  return c;
}

void validate_record(const FactRecord& r) {
  if (r.x.empty() || r.x_bar.empty() || r.x_tilde.empty()) throw ArgumentError("record has an empty prompt");
  if (r.x == r.x_tilde) throw ArgumentError("record probe equals its edit prompt");
  if (r.y == r.y_prev) throw ArgumentError("record target equals the original object");
  if (r.x_bar.size() != r.x.size() || !std::equal(r.x.begin(), r.x.end() - 1, r.x_bar.begin()))
    throw ArgumentError("paraphrase must differ from the prompt only in its final token");
}

ProbeCheck probe_check_for(const LMWeights& base) {
  return [&base](const Tokens& prompt, Token answer) {
    const Tokens* one = &prompt;
    return predict(base, std::span<const Tokens>(one, 1))[0] == answer;
  };
}

EditStream synth_stream(const StreamSpec& spec, const ProbeCheck& probe_ok) {
  const KnowledgeCorpus corpus = make_pretrain_corpus(spec.corpus);
  std::vector<const Fact*> editable, probes;
  for (const auto& f : corpus.facts) (f.probe_reserved ? probes : editable).push_back(&f);
  if (spec.T > editable.size())
    throw CapacityError("stream of " + std::to_string(spec.T) + " edits exceeds the " +
                        std::to_string(editable.size()) + " editable facts");
  if (probe_ok) {
    std::vector<const Fact*> valid;
    for (const Fact* p : probes)
      if (probe_ok(p->prompt(), p->object)) valid.push_back(p);
    probes = std::move(valid);
  }
  if (probes.empty() && spec.T > 0) throw CapacityError("no probe fact is answered correctly by the base model");

  std::mt19937_64 rng(spec.seed);
  std::shuffle(editable.begin(), editable.end(), rng);
  const TokenRange& obj = spec.corpus.vocab.object;
  std::uniform_int_distribution<std::size_t> pick_probe(0, probes.empty() ? 0 : probes.size() - 1);
  std::uniform_int_distribution<Token> pick_obj(obj.begin, obj.end - 2);

  EditStream s;
  s.seed = spec.seed;
  s.spec = spec;
  for (std::size_t t = 0; t < spec.T; ++t) {
    const Fact& f = *editable[t];
    const Fact& p = *probes[pick_probe(rng)];
    FactRecord r;
    r.x = f.prompt();
    r.y_prev = f.object;
    Token y = pick_obj(rng);  // uniform over objects other than y_prev
    r.y = y >= f.object ? y + 1 : y;
    r.x_bar = f.paraphrase(spec.corpus);
    r.x_tilde = p.prompt();
    r.y_tilde = p.object;
    s.records.push_back(std::move(r));
  }
  return s;
}

// ---- stream-v1 text format --------------------------------------------------

namespace {

std::string join(const Tokens& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
  return s;
}

std::string range_str(const TokenRange& r) { return std::to_string(r.begin) + ":" + std::to_string(r.end); }

std::uint64_t parse_uint(std::string_view s, std::size_t line, const std::string& field) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ParseError(line, "field '" + field + "' expects a non-negative integer, got '" + std::string(s) + "'");
  return v;
}

Tokens parse_tokens(std::string_view s, std::size_t line, const std::string& field) {
  Tokens out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(parse_uint(s.substr(start, comma - start), line, field));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

TokenRange parse_range(std::string_view s, std::size_t line, const std::string& field) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) throw ParseError(line, "field '" + field + "' expects begin:end");
  return {parse_uint(s.substr(0, colon), line, field), parse_uint(s.substr(colon + 1), line, field)};
}

std::vector<std::pair<std::string, std::string>> split_fields(const std::string& text, std::size_t line) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ParseError(line, "expected key=value, got '" + tok + "'");
    out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return out;
}

constexpr const char* kRecordFields[] = {"x", "y", "y_prev", "x_bar", "x_tilde", "y_tilde"};

FactRecord parse_record(const std::string& text, std::size_t line) {
  auto fields = split_fields(text, line);
  for (std::size_t i = 0; i < std::size(kRecordFields); ++i) {
    if (i >= fields.size() || fields[i].first != kRecordFields[i]) {
      const bool present = std::any_of(fields.begin(), fields.end(),
                                       [&](const auto& f) { return f.first == kRecordFields[i]; });
      throw ParseError(line, present ? std::string("field '") + kRecordFields[i] + "' out of order"
                                     : std::string("missing field '") + kRecordFields[i] + "'");
    }
  }
  if (fields.size() > std::size(kRecordFields)) throw ParseError(line, "unexpected field '" + fields.back().first + "'");
  FactRecord r;
  r.x = parse_tokens(fields[0].second, line, "x");
  r.y = parse_uint(fields[1].second, line, "y");
  r.y_prev = parse_uint(fields[2].second, line, "y_prev");
  r.x_bar = parse_tokens(fields[3].second, line, "x_bar");
  r.x_tilde = parse_tokens(fields[4].second, line, "x_tilde");
  r.y_tilde = parse_uint(fields[5].second, line, "y_tilde");
  try {
    validate_record(r);
  } catch (const ArgumentError& e) {
    throw ParseError(line, e.what());
  }
  return r;
}

void parse_meta(const std::string& text, std::size_t line, EditStream& s) {
  for (const auto& [k, v] : split_fields(text, line)) {
    auto& c = s.spec.corpus;
    if (k == "seed") s.seed = s.spec.seed = parse_uint(v, line, k);
    else if (k == "T") s.spec.T = parse_uint(v, line, k);
    else if (k == "n_facts") c.n_facts = parse_uint(v, line, k);
    else if (k == "n_probe_facts") c.n_probe_facts = parse_uint(v, line, k);
    else if (k == "subject_len") c.subject_len = parse_uint(v, line, k);
    else if (k == "corpus_seed") c.seed = parse_uint(v, line, k);
    else if (k == "subject") c.vocab.subject = parse_range(v, line, k);
    else if (k == "probe_subject") c.vocab.probe_subject = parse_range(v, line, k);
    else if (k == "relation") c.vocab.relation = parse_range(v, line, k);
    else if (k == "synonym") c.vocab.synonym = parse_range(v, line, k);
    else if (k == "object") c.vocab.object = parse_range(v, line, k);
    else if (k == "paraphrase") c.paraphrase_table = parse_tokens(v, line, k);
    else throw ParseError(line, "unknown meta field '" + k + "'");
  }
}

}  // namespace

std::string format_stream(const EditStream& s) {
  const auto& c = s.spec.corpus;
  std::ostringstream os;
  os << "stream-v1\n";
  os << "meta seed=" << s.seed << " T=" << s.spec.T << " n_facts=" << c.n_facts << " n_probe_facts=" << c.n_probe_facts
     << " subject_len=" << c.subject_len << " corpus_seed=" << c.seed << " subject=" << range_str(c.vocab.subject)
     << " probe_subject=" << range_str(c.vocab.probe_subject) << " relation=" << range_str(c.vocab.relation)
     << " synonym=" << range_str(c.vocab.synonym) << " object=" << range_str(c.vocab.object)
     << " paraphrase=" << join(c.paraphrase_table) << "\n";
  for (const auto& r : s.records)
    os << "x=" << join(r.x) << " y=" << r.y << " y_prev=" << r.y_prev << " x_bar=" << join(r.x_bar)
       << " x_tilde=" << join(r.x_tilde) << " y_tilde=" << r.y_tilde << "\n";
  return os.str();
}

EditStream parse_stream(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  EditStream s;
  bool tagged = false;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    if (!tagged) {
      if (line.substr(first) != "stream-v1") throw ParseError(n, "expected format tag 'stream-v1'");
      tagged = true;
      continue;
    }
    if (line.compare(first, 5, "meta ") == 0) {
      if (!s.records.empty()) throw ParseError(n, "meta line after the first record");
      parse_meta(line.substr(first + 5), n, s);
      continue;
    }
    s.records.push_back(parse_record(line, n));
  }
  if (!tagged) throw ParseError(1, "expected format tag 'stream-v1'");
  return s;
}

void save_stream(const EditStream& stream, const std::filesystem::path& path) {
  write_file_atomic(path, format_stream(stream));
}

EditStream load_stream(const std::filesystem::path& path) { return parse_stream(read_file(path)); }

// ---- ZsRE-shaped JSON lines -------------------------------------------------

namespace {

Tokens json_tokens(const nlohmann::json& rec, const char* key, std::size_t line) {
  if (!rec.contains(key)) throw ParseError(line, std::string("missing field '") + key + "'");
  const auto& v = rec.at(key);
  Tokens out;
  if (v.is_number_unsigned()) {
    out.push_back(v.get<Token>());
  } else if (v.is_array()) {
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) throw ParseError(line, std::string("field '") + key + "' must hold token ids");
      out.push_back(e.get<Token>());
    }
  } else {
    throw ParseError(line, std::string("field '") + key + "' must be a token id or a list of token ids");
  }
  if (out.empty()) throw ParseError(line, std::string("field '") + key + "' is empty");
  return out;
}

Token json_token(const nlohmann::json& rec, const char* key, std::size_t line) {
  Tokens t = json_tokens(rec, key, line);
  if (t.size() != 1) throw ParseError(line, std::string("field '") + key + "' must be a single-token answer");
  return t[0];
}

}  // namespace

EditStream load_zsre_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  EditStream s;
  s.spec.T = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(n, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(n, "record must be a JSON object");
    FactRecord r;
    r.x = json_tokens(rec, "src", n);
    r.y = json_token(rec, "alt", n);
    r.y_prev = json_token(rec, rec.contains("pred") ? "pred" : "answers", n);
    r.x_bar = json_tokens(rec, "rephrase", n);
    r.x_tilde = json_tokens(rec, "loc", n);
    r.y_tilde = json_token(rec, "loc_ans", n);
    try {
      validate_record(r);
    } catch (const ArgumentError& e) {
      throw ParseError(n, e.what());
    }
    s.records.push_back(std::move(r));
  }
  s.spec.T = s.records.size();
  return s;
}

std::vector<Example> heldout_facts(const KnowledgeCorpus& corpus, const EditStream& stream) {
  std::set<Tokens> edited;
  for (const auto& r : stream.records) edited.insert(r.x);
  std::vector<Example> out;
  for (const auto& f : corpus.facts) {
    Tokens p = f.prompt();
    if (!edited.count(p)) out.push_back({std::move(p), f.object});
  }
  return out;
}

}  // namespace hiedit
