#pragma once

// Synthetic fact corpus, sequential edit streams, and their text formats.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hiedit/toy_lm.hpp"

namespace hiedit {

struct TokenRange {
  Token begin = 0;
  Token end = 0;  // exclusive
  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool contains(Token t) const { return t >= begin && t < end; }
  bool operator==(const TokenRange&) const = default;
};

// Disjoint vocabulary partition. Subjects are `subject_len` tokens long;
// probe facts draw their subject tokens from a reserved range.
struct VocabLayout {
  TokenRange subject{0, 48};
  TokenRange probe_subject{48, 64};
  TokenRange relation{64, 68};
  TokenRange synonym{68, 72};
  TokenRange object{72, 256};

  void validate(std::size_t vocab_size) const;
  bool operator==(const VocabLayout&) const = default;
};

struct CorpusSpec {
  std::size_t n_facts = 400;
  std::size_t n_probe_facts = 100;
  std::size_t subject_len = 2;
  std::uint64_t seed = 7;
  VocabLayout vocab;
  // paraphrase_table[r - relation.begin] is the paraphrase token of relation r.
  // Empty means the index-aligned synonym range.
  std::vector<Token> paraphrase_table;

  Token paraphrase_of(Token relation) const;
  void validate(std::size_t vocab_size) const;
  bool operator==(const CorpusSpec&) const = default;
};

struct Fact {
  Tokens subject;
  Token relation = 0;
  Token object = 0;
  bool probe_reserved = false;

  Tokens prompt() const;
  Tokens paraphrase(const CorpusSpec& spec) const;
};

struct KnowledgeCorpus {
  CorpusSpec spec;
  std::vector<Fact> facts;

  std::size_t size() const { return facts.size(); }
  // (prompt, object) pairs; with paraphrases, every fact also contributes its paraphrased prompt.
  std::vector<Example> examples(bool with_paraphrases) const;
};

KnowledgeCorpus make_pretrain_corpus(const CorpusSpec& spec);

struct FactRecord {
  Tokens x;
  Token y = 0;
  Token y_prev = 0;
  Tokens x_bar;
  Tokens x_tilde;
  Token y_tilde = 0;

  bool operator==(const FactRecord&) const = default;
};

// Throws ArgumentError naming the violated record invariant.
void validate_record(const FactRecord& r);

struct StreamSpec {
  CorpusSpec corpus;
  std::size_t T = 200;
  std::uint64_t seed = 11;

  bool operator==(const StreamSpec&) const = default;
};

struct EditStream {
  std::vector<FactRecord> records;
  std::uint64_t seed = 0;
  StreamSpec spec;

  std::size_t size() const { return records.size(); }
  bool operator==(const EditStream&) const = default;
};

// Decides whether the base model answers a probe (prompt, answer) correctly.
using ProbeCheck = std::function<bool(const Tokens& prompt, Token answer)>;

// T edits, each flipping a distinct pretrained editable fact to a new object;
// probes come from the reserved facts. Deterministic under spec.seed.
EditStream synth_stream(const StreamSpec& spec, const ProbeCheck& probe_ok = {});
ProbeCheck probe_check_for(const LMWeights& base);

void save_stream(const EditStream& stream, const std::filesystem::path& path);
EditStream load_stream(const std::filesystem::path& path);
std::string format_stream(const EditStream& stream);
EditStream parse_stream(const std::string& text);

// ZsRE-shaped JSON lines with pre-tokenized fields:
// {"src": [...], "alt": [y], "pred": [y_prev], "rephrase": [...], "loc": [...], "loc_ans": [y~]}
EditStream load_zsre_jsonl(const std::filesystem::path& path);

// Corpus facts whose prompts are never edited by `stream`.
std::vector<Example> heldout_facts(const KnowledgeCorpus& corpus, const EditStream& stream);

}  // namespace hiedit
