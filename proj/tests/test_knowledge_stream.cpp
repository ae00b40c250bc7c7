#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "hiedit/checkpoint.hpp"
#include "hiedit/error.hpp"
#include "hiedit/knowledge_stream.hpp"

using namespace hiedit;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hiedit_ks_" + name);
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

TEST_CASE("corpus size, subject uniqueness and vocabulary ranges") {
  CorpusSpec spec;
  const auto c = make_pretrain_corpus(spec);
  REQUIRE(c.size() == spec.n_facts);
  std::set<Tokens> subjects;
  std::size_t reserved = 0;
  for (const auto& f : c.facts) {
    subjects.insert(f.subject);
    reserved += f.probe_reserved;
    const auto& subj = f.probe_reserved ? spec.vocab.probe_subject : spec.vocab.subject;
    for (Token t : f.subject) CHECK(subj.contains(t));
    CHECK(spec.vocab.relation.contains(f.relation));
    CHECK(spec.vocab.object.contains(f.object));
  }
  CHECK(subjects.size() >= spec.n_facts);
  CHECK(reserved == spec.n_probe_facts);
  CHECK(c.examples(false).size() == spec.n_facts);
  CHECK(c.examples(true).size() == 2 * spec.n_facts);
}

TEST_CASE("vocabulary validation") {
  CorpusSpec spec;
  CHECK_NOTHROW(spec.validate(256));
  auto overlapping = spec;
  overlapping.vocab.relation = {60, 66};
  CHECK_THROWS_AS(overlapping.validate(256), ValidationError);
  CHECK_THROWS_AS(spec.validate(200), ValidationError);
  auto tiny = spec;
  tiny.vocab.subject = {0, 10};
  CHECK_THROWS_AS(tiny.validate(256), CapacityError);
}

TEST_CASE("synth_stream determinism and record invariants") {
  StreamSpec spec;
  const auto a = synth_stream(spec);
  const auto b = synth_stream(spec);
  CHECK(format_stream(a) == format_stream(b));
  REQUIRE(a.size() == 200);

  const auto corpus = make_pretrain_corpus(spec.corpus);
  std::set<Tokens> probe_prompts, corpus_prompts, edit_prompts;
  for (const auto& f : corpus.facts) {
    corpus_prompts.insert(f.prompt());
    if (f.probe_reserved) probe_prompts.insert(f.prompt());
  }
  for (const auto& r : a.records) {
    CHECK(r.y != r.y_prev);
    CHECK(r.x != r.x_tilde);
    CHECK_NOTHROW(validate_record(r));
    CHECK(corpus_prompts.count(r.x_tilde) == 1);
    CHECK(probe_prompts.count(r.x_tilde) == 1);
    CHECK(probe_prompts.count(r.x) == 0);
    edit_prompts.insert(r.x);
  }
  CHECK(edit_prompts.size() == 200);
  for (const auto& r : a.records) CHECK(edit_prompts.count(r.x_tilde) == 0);

  auto other = spec;
  other.seed = spec.seed + 1;
  CHECK(format_stream(synth_stream(other)) != format_stream(a));
}

TEST_CASE("synth_stream edits flip the pretrained object") {
  StreamSpec spec;
  spec.T = 50;
  const auto corpus = make_pretrain_corpus(spec.corpus);
  const auto s = synth_stream(spec);
  for (const auto& r : s.records) {
    bool found = false;
    for (const auto& f : corpus.facts)
      if (f.prompt() == r.x) {
        found = true;
        CHECK(r.y_prev == f.object);
        CHECK(r.x_bar == f.paraphrase(spec.corpus));
      }
    CHECK(found);
  }
}

TEST_CASE("synth_stream capacity and probe filtering") {
  StreamSpec spec;
  spec.T = 301;
  CHECK_THROWS_AS(synth_stream(spec), CapacityError);

  spec.T = 100;
  std::set<Tokens> allowed;
  const auto corpus = make_pretrain_corpus(spec.corpus);
  for (const auto& f : corpus.facts)
    if (f.probe_reserved && allowed.size() < 5) allowed.insert(f.prompt());
  const auto s = synth_stream(spec, [&](const Tokens& p, Token) { return allowed.count(p) > 0; });
  for (const auto& r : s.records) CHECK(allowed.count(r.x_tilde) == 1);

  CHECK_THROWS_AS(synth_stream(spec, [](const Tokens&, Token) { return false; }), CapacityError);
}

TEST_CASE("stream save/load round trip") {
  StreamSpec spec;
  spec.T = 40;
  spec.corpus.paraphrase_table = {71, 70, 69, 68};
  const auto s = synth_stream(spec);
  const auto p = temp_path("roundtrip.stream");
  save_stream(s, p);
  const auto back = load_stream(p);
  CHECK(back == s);
  std::filesystem::remove(p);
}

TEST_CASE("stream parse errors cite the line") {
  const std::string good =
      "stream-v1\n"
      "x=1,2,64 y=80 y_prev=90 x_bar=1,2,68 x_tilde=50,51,65 y_tilde=100\n";
  CHECK(parse_stream(good).records.size() == 1);

  const std::string missing_y =
      "stream-v1\n"
      "x=1,2,64 y=80 y_prev=90 x_bar=1,2,68 x_tilde=50,51,65 y_tilde=100\n"
      "x=3,4,64 y_prev=91 x_bar=3,4,68 x_tilde=50,51,65 y_tilde=100\n";
  try {
    parse_stream(missing_y);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }

  CHECK_THROWS_AS(parse_stream("stream-v2\n"), ParseError);
  CHECK_THROWS_AS(parse_stream("stream-v1\nx=1,2,64 y=80 y_prev=80 x_bar=1,2,68 x_tilde=5,6,64 y_tilde=9\n"),
                  ParseError);
  CHECK_THROWS_AS(parse_stream("stream-v1\nx=1,2,64 y=8a y_prev=80 x_bar=1,2,68 x_tilde=5,6,64 y_tilde=9\n"),
                  ParseError);
}

TEST_CASE("ZsRE-shaped JSON lines load into valid records") {
  const auto p = temp_path("zsre.jsonl");
  write_text(p,
             R"({"src": [3, 9, 64], "alt": [101], "pred": [77], "rephrase": [3, 9, 68], "loc": [50, 52, 66], "loc_ans": [200]})"
             "\n"
             R"({"src": [4, 1, 65], "alt": 120, "answers": [88], "rephrase": [4, 1, 69], "loc": [51, 49, 67], "loc_ans": [201]})"
             "\n"
             R"({"src": [7, 7, 66], "alt": [130], "pred": [99], "rephrase": [7, 7, 70], "loc": [55, 60, 64], "loc_ans": [202]})"
             "\n\n"
             R"({"src": [12, 30, 67], "alt": [140], "pred": [72], "rephrase": [12, 30, 71], "loc": [63, 48, 65], "loc_ans": [203]})"
             "\n"
             R"({"src": [40, 2, 64], "alt": [150], "pred": [73], "rephrase": [40, 2, 68], "loc": [57, 58, 66], "loc_ans": [204]})"
             "\n");
  const auto s = load_zsre_jsonl(p);
  REQUIRE(s.size() == 5);
  CHECK(s.spec.T == 5);
  for (const auto& r : s.records) CHECK_NOTHROW(validate_record(r));
  CHECK(s.records[0].x == Tokens{3, 9, 64});
  CHECK(s.records[0].y == 101);
  CHECK(s.records[1].y == 120);
  CHECK(s.records[1].y_prev == 88);
  CHECK(s.records[4].y_tilde == 204);

  write_text(p, R"({"src": [3, 9, 64], "alt": [101], "pred": [77], "rephrase": [3, 9, 68], "loc": [50, 52, 66], "loc_ans": [200]})"
                "\n"
                R"({"src": [3, 9, 64], "pred": [77], "rephrase": [3, 9, 68], "loc": [50, 52, 66], "loc_ans": [200]})"
                "\n");
  try {
    load_zsre_jsonl(p);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::filesystem::remove(p);
}

TEST_CASE("held-out facts exclude every edited prompt") {
  StreamSpec spec;
  const auto corpus = make_pretrain_corpus(spec.corpus);
  const auto s = synth_stream(spec);
  const auto held = heldout_facts(corpus, s);
  CHECK(held.size() == corpus.size() - s.size());
  std::set<Tokens> edited;
  for (const auto& r : s.records) edited.insert(r.x);
  for (const auto& e : held) CHECK(edited.count(e.prompt) == 0);
}
