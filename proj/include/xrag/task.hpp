#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xrag/config.hpp"
#include "xrag/errors.hpp"
#include "xrag/rng.hpp"
#include "xrag/vocab.hpp"

namespace xrag {

struct Fact {
  int entity = 0;    // index into the entity vocabulary
  int relation = 0;  // index into the relation vocabulary
  int value = 0;     // index into the value vocabulary
  bool external = false;
};

struct Example {
  std::string id;
  std::vector<int> query;   // [entity, relation] token ids
  std::vector<int> answer;  // [value] token ids; empty for external training
  int label = 0;            // oracle gate label: 1 iff the fact is external
};

// Synthetic fact-lookup task. Relations split into parametric and external
// kinds and every fact inherits its relation's kind, so a linear probe on
// the pooled query embedding can express the oracle retrieval decision.
// Values come from disjoint pools per kind, which makes the no-leakage scan
// airtight: an external value token can never legally occur in a training
// answer.
struct FactTask {
  std::vector<Fact> facts;    // the main facts, external ones first
  std::vector<Fact> heldout;  // external extras kept out of the corpus
  std::vector<int> external_relations;  // relation indices, sorted
  int n_external = 0;          // count of external facts in `facts`
  int n_parametric_values = 0;  // values [0, n) parametric, rest external
  std::uint64_t seed = 0;

  std::vector<Example> train;
  std::vector<Example> test;

  bool is_external_relation(int r) const {
    return std::binary_search(external_relations.begin(),
                              external_relations.end(), r);
  }

  // Value-vocabulary indices reserved for external facts.
  std::set<int> external_value_pool(int n_values) const {
    std::set<int> pool;
    for (int v = n_parametric_values; v < n_values; ++v) pool.insert(v);
    return pool;
  }
};

namespace detail {

inline void shuffle(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.below(i)]);
}

template <typename T>
inline void shuffle_items(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.below(i)]);
}

inline std::string padded_id(const char* prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
  return buf;
}

}  // namespace detail

// Deterministic task construction from (settings, seed). Facts are distinct
// (entity, relation) pairs; external facts (and held-out extras) use
// external relations and external-pool values, parametric facts the
// complements.
inline FactTask gen_task(const Settings& s, std::uint64_t seed) {
  const int n_e = s.task_n_entities;
  const int n_r = s.task_n_relations;
  const int n_v = s.task_n_values;
  const int n_facts = s.task_n_facts;
  const double frac = s.task_external_fraction;
  if (frac <= 0.0 || frac >= 1.0)
    throw ConfigError("external fraction must lie strictly inside (0, 1)");
  if (n_v < 2) throw ConfigError("need at least two values to split pools");

  FactTask task;
  task.seed = seed;
  task.n_external =
      static_cast<int>(std::llround(frac * static_cast<double>(n_facts)));
  const int n_parametric = n_facts - task.n_external;
  if (task.n_external < 1 || n_parametric < 1)
    throw ConfigError("external fraction leaves an empty split");

  int n_ext_rel =
      static_cast<int>(std::llround(frac * static_cast<double>(n_r)));
  n_ext_rel = std::max(1, std::min(n_r - 1, n_ext_rel));
  const int n_par_rel = n_r - n_ext_rel;
  if (task.n_external + s.task_n_heldout > n_ext_rel * n_e)
    throw ConfigError("not enough external (entity, relation) pairs: need " +
                      std::to_string(task.n_external + s.task_n_heldout) +
                      ", have " + std::to_string(n_ext_rel * n_e));
  if (n_parametric > n_par_rel * n_e)
    throw ConfigError("not enough parametric (entity, relation) pairs");

  task.n_parametric_values = n_v / 2;

  Rng rng(Rng::mix(seed, 0x7461736b));
  std::vector<int> relations(n_r);
  for (int r = 0; r < n_r; ++r) relations[r] = r;
  detail::shuffle(relations, rng);
  task.external_relations.assign(relations.begin(),
                                 relations.begin() + n_ext_rel);
  std::sort(task.external_relations.begin(), task.external_relations.end());

  std::vector<int> ext_pairs, par_pairs;
  for (int r = 0; r < n_r; ++r)
    for (int e = 0; e < n_e; ++e)
      (task.is_external_relation(r) ? ext_pairs : par_pairs)
          .push_back(e * n_r + r);
  detail::shuffle(ext_pairs, rng);
  detail::shuffle(par_pairs, rng);

  auto draw_value = [&](bool external) {
    const int lo = external ? task.n_parametric_values : 0;
    const int hi = external ? n_v : task.n_parametric_values;
    return lo + static_cast<int>(rng.below(
                    static_cast<std::uint64_t>(hi - lo)));
  };
  auto make_fact = [&](int pair, bool external) {
    Fact f;
    f.entity = pair / n_r;
    f.relation = pair % n_r;
    f.value = draw_value(external);
    f.external = external;
    return f;
  };

  for (int i = 0; i < task.n_external; ++i)
    task.facts.push_back(make_fact(ext_pairs[i], true));
  for (int i = 0; i < n_parametric; ++i)
    task.facts.push_back(make_fact(par_pairs[i], false));
  for (int i = 0; i < s.task_n_heldout; ++i)
    task.heldout.push_back(make_fact(ext_pairs[task.n_external + i], true));

  const Vocab vocab(n_e, n_r, n_v);
  auto example_of = [&](const Fact& f, bool with_answer) {
    Example ex;
    ex.query = {vocab.entity(f.entity), vocab.relation(f.relation)};
    if (with_answer) ex.answer = {vocab.value(f.value)};
    ex.label = f.external ? 1 : 0;
    return ex;
  };

  // Training lines: parametric facts carry their answer; external facts
  // appear as retrieval exercises with the answer withheld.
  for (const Fact& f : task.facts)
    for (int rep = 0; rep < s.task_min_repeats; ++rep)
      task.train.push_back(example_of(f, !f.external));
  detail::shuffle_items(task.train, rng);
  for (std::size_t i = 0; i < task.train.size(); ++i)
    task.train[i].id = detail::padded_id("t", static_cast<int>(i));

  for (const Fact& f : task.facts) task.test.push_back(example_of(f, true));
  detail::shuffle_items(task.test, rng);
  for (std::size_t i = 0; i < task.test.size(); ++i)
    task.test[i].id = detail::padded_id("q", static_cast<int>(i));

  return task;
}

// Fails when any training answer contains a token from the external value
// pool (main facts or held-out). Generation already guarantees this; the
// scan re-checks the artifact rather than trusting the construction.
inline void verify_no_leakage(const FactTask& task, const Vocab& vocab) {
  std::set<int> forbidden;
  for (const Fact& f : task.facts)
    if (f.external) forbidden.insert(vocab.value(f.value));
  for (const Fact& f : task.heldout) forbidden.insert(vocab.value(f.value));
  for (const Example& ex : task.train)
    for (int t : ex.answer)
      if (forbidden.count(t))
        throw ContractError("external value token " + vocab.token_text(t) +
                            " leaked into training example " + ex.id);
}

// ---- file emission and parsing ----

inline std::string tokens_text(const std::vector<int>& tokens,
                               const Vocab& vocab) {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += vocab.token_text(t);
  }
  return out;
}

inline void write_lines(const std::string& path,
                        const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  for (const auto& line : lines) out << line << '\n';
}

// corpus.tsv: one "id<TAB>e r v" line per external fact.
inline std::vector<std::string> corpus_lines(const FactTask& task,
                                             const Vocab& vocab) {
  std::vector<std::string> lines;
  int i = 0;
  for (const Fact& f : task.facts) {
    if (!f.external) continue;
    std::vector<int> tokens{vocab.entity(f.entity), vocab.relation(f.relation),
                            vocab.value(f.value)};
    lines.push_back(detail::padded_id("x", i++) + "\t" +
                    tokens_text(tokens, vocab));
  }
  return lines;
}

inline std::vector<std::string> example_lines(const std::vector<Example>& xs,
                                              const Vocab& vocab) {
  std::vector<std::string> lines;
  for (const Example& ex : xs)
    lines.push_back(tokens_text(ex.query, vocab) + "\t" +
                    tokens_text(ex.answer, vocab) + "\t" +
                    std::to_string(ex.label));
  return lines;
}

// heldout.tsv: "id<TAB>query<TAB>answer"; the document to insert later is
// the query followed by the answer.
inline std::vector<std::string> heldout_lines(const FactTask& task,
                                              const Vocab& vocab) {
  std::vector<std::string> lines;
  int i = 0;
  for (const Fact& f : task.heldout) {
    std::vector<int> q{vocab.entity(f.entity), vocab.relation(f.relation)};
    std::vector<int> a{vocab.value(f.value)};
    lines.push_back(detail::padded_id("h", i++) + "\t" +
                    tokens_text(q, vocab) + "\t" + tokens_text(a, vocab));
  }
  return lines;
}

inline void write_task_files(const FactTask& task, const Vocab& vocab,
                             const std::string& dir) {
  write_lines(dir + "/corpus.tsv", corpus_lines(task, vocab));
  write_lines(dir + "/train.tsv", example_lines(task.train, vocab));
  write_lines(dir + "/test.tsv", example_lines(task.test, vocab));
  write_lines(dir + "/heldout.tsv", heldout_lines(task, vocab));
}

// Parses "query<TAB>answer<TAB>label" lines; the answer field may be empty.
inline std::vector<Example> load_examples(const std::string& path,
                                          const Vocab& vocab,
                                          const char* id_prefix) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open example file: " + path);
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IngestError(path + ":" + std::to_string(lineno) +
                        ": expected 'query<TAB>answer<TAB>label'");
    Example ex;
    try {
      ex.query = vocab.encode(line.substr(0, t1));
      const std::string answer = line.substr(t1 + 1, t2 - t1 - 1);
      if (!answer.empty()) ex.answer = vocab.encode(answer);
    } catch (const VocabError& e) {
      throw IngestError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const std::string label = line.substr(t2 + 1);
    if (label != "0" && label != "1")
      throw IngestError(path + ":" + std::to_string(lineno) +
                        ": label must be 0 or 1, got '" + label + "'");
    ex.label = label == "1" ? 1 : 0;
    ex.id = detail::padded_id(id_prefix, static_cast<int>(out.size()));
    out.push_back(ex);
  }
  return out;
}

struct HeldoutFact {
  std::string id;
  std::vector<int> query;
  std::vector<int> answer;
  std::vector<int> doc_tokens;  // query then answer
};

inline std::vector<HeldoutFact> load_heldout(const std::string& path,
                                             const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open heldout file: " + path);
  std::vector<HeldoutFact> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IngestError(path + ":" + std::to_string(lineno) +
                        ": expected 'id<TAB>query<TAB>answer'");
    HeldoutFact h;
    h.id = line.substr(0, t1);
    try {
      h.query = vocab.encode(line.substr(t1 + 1, t2 - t1 - 1));
      h.answer = vocab.encode(line.substr(t2 + 1));
    } catch (const VocabError& e) {
      throw IngestError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    h.doc_tokens = h.query;
    h.doc_tokens.insert(h.doc_tokens.end(), h.answer.begin(), h.answer.end());
    out.push_back(h);
  }
  return out;
}

}  // namespace xrag
