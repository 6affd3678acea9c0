#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "xrag/pipeline.hpp"
#include "xrag/task.hpp"

namespace xrag {

// normal: gate as trained. force_retrieve / no_retrieve: decision pinned.
// dense: gate as trained but every MoE layer collapsed onto expert 0.
enum class EvalMode { Normal, ForceRetrieve, NoRetrieve, Dense };

inline EvalMode eval_mode_from(const std::string& s) {
  if (s == "normal") return EvalMode::Normal;
  if (s == "force_retrieve") return EvalMode::ForceRetrieve;
  if (s == "no_retrieve") return EvalMode::NoRetrieve;
  if (s == "dense") return EvalMode::Dense;
  throw ConfigError("unknown eval mode '" + s +
                    "' (normal, force_retrieve, no_retrieve, dense)");
}

struct EvalMetrics {
  int n_queries = 0;
  int n_parametric = 0;
  int n_external = 0;
  double accuracy = 0.0;
  double accuracy_parametric = 0.0;
  double accuracy_external = 0.0;
  // Gate decisions against the oracle labels; a rate with an empty
  // denominator reports 1.0 (vacuously clean).
  double gate_precision = 1.0;
  double gate_recall = 1.0;
  double gate_specificity = 1.0;
  double f_hat = 0.0;
  double mean_cost = 0.0;  // measured multiplies per query, search included
  // Of the queries that actually retrieved, the fraction answered
  // correctly; 0 when none retrieved.
  double retrieval_useful_rate = 0.0;
  std::vector<std::string> trace_lines;  // sorted by query id
  std::vector<CostReport> reports;       // in trace order
};

namespace detail {

// Generated tokens with the trailing end marker removed.
inline std::vector<int> stripped_answer(const std::vector<int>& generated) {
  std::vector<int> out = generated;
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

}  // namespace detail

inline EvalMetrics evaluate(const SystemState& sys, const Corpus& corpus,
                            const std::vector<Example>& queries,
                            const Vocab& vocab, EvalMode mode,
                            std::uint64_t seed) {
  if (queries.empty()) throw ContractError("evaluate with no queries");
  EvalMetrics m;
  int correct = 0, correct_par = 0, correct_ext = 0;
  int tp = 0, fp = 0, fn = 0, tn = 0;
  int retrieved_n = 0, retrieved_correct = 0;
  double cost_sum = 0.0;

  struct Row {
    std::string id;
    std::string line;
    CostReport report;
  };
  std::vector<Row> rows;

  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Example& ex = queries[i];
    InferOptions opts;
    opts.query_id = ex.id;
    switch (mode) {
      case EvalMode::Normal:
        break;
      case EvalMode::ForceRetrieve:
        opts.gate_override = GateOverride::ForceOn;
        break;
      case EvalMode::NoRetrieve:
        opts.gate_override = GateOverride::ForceOff;
        break;
      case EvalMode::Dense:
        opts.dense_override = true;
        break;
    }
    InferenceTrace t = infer(ex.query, sys, corpus,
                             Rng::mix(seed, static_cast<std::uint64_t>(i)),
                             opts);

    const bool ok = detail::stripped_answer(t.answer) == ex.answer;
    correct += ok;
    if (ex.label == 1) {
      ++m.n_external;
      correct_ext += ok;
      t.gate.z_ret == 1 ? ++tp : ++fn;
    } else {
      ++m.n_parametric;
      correct_par += ok;
      t.gate.z_ret == 1 ? ++fp : ++tn;
    }
    if (t.cost.retrieved) {
      ++retrieved_n;
      retrieved_correct += ok;
    }
    cost_sum += t.cost.total_mults();
    rows.push_back({ex.id, trace_line(t, vocab), t.cost});
  }

  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return a.id < b.id; });
  for (auto& r : rows) {
    m.trace_lines.push_back(std::move(r.line));
    m.reports.push_back(r.report);
  }

  m.n_queries = static_cast<int>(queries.size());
  m.accuracy = static_cast<double>(correct) / m.n_queries;
  m.accuracy_parametric =
      m.n_parametric > 0
          ? static_cast<double>(correct_par) / m.n_parametric
          : 1.0;
  m.accuracy_external =
      m.n_external > 0 ? static_cast<double>(correct_ext) / m.n_external
                       : 1.0;
  m.gate_precision =
      tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
  m.gate_recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
  m.gate_specificity =
      tn + fp > 0 ? static_cast<double>(tn) / (tn + fp) : 1.0;
  m.f_hat = static_cast<double>(tp + fp) / m.n_queries;
  m.mean_cost = cost_sum / m.n_queries;
  m.retrieval_useful_rate =
      retrieved_n > 0 ? static_cast<double>(retrieved_correct) / retrieved_n
                      : 0.0;
  return m;
}

// Stable key TAB value block for logs and file output.
inline std::vector<std::string> format_metrics(const EvalMetrics& m) {
  std::vector<std::string> out;
  auto num = [&out](const char* key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s\t%.6f", key, v);
    out.push_back(buf);
  };
  out.push_back("n_queries\t" + std::to_string(m.n_queries));
  out.push_back("n_parametric\t" + std::to_string(m.n_parametric));
  out.push_back("n_external\t" + std::to_string(m.n_external));
  num("accuracy", m.accuracy);
  num("accuracy_parametric", m.accuracy_parametric);
  num("accuracy_external", m.accuracy_external);
  num("gate_precision", m.gate_precision);
  num("gate_recall", m.gate_recall);
  num("gate_specificity", m.gate_specificity);
  num("f_hat", m.f_hat);
  num("mean_cost", m.mean_cost);
  num("retrieval_useful_rate", m.retrieval_useful_rate);
  return out;
}

struct ProbeResult {
  bool correct_before = false;
  bool correct_after = false;
  double prob_before = 0.0;  // marginal likelihood of the true answer
  double prob_after = 0.0;
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;

  bool flipped() const { return !correct_before && correct_after; }
  bool weights_untouched() const { return hash_before == hash_after; }
};

// Asks the held-out query, inserts its document, asks again. The parameters
// are checkpointed either side of the probe; equal file hashes certify that
// the behavior change came from the corpus alone.
inline ProbeResult corpus_update_probe(const SystemState& sys, Corpus& corpus,
                                       const HeldoutFact& fact,
                                       const std::string& work_prefix,
                                       std::uint64_t seed) {
  if (fact.query.empty() || fact.answer.empty())
    throw ContractError("held-out fact needs query and answer tokens");
  ProbeResult r;

  const std::string before_path = work_prefix + ".before.ckpt";
  const std::string after_path = work_prefix + ".after.ckpt";
  sys.save(before_path);
  r.hash_before = file_hash(before_path);

  InferOptions opts;
  opts.query_id = fact.id;
  InferenceTrace t0 = infer(fact.query, sys, corpus, seed, opts);
  r.correct_before = detail::stripped_answer(t0.answer) == fact.answer;
  r.prob_before = marginal_likelihood(fact.query, fact.answer, sys, corpus);

  corpus.add(fact.id, fact.doc_tokens, sys.model.token_embedding());

  InferenceTrace t1 = infer(fact.query, sys, corpus, seed, opts);
  r.correct_after = detail::stripped_answer(t1.answer) == fact.answer;
  r.prob_after = marginal_likelihood(fact.query, fact.answer, sys, corpus);

  sys.save(after_path);
  r.hash_after = file_hash(after_path);
  return r;
}

}  // namespace xrag
