#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xrag/errors.hpp"

namespace xrag {

enum class SearchKind { Brute, Ann };

inline SearchKind search_kind_from(const std::string& s) {
  if (s == "brute") return SearchKind::Brute;
  if (s == "ann") return SearchKind::Ann;
  throw ConfigError("unknown search kind '" + s + "' (brute, ann)");
}

// Inputs to the analytic per-query cost formula. Every cost is a
// multiply-accumulate count; token counts may be stream means, hence double.
struct CostParams {
  double per_token = 0.0;        // generator multiplies per processed token
  double dense_per_token = 0.0;  // same, for a reference dense baseline
  double doc_tokens = 0.0;       // context tokens added when retrieving
  double corpus_size = 0.0;      // searchable documents
  double retrieval_fraction = 0.0;
  double query_tokens = 0.0;
  double answer_tokens = 0.0;
  SearchKind search = SearchKind::Brute;
  double embed_width = 0.0;    // embedding width for brute-force search
  double search_coeff = 1.0;   // scales both search variants
};

// Brute force scans every document embedding; the ann variant models a
// tree/graph index probing ~log2(M) candidates.
inline double search_cost(const CostParams& p) {
  if (p.corpus_size < 0.0) throw DomainError("negative corpus size");
  if (p.search == SearchKind::Brute)
    return p.search_coeff * p.corpus_size * p.embed_width;
  return p.corpus_size <= 1.0 ? 0.0
                              : p.search_coeff * std::log2(p.corpus_size);
}

// Expected multiplies per query: generation is always paid; with probability
// retrieval_fraction the query additionally pays the search plus the
// generator reading doc_tokens extra context tokens.
inline double expected_cost(const CostParams& p) {
  if (p.retrieval_fraction < 0.0 || p.retrieval_fraction > 1.0)
    throw DomainError("retrieval fraction " +
                      std::to_string(p.retrieval_fraction) +
                      " outside [0, 1]");
  for (double v : {p.per_token, p.doc_tokens, p.query_tokens,
                   p.answer_tokens, p.embed_width})
    if (v < 0.0) throw DomainError("negative cost parameter");
  const double generation = (p.query_tokens + p.answer_tokens) * p.per_token;
  const double retrieval = search_cost(p) + p.doc_tokens * p.per_token;
  return generation + p.retrieval_fraction * retrieval;
}

// Cost of an always-dense baseline with no retrieval at all.
inline double dense_baseline_cost(const CostParams& p) {
  if (p.dense_per_token < 0.0) throw DomainError("negative dense cost");
  return (p.query_tokens + p.answer_tokens) * p.dense_per_token;
}

// Fraction of the baseline's expected cost that the first system saves.
inline double savings_ratio(const CostParams& ours,
                            const CostParams& baseline) {
  const double base = expected_cost(baseline);
  if (base <= 0.0) throw DomainError("baseline cost is zero");
  return 1.0 - expected_cost(ours) / base;
}

// Per-query instrumentation record. Generator multiplies are split by
// category; search multiplies and context tokens read cover the retrieval
// side. Parameter counts contrast the full model with the slice a single
// token actually exercises.
struct CostReport {
  double dense_mults = 0.0;
  double attention_mults = 0.0;
  double expert_mults = 0.0;
  double search_mults = 0.0;
  double doc_tokens_read = 0.0;
  double query_tokens = 0.0;
  double answer_tokens = 0.0;
  bool retrieved = false;
  std::uint64_t n_total_params = 0;
  std::uint64_t n_active_params = 0;

  double generator_mults() const {
    return dense_mults + attention_mults + expert_mults;
  }
  double total_mults() const { return generator_mults() + search_mults; }
};

// Measured-vs-predicted comparison over a query stream. Token statistics
// (retrieval fraction, mean query/answer/context lengths) come from the
// reports; params supplies the calibrated per-token cost and the search
// model.
struct CostValidation {
  double f_hat = 0.0;
  double measured_mean = 0.0;
  double predicted_mean = 0.0;
  double deviation = 0.0;
  double measured_generator = 0.0;
  double predicted_generator = 0.0;
  double generator_deviation = 0.0;
  double measured_search = 0.0;
  double predicted_search = 0.0;
  double search_deviation = 0.0;
};

inline CostValidation validate_against_measurement(
    const std::vector<CostReport>& reports, CostParams params) {
  if (reports.empty()) throw ContractError("no cost reports to validate");
  const double n = static_cast<double>(reports.size());
  double retrieved = 0.0, generator = 0.0, search = 0.0;
  double q_tokens = 0.0, a_tokens = 0.0, d_tokens = 0.0;
  for (const auto& r : reports) {
    retrieved += r.retrieved ? 1.0 : 0.0;
    generator += r.generator_mults();
    search += r.search_mults;
    q_tokens += r.query_tokens;
    a_tokens += r.answer_tokens;
    d_tokens += r.doc_tokens_read;
  }

  CostValidation v;
  v.f_hat = retrieved / n;
  params.retrieval_fraction = v.f_hat;
  params.query_tokens = q_tokens / n;
  params.answer_tokens = a_tokens / n;
  params.doc_tokens = retrieved > 0.0 ? d_tokens / retrieved : 0.0;

  v.measured_generator = generator / n;
  v.measured_search = search / n;
  v.measured_mean = v.measured_generator + v.measured_search;
  // Multiply before dividing so a homogeneous stream (every retrieval scans
  // the same corpus) reproduces the measured mean bit-for-bit.
  v.predicted_search = search_cost(params) * retrieved / n;
  v.predicted_mean = expected_cost(params);
  v.predicted_generator = v.predicted_mean - v.predicted_search;

  auto rel = [](double measured, double predicted) {
    if (predicted == 0.0) {
      if (measured == 0.0) return 0.0;
      throw DomainError("predicted cost is zero but measured is not");
    }
    return std::abs(measured - predicted) / predicted;
  };
  v.deviation = rel(v.measured_mean, v.predicted_mean);
  v.generator_deviation = rel(v.measured_generator, v.predicted_generator);
  v.search_deviation = rel(v.measured_search, v.predicted_search);
  return v;
}

}  // namespace xrag
