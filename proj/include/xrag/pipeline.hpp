#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "xrag/checkpoint.hpp"
#include "xrag/config.hpp"
#include "xrag/cost.hpp"
#include "xrag/errors.hpp"
#include "xrag/fusion.hpp"
#include "xrag/gate.hpp"
#include "xrag/model.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/rng.hpp"
#include "xrag/tensor.hpp"
#include "xrag/vocab.hpp"

namespace xrag {

enum class FusionMode { Concat, Augment };

inline FusionMode fusion_mode_from(const std::string& s) {
  if (s == "concat") return FusionMode::Concat;
  if (s == "augment") return FusionMode::Augment;
  throw ConfigError("unknown fusion mode '" + s + "' (concat, augment)");
}

// Ablation hook: run the gate as trained, or pin its decision.
enum class GateOverride { Learned, ForceOn, ForceOff };

// Generator, gate, and alternate fusion module built from one Settings
// block, with checkpointing over their combined parameter set.
struct SystemState {
  Settings settings;
  ModelConfig model_config;
  Model model;
  RetrievalGate gate;
  AugmentationModule augment;
  FusionMode fusion;
  GateMode gate_mode;

  explicit SystemState(const Settings& s)
      : settings(s),
        model_config(s.model_config()),
        model(model_config),
        gate(s.model_d_model, s.gate_threshold),
        augment(s.model_d_model, s.fusion_k_docs),
        fusion(fusion_mode_from(s.fusion_mode)),
        gate_mode(gate_mode_from(s.gate_mode)) {}

  // Gate weights stay zero so an untrained gate answers p_ret = 0.5.
  void init_params(Rng& rng) {
    model.init_params(rng, settings.model_init_scale,
                      settings.model_embed_init_scale);
    augment.init_params(rng, settings.model_init_scale);
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    auto out = model.named_params();
    for (auto& p : gate.named_params()) out.push_back(p);
    for (auto& p : augment.named_params()) out.push_back(p);
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named_params()) t.zero_grad();
  }

  void save(const std::string& path) const {
    Checkpoint::capture(model_config, named_params()).write(path);
  }

  void load(const std::string& path) {
    Checkpoint::read(path).restore(named_params());
  }
};

struct InferenceTrace {
  std::string query_id;
  std::vector<int> query;
  GateDecision gate;
  // Retrieval was wanted but nothing was searchable; the trace then equals
  // the forced no-retrieval trace.
  bool corpus_empty = false;
  RetrievalResult retrieved;
  FusedInput fused;
  std::vector<RouterDecision> routers;  // from the final decode pass
  std::vector<int> answer;              // generated ids, EOS kept if produced
  CostReport cost;
};

struct InferOptions {
  GateOverride gate_override = GateOverride::Learned;
  // Run every MoE layer on expert 0 alone, for dense-ablation comparisons.
  bool dense_override = false;
  std::string query_id;
};

// Query representation feeding the gate and the augmentation module: mean of
// the generator's token embeddings.
inline Tensor pooled_query(const Model& model, const std::vector<int>& query,
                           Tape* tape = nullptr) {
  return pool_rows(embedding_rows(model.token_embedding(), query, tape), tape);
}

// Context tokens may fill the window up to here; the rest is reserved for
// the answer-start marker, decoded tokens, and the fused prefix row when
// the augmentation path is active.
inline int context_budget(const SystemState& sys) {
  int reserve = 1 + sys.settings.eval_max_answer_tokens;
  if (sys.fusion == FusionMode::Augment) reserve += 1;
  return sys.model_config.max_seq_len - reserve;
}

namespace detail {

// Derived seed stream for the gate's sampling draw.
constexpr std::uint64_t kGateStream = 0x67617465;

inline int argmax_row(const Tensor& logits, int row) {
  int best = 0;
  for (int j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  return best;
}

inline double row_token_prob(const Tensor& logits, int row, int token) {
  double m = logits.at(row, 0);
  for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits.at(row, j));
  double denom = 0.0;
  for (int j = 0; j < logits.cols(); ++j)
    denom += std::exp(logits.at(row, j) - m);
  return std::exp(logits.at(row, token) - m) / denom;
}

// Fills fused/prefix/doc-token stats for the chosen fusion path. In concat
// mode the documents enter the token sequence; in augment mode they enter
// only through the fused prefix row.
inline void fuse_for_inference(const SystemState& sys, const Corpus& corpus,
                               const std::vector<int>& query,
                               const RetrievalResult& retrieved,
                               const Tensor& h_q, InferenceTrace& t,
                               Tensor& prefix) {
  const int budget = context_budget(sys);
  if (sys.fusion == FusionMode::Concat) {
    t.fused = concat_context(query, retrieved, corpus, budget);
    t.cost.doc_tokens_read =
        static_cast<double>(t.fused.tokens.size() - query.size());
  } else {
    t.fused = concat_context(query, RetrievalResult{}, corpus, budget);
    std::vector<Tensor> doc_embeds;
    double read = 0.0;
    for (const auto& entry : retrieved.entries) {
      const auto& tokens = corpus.doc(entry.index).tokens;
      doc_embeds.push_back(
          pool_rows(embedding_rows(sys.model.token_embedding(), tokens)));
      read += static_cast<double>(tokens.size());
    }
    prefix = sys.augment.fuse(h_q, doc_embeds, nullptr);
    t.cost.doc_tokens_read = read;
  }
}

}  // namespace detail

// One query end to end: gate, optional retrieval, fusion, greedy decoding.
// Generator multiplies in the cost report come from the final decode pass
// alone; a causal model's last pass computes every state the step-by-step
// decode produced, so its count is the cost of the same decode under
// standard incremental (cached) execution, measured rather than estimated.
inline InferenceTrace infer(const std::vector<int>& query,
                            const SystemState& sys, const Corpus& corpus,
                            std::uint64_t seed, const InferOptions& opts = {}) {
  if (query.empty()) throw ContractError("infer on empty query");
  InferenceTrace t;
  t.query_id = opts.query_id;
  t.query = query;

  Tensor h_q = pooled_query(sys.model, query);
  const double p_ret = sys.gate.score(h_q).item();
  Rng gate_rng(Rng::mix(seed, detail::kGateStream));
  switch (opts.gate_override) {
    case GateOverride::Learned:
      t.gate = sys.gate.decide(
          p_ret, sys.gate_mode,
          sys.gate_mode == GateMode::Sample ? &gate_rng : nullptr);
      break;
    case GateOverride::ForceOn:
      t.gate = {p_ret, 1, sys.gate_mode, -1.0};
      break;
    case GateOverride::ForceOff:
      t.gate = {p_ret, 0, sys.gate_mode, -1.0};
      break;
  }

  if (t.gate.z_ret == 1) {
    const std::uint64_t before = counters().search_mults;
    try {
      t.retrieved = corpus.search(embed_tokens(query, sys.model.token_embedding()),
                                  sys.model_config.k_docs);
    } catch (const EmptyCorpusError&) {
    }
    if (t.retrieved.entries.empty()) t.corpus_empty = true;
    t.cost.search_mults =
        static_cast<double>(counters().search_mults - before);
  }

  Tensor prefix;
  detail::fuse_for_inference(sys, corpus, query, t.retrieved, h_q, t, prefix);

  std::vector<int> ids = t.fused.tokens;
  std::vector<int> segs = t.fused.segments;
  ids.push_back(Vocab::kAns);
  segs.push_back(0);

  ForwardOptions fopts;
  fopts.dense_override = opts.dense_override;
  if (prefix.defined()) fopts.prefix = prefix;

  OpCounters before_last = counters();
  for (int step = 0; step < sys.settings.eval_max_answer_tokens; ++step) {
    before_last = counters();
    ForwardResult fr = sys.model.forward(ids, segs, nullptr, fopts);
    t.routers = std::move(fr.routers);
    const int next = detail::argmax_row(fr.logits, fr.logits.rows() - 1);
    t.answer.push_back(next);
    ids.push_back(next);
    segs.push_back(0);
    if (next == Vocab::kEos) break;
  }

  const OpCounters& now = counters();
  t.cost.dense_mults =
      static_cast<double>(now.dense_mults - before_last.dense_mults);
  t.cost.attention_mults =
      static_cast<double>(now.attention_mults - before_last.attention_mults);
  t.cost.expert_mults =
      static_cast<double>(now.expert_mults - before_last.expert_mults);
  t.cost.query_tokens = static_cast<double>(query.size());
  t.cost.answer_tokens = static_cast<double>(t.answer.size());
  t.cost.retrieved = t.gate.z_ret == 1 && !t.retrieved.entries.empty();
  t.cost.n_total_params =
      static_cast<std::uint64_t>(Model::n_total_params(sys.model_config));
  t.cost.n_active_params =
      static_cast<std::uint64_t>(Model::n_active_params(sys.model_config));
  return t;
}

// Probability of the given answer under one branch of the gate: the product
// of per-token next-token probabilities with the context fixed.
inline double branch_likelihood(const std::vector<int>& query,
                                const std::vector<int>& answer,
                                const SystemState& sys, const Corpus& corpus,
                                bool with_retrieval) {
  RetrievalResult retrieved;
  if (with_retrieval && corpus.size() > 0)
    retrieved = corpus.search(embed_tokens(query, sys.model.token_embedding()),
                              sys.model_config.k_docs);

  InferenceTrace scratch;
  Tensor prefix;
  Tensor h_q = pooled_query(sys.model, query);
  detail::fuse_for_inference(sys, corpus, query, retrieved, h_q, scratch,
                             prefix);

  std::vector<int> ids = scratch.fused.tokens;
  std::vector<int> segs = scratch.fused.segments;
  const int n_ctx = static_cast<int>(ids.size());
  ids.push_back(Vocab::kAns);
  segs.push_back(0);
  for (int a : answer) {
    ids.push_back(a);
    segs.push_back(0);
  }

  ForwardOptions fopts;
  if (prefix.defined()) fopts.prefix = prefix;
  ForwardResult fr = sys.model.forward(ids, segs, nullptr, fopts);

  const int offset = prefix.defined() ? 1 : 0;
  double prob = 1.0;
  for (std::size_t j = 0; j < answer.size(); ++j)
    prob *= detail::row_token_prob(
        fr.logits, n_ctx + offset + static_cast<int>(j), answer[j]);
  return prob;
}

// Mixture over the binary retrieval decision:
// p(a|q) = (1 - p_ret) p(a|[q]) + p_ret p(a|[q; docs]).
inline double marginal_likelihood(const std::vector<int>& query,
                                  const std::vector<int>& answer,
                                  const SystemState& sys,
                                  const Corpus& corpus) {
  if (query.empty()) throw ContractError("marginal likelihood on empty query");
  if (answer.empty())
    throw ContractError("marginal likelihood on empty answer");
  const double p = sys.gate.score(pooled_query(sys.model, query)).item();
  const double skip =
      p == 1.0 ? 0.0 : branch_likelihood(query, answer, sys, corpus, false);
  const double take =
      p == 0.0 ? 0.0 : branch_likelihood(query, answer, sys, corpus, true);
  return (1.0 - p) * skip + p * take;
}

// Tab-separated per-query record: id, p_ret, z_ret, retrieved ids, answer
// text, total multiplies, search multiplies, context tokens read.
inline std::string trace_line(const InferenceTrace& t, const Vocab& vocab) {
  char p_buf[32];
  std::snprintf(p_buf, sizeof(p_buf), "%.6f", t.gate.p_ret);
  std::string docs;
  for (const auto& e : t.retrieved.entries) {
    if (!docs.empty()) docs += ',';
    docs += e.id;
  }
  if (docs.empty()) docs = "-";
  std::string answer;
  for (int a : t.answer) {
    if (!answer.empty()) answer += ' ';
    answer += vocab.token_text(a);
  }
  if (answer.empty()) answer = "-";
  auto count = [](double v) {
    return std::to_string(static_cast<long long>(std::llround(v)));
  };
  return (t.query_id.empty() ? std::string("-") : t.query_id) + "\t" + p_buf +
         "\t" + std::to_string(t.gate.z_ret) + "\t" + docs + "\t" + answer +
         "\t" + count(t.cost.total_mults()) + "\t" +
         count(t.cost.search_mults) + "\t" + count(t.cost.doc_tokens_read);
}

}  // namespace xrag
