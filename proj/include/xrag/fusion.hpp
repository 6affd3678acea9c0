#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xrag/errors.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/rng.hpp"
#include "xrag/tensor.hpp"
#include "xrag/vocab.hpp"

namespace xrag {

// Generator input assembled from a query and retrieved evidence. Layout is
// [q; SEP; d_1; SEP; ...; d_k]: query tokens carry segment 0 and each SEP
// carries the segment id of the document it introduces (ranks 1..k).
// answer_start is the index at which the caller appends the answer region
// (the ANS marker and any generated tokens, all segment 0).
struct FusedInput {
  std::vector<int> tokens;
  std::vector<int> segments;
  int answer_start = 0;
};

// Concatenates the query with retrieved documents in rank order. When the
// result overruns max_len, tokens drop from the back, so the lowest-ranked
// document loses its tail first, then its separator, then the next document
// up; the query is never cut. Callers wanting headroom for an answer pass a
// reduced max_len.
inline FusedInput concat_context(const std::vector<int>& query,
                                 const RetrievalResult& retrieved,
                                 const Corpus& corpus, int max_len) {
  if (static_cast<int>(query.size()) > max_len)
    throw LengthError("query of " + std::to_string(query.size()) +
                      " tokens exceeds limit " + std::to_string(max_len));
  FusedInput out;
  out.tokens = query;
  out.segments.assign(query.size(), 0);
  int rank = 0;
  for (const auto& entry : retrieved.entries) {
    if (entry.index < 0 || entry.index >= corpus.size())
      throw ContractError("retrieved index " + std::to_string(entry.index) +
                          " not in corpus of " + std::to_string(corpus.size()));
    ++rank;
    out.tokens.push_back(Vocab::kSep);
    out.segments.push_back(rank);
    for (int t : corpus.doc(entry.index).tokens) {
      out.tokens.push_back(t);
      out.segments.push_back(rank);
    }
  }
  if (static_cast<int>(out.tokens.size()) > max_len) {
    out.tokens.resize(max_len);
    out.segments.resize(max_len);
  }
  out.answer_start = static_cast<int>(out.tokens.size());
  return out;
}

// Alternate fusion path: each slot (query = slot 0, documents 1..k by rank)
// has its own linear map; a shared scorer turns the transformed slots into
// mixing weights via softmax, and the fused vector is the weighted sum. The
// result feeds the generator as one prepended position (ForwardOptions
// prefix). The scorer has no bias: a bias shared across slots cancels in
// the softmax.
class AugmentationModule {
 public:
  AugmentationModule(int d_model, int k_docs) : d_model_(d_model) {
    if (d_model < 1) throw ConfigError("augmentation d_model must be >= 1");
    if (k_docs < 1) throw ConfigError("augmentation k_docs must be >= 1");
    for (int j = 0; j <= k_docs; ++j)
      slots_.push_back(Tensor::param(
          d_model, d_model,
          std::vector<double>(static_cast<std::size_t>(d_model) * d_model,
                              0.0)));
    scorer_ = Tensor::param(d_model, 1, std::vector<double>(d_model, 0.0));
  }

  // Slot maps start at identity so an untrained module passes representations
  // through unchanged; the scorer gets small noise to break slot ties.
  void init_params(Rng& rng, double scale) {
    for (auto& t : slots_) {
      for (auto& v : t.value()) v = 0.0;
      for (int i = 0; i < d_model_; ++i) t.at(i, i) = 1.0;
      for (auto& v : t.value()) v += scale * rng.next_gaussian();
    }
    for (auto& v : scorer_.value()) v = scale * rng.next_gaussian();
  }

  // h_q and each document embedding are 1 x d_model rows. With no documents
  // the weight on the single slot is exactly 1, so the result is the plain
  // query transform.
  Tensor fuse(const Tensor& h_q, const std::vector<Tensor>& doc_embeds,
              Tape* tape) const {
    check_row(h_q, "query");
    if (doc_embeds.size() + 1 > slots_.size())
      throw ShapeError(std::to_string(doc_embeds.size()) +
                       " documents but module has " +
                       std::to_string(slots_.size() - 1) + " document slots");
    for (const auto& d : doc_embeds) check_row(d, "document");

    Tensor first = matmul(h_q, slots_[0], tape);
    if (doc_embeds.empty()) return first;

    std::vector<Tensor> transformed{first};
    for (std::size_t j = 0; j < doc_embeds.size(); ++j)
      transformed.push_back(matmul(doc_embeds[j], slots_[j + 1], tape));

    std::vector<Tensor> logits;
    logits.reserve(transformed.size());
    for (const auto& s : transformed)
      logits.push_back(matmul(s, scorer_, tape));
    Tensor alpha = softmax_rows(concat_cols(logits, tape), tape);

    Tensor stacked = concat_rows(transformed, tape);
    Tensor alpha_col = matmul(alpha, Tensor::from(1, 1, {1.0}), tape, true);
    Tensor weighted = scale_rows(stacked, alpha_col, tape);
    Tensor ones = Tensor::filled(1, stacked.rows(), 1.0);
    return matmul(ones, weighted, tape);
  }

  // Mixing weights alone, for inspection; same graph as fuse up to alpha.
  Tensor mixing_weights(const Tensor& h_q, const std::vector<Tensor>& doc_embeds,
                        Tape* tape) const {
    check_row(h_q, "query");
    if (doc_embeds.empty()) return Tensor::from(1, 1, {1.0});
    std::vector<Tensor> logits;
    logits.push_back(matmul(matmul(h_q, slots_[0], tape), scorer_, tape));
    for (std::size_t j = 0; j < doc_embeds.size(); ++j) {
      check_row(doc_embeds[j], "document");
      logits.push_back(
          matmul(matmul(doc_embeds[j], slots_[j + 1], tape), scorer_, tape));
    }
    return softmax_rows(concat_cols(logits, tape), tape);
  }

  int n_slots() const { return static_cast<int>(slots_.size()); }
  int d_model() const { return d_model_; }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t j = 0; j < slots_.size(); ++j)
      out.emplace_back("aug.slot" + std::to_string(j), slots_[j]);
    out.emplace_back("aug.scorer", scorer_);
    return out;
  }

  void zero_grad() {
    for (auto& t : slots_) t.zero_grad();
    scorer_.zero_grad();
  }

 private:
  void check_row(const Tensor& t, const char* what) const {
    if (t.rows() != 1 || t.cols() != d_model_)
      throw ShapeError(std::string(what) + " slot must be 1x" +
                       std::to_string(d_model_) + ", got " +
                       std::to_string(t.rows()) + "x" +
                       std::to_string(t.cols()));
  }

  int d_model_;
  std::vector<Tensor> slots_;
  Tensor scorer_;
};

}  // namespace xrag
