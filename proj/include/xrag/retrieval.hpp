#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "xrag/errors.hpp"
#include "xrag/tensor.hpp"
#include "xrag/vocab.hpp"

namespace xrag {

struct Document {
  std::string id;
  std::vector<int> tokens;
  // Unit-normalized mean of token embeddings; all zero when the text is
  // empty, in which case the document is invisible to search.
  std::vector<double> embedding;
};

struct RetrievalResult {
  struct Entry {
    std::string id;
    int index = 0;  // position in the corpus, for direct token access
    double score = 0.0;
  };
  std::vector<Entry> entries;
  std::vector<double> query_embedding;
};

// Mean-pooled token embeddings, L2-normalized. The embedding table is the
// generator's token table, so retrieval quality follows LM training.
inline std::vector<double> embed_tokens(const std::vector<int>& tokens,
                                        const Tensor& table) {
  std::vector<double> out(table.cols(), 0.0);
  if (tokens.empty()) return out;
  for (int id : tokens) {
    if (id < 0 || id >= table.rows())
      throw VocabError("token id " + std::to_string(id) +
                       " outside embedding table");
    for (int j = 0; j < table.cols(); ++j) out[j] += table.at(id, j);
  }
  double norm = 0.0;
  for (double& v : out) {
    v /= static_cast<double>(tokens.size());
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& v : out) v /= norm;
  return out;
}

class Corpus {
 public:
  // Parses `id<TAB>token token ...` lines and embeds every document with
  // the given table. Blank lines are skipped.
  static Corpus ingest(const std::string& path, const Vocab& vocab,
                       const Tensor& embed_table) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file: " + path);
    Corpus c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0)
        throw IngestError(path + ":" + std::to_string(lineno) +
                          ": expected 'id<TAB>tokens'");
      const std::string id = line.substr(0, tab);
      std::vector<int> tokens;
      try {
        tokens = vocab.encode(line.substr(tab + 1));
      } catch (const VocabError& e) {
        throw IngestError(path + ":" + std::to_string(lineno) + ": " +
                          e.what());
      }
      try {
        c.add(id, tokens, embed_table);
      } catch (const IngestError&) {
        throw IngestError(path + ":" + std::to_string(lineno) +
                          ": duplicate document id '" + id + "'");
      }
    }
    return c;
  }

  // Adds and embeds one document; the corpus is unchanged on error.
  void add(const std::string& id, const std::vector<int>& tokens,
           const Tensor& embed_table) {
    if (by_id_.count(id))
      throw IngestError("duplicate document id '" + id + "'");
    Document d;
    d.id = id;
    d.tokens = tokens;
    d.embedding = embed_tokens(tokens, embed_table);
    by_id_.emplace(id, static_cast<int>(docs_.size()));
    docs_.push_back(std::move(d));
    ++embedder_version_;
  }

  // Recomputes every embedding against the current table. Called once per
  // training epoch; between calls the embeddings are frozen snapshots.
  void reembed(const Tensor& embed_table) {
    for (auto& d : docs_) d.embedding = embed_tokens(d.tokens, embed_table);
    ++embedder_version_;
  }

  // Exact top-k by cosine similarity over non-empty documents, largest
  // first, ties broken by insertion order. Selection is by repeated max
  // scan, independent of any library sort.
  RetrievalResult search(const std::vector<double>& query_embedding,
                         int k) const {
    if (docs_.empty())
      throw EmptyCorpusError("search against an empty corpus");
    if (k < 1) throw ContractError("search k must be >= 1");
    const int d = static_cast<int>(query_embedding.size());
    std::vector<double> scores(docs_.size(), 0.0);
    std::vector<bool> eligible(docs_.size(), false);
    std::uint64_t comparisons = 0;
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      if (docs_[i].embedding.empty() ||
          static_cast<int>(docs_[i].embedding.size()) != d)
        throw ShapeError("document embedding width mismatch");
      bool zero = true;
      for (double v : docs_[i].embedding) zero = zero && v == 0.0;
      if (zero) continue;
      eligible[i] = true;
      double dot = 0.0;
      for (int j = 0; j < d; ++j)
        dot += docs_[i].embedding[j] * query_embedding[j];
      scores[i] = dot;
      comparisons += static_cast<std::uint64_t>(d);
    }
    counters().search_mults += comparisons;

    RetrievalResult result;
    result.query_embedding = query_embedding;
    const int want = k;
    for (int pass = 0; pass < want; ++pass) {
      int best = -1;
      for (std::size_t i = 0; i < docs_.size(); ++i) {
        if (!eligible[i]) continue;
        if (best < 0 || scores[i] > scores[best]) best = static_cast<int>(i);
      }
      if (best < 0) break;
      eligible[best] = false;
      result.entries.push_back(
          {docs_[best].id, best, scores[best]});
    }
    return result;
  }

  const Document& doc(int index) const { return docs_.at(index); }
  const Document* find(const std::string& id) const {
    const auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &docs_[it->second];
  }
  int size() const { return static_cast<int>(docs_.size()); }
  // Documents visible to search (non-empty text).
  int searchable() const {
    int n = 0;
    for (const auto& d : docs_) n += !d.tokens.empty();
    return n;
  }
  int embedder_version() const { return embedder_version_; }
  const std::vector<Document>& documents() const { return docs_; }

 private:
  std::vector<Document> docs_;
  std::unordered_map<std::string, int> by_id_;
  int embedder_version_ = 0;
};

}  // namespace xrag
