#pragma once

#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "xrag/errors.hpp"

namespace xrag {

// Token inventory for the synthetic fact task: three reserved markers, then
// entity, relation, and value tokens in fixed blocks. Ids are therefore a
// pure function of the three block sizes.
class Vocab {
 public:
  static constexpr int kSep = 0;  // separates query from each document
  static constexpr int kAns = 1;  // marks where the answer begins
  static constexpr int kEos = 2;  // ends the answer

  Vocab(int n_entities, int n_relations, int n_values)
      : n_entities_(n_entities),
        n_relations_(n_relations),
        n_values_(n_values) {
    if (n_entities < 1 || n_relations < 1 || n_values < 1)
      throw VocabError("vocabulary blocks must be nonempty");
    for (int i = 0; i < size(); ++i) ids_[token_text(i)] = i;
  }

  int size() const { return 3 + n_entities_ + n_relations_ + n_values_; }
  int n_entities() const { return n_entities_; }
  int n_relations() const { return n_relations_; }
  int n_values() const { return n_values_; }

  int entity(int i) const { return checked(i, n_entities_, 3, "entity"); }
  int relation(int i) const {
    return checked(i, n_relations_, 3 + n_entities_, "relation");
  }
  int value(int i) const {
    return checked(i, n_values_, 3 + n_entities_ + n_relations_, "value");
  }

  bool is_value(int id) const {
    return id >= 3 + n_entities_ + n_relations_ && id < size();
  }

  std::string token_text(int id) const {
    if (id == kSep) return "<sep>";
    if (id == kAns) return "<ans>";
    if (id == kEos) return "<eos>";
    if (id < 0 || id >= size())
      throw VocabError("token id " + std::to_string(id) +
                       " outside vocabulary of " + std::to_string(size()));
    if (id < 3 + n_entities_) return "e" + std::to_string(id - 3);
    if (id < 3 + n_entities_ + n_relations_)
      return "r" + std::to_string(id - 3 - n_entities_);
    return "v" + std::to_string(id - 3 - n_entities_ - n_relations_);
  }

  int id_of(const std::string& text) const {
    const auto it = ids_.find(text);
    if (it == ids_.end())
      throw VocabError("unknown token '" + text + "'");
    return it->second;
  }

  std::vector<int> encode(const std::string& space_separated) const {
    std::vector<int> out;
    std::istringstream ss(space_separated);
    std::string tok;
    while (ss >> tok) out.push_back(id_of(tok));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out += ' ';
      out += token_text(id);
    }
    return out;
  }

 private:
  int checked(int i, int block, int base, const char* what) const {
    if (i < 0 || i >= block)
      throw VocabError(std::string(what) + " index " + std::to_string(i) +
                       " outside block of " + std::to_string(block));
    return base + i;
  }

  int n_entities_, n_relations_, n_values_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace xrag
