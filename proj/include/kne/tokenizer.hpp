#pragma once

#include <map>
#include <string>
#include <vector>

#include "kne/common.hpp"

namespace kne {

// Whitespace tokenizer over a closed vocabulary: one token per word.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const;
  int id(const std::string& word) const;  // fails loudly on unknown words
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

std::vector<std::string> split_words(const std::string& text);

}  // namespace kne
