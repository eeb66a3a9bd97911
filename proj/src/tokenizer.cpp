#include "kne/tokenizer.hpp"

#include <sstream>

namespace kne {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i) {
    auto [it, inserted] = index_.emplace(words_[i], static_cast<int>(i));
    check(inserted, "Vocabulary: duplicate word '", words_[i], "'");
  }
}

const std::string& Vocabulary::word(int id) const {
  check(id >= 0 && id < size(), "Vocabulary: id ", id, " out of range (size ", size(), ")");
  return words_[static_cast<size_t>(id)];
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  check(it != index_.end(), "Vocabulary: unknown word '", word, "'");
  return it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const std::string& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

}  // namespace kne
