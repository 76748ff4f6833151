#pragma once

#include <algorithm>
#include <cctype>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "keyplan/common.hpp"

namespace keyplan {

/// Word-level tokenizer over a fixed word list. Id 0 is UNK; ids are local to
/// the language region, which starts at 0 in the unified vocabulary.
class LanguageCodec {
 public:
  static constexpr int kUnk = 0;

  LanguageCodec() : LanguageCodec(default_words()) {}

  explicit LanguageCodec(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i) + 1);
  }

  static std::vector<std::string> default_words() {
    return {"put",  "block", "on",  "pad",   "red",   "green", "blue", "yellow", "tidy", "up",
            "then", "the",   "a",   "place", "move",  "pick",  "and",  "to",     "into", "onto",
            "cube", "mat",   "top", "of",    "white", "black", "left", "right"};
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
      std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
      auto it = index_.find(word);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
  }

  int size() const { return static_cast<int>(words_.size()) + 1; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace keyplan
