#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace romelab {

/// Whitespace tokenizer over a closed vocabulary.  Id 0 is always the
/// beginning-of-sequence marker and id 1 the sentence terminator ".".
class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kPeriod = 1;

  Tokenizer();
  explicit Tokenizer(const std::vector<std::string>& words);

  // Adds a word if it is not already present; returns its id.
  int add(const std::string& word);

  std::vector<int> encode(std::string_view text) const;
  // encode() with the BOS marker prepended.
  std::vector<int> encode_prompt(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  int id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(std::string_view text);

}  // namespace romelab
