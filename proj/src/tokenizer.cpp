#include "romelab/tokenizer.hpp"

#include "romelab/error.hpp"

namespace romelab {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Tokenizer::Tokenizer() {
  add("<s>");
  add(".");
}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  for (const auto& w : words) add(w);
  if (size() < 2 || words_[kBos] != "<s>" || words_[kPeriod] != ".") {
    fail(ErrorCode::kFormat, "tokenizer: vocabulary must start with \"<s>\" and \".\"");
  }
}

int Tokenizer::add(const std::string& word) {
  if (word.empty() || word.find(' ') != std::string::npos) {
    fail(ErrorCode::kTokenization, "tokenizer: invalid word '" + word + "'");
  }
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const int id = size();
  words_.push_back(word);
  index_.emplace(word, id);
  return id;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::vector<int> Tokenizer::encode_prompt(std::string_view text) const {
  std::vector<int> ids{kBos};
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

int Tokenizer::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) {
    fail(ErrorCode::kTokenization, "tokenizer: unknown word '" + std::string(word) + "'");
  }
  return it->second;
}

bool Tokenizer::contains(std::string_view word) const {
  return index_.count(std::string(word)) != 0;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || id >= size()) {
    fail(ErrorCode::kBounds, "tokenizer: id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

}  // namespace romelab
