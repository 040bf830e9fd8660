#pragma once

#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "w2s/common.hpp"

namespace w2s {

/// Whitespace tokenizer over a closed word list. Id 0 is end-of-sequence,
/// id 1 is the unknown token.
class Vocabulary {
 public:
  static constexpr int kEos = 0;
  static constexpr int kUnk = 1;

  explicit Vocabulary(const std::vector<std::string>& words) {
    add("<eos>");
    add("<unk>");
    for (const auto& w : words) add(w);
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) ids.push_back(id(w));
    return ids;
  }

  /// Stops at the first end-of-sequence token.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      if (t == kEos) break;
      if (!out.empty()) out += ' ';
      out += word(t);
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    if (index_.contains(w)) throw ValidationError("duplicate vocabulary word '" + w + "'");
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(std::move(w));
  return out;
}

}  // namespace w2s
