#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/data_synth.hpp"

namespace mpoxvlm {

// Word-level tokenizer over the closed template lexicon with per-byte
// fallback for out-of-lexicon words. encode/decode is the identity on every
// single-spaced string, in particular on all template-generated text.
class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kSep = 2;
  static constexpr int kByteBase = 3;  // 256 byte tokens
  static constexpr int kWordBase = kByteBase + 256;

  static Tokenizer from_vocab(std::vector<std::string> words) {
    Tokenizer t;
    t.words_ = std::move(words);
    for (size_t i = 0; i < t.words_.size(); ++i) {
      require(t.word_to_id_.emplace(t.words_[i], kWordBase + static_cast<int>(i)).second,
              "duplicate vocabulary word: " + t.words_[i]);
    }
    return t;
  }

  // Deterministic lexicon: every word any template can emit.
  static Tokenizer build_default() {
    std::set<std::string> seen;
    std::vector<std::string> words;
    auto add_words = [&](const std::string& text) {
      for (const auto& w : split_words(text)) {
        if (seen.insert(w).second) words.push_back(w);
      }
    };

    add_words(std::string(kQuestionText));
    add_words(render_options_text());
    add_words(std::string(kMpoxOption));
    add_words(std::string(kNonMpoxOption));

    ClinicalAttributes a;
    a.disease_id = 57;
    for (int fitz = 0; fitz <= 6; ++fitz) {
      for (int part = 0; part <= 11; ++part) {
        for (int age = 0; age <= 1; ++age) {
          for (int gender = 0; gender <= 2; ++gender) {
            a.fitzpatrick = fitz;
            a.body_part = part;
            a.age_group = static_cast<AgeGroup>(age);
            a.gender = static_cast<GenderPresentation>(gender);
            add_words(render_context(a));
          }
        }
      }
    }

    // Caption lexicon for the contrastive stage.
    static const char* caption_words[] = {"a",    "photo", "of",   "skin",  "with",
                                          "lesions.", "unspecified", "pale", "fair",
                                          "olive", "tan",  "brown", "dark", "zero",
                                          "one",  "two",  "three", "four",  "five",
                                          "six",  "ring", "streak"};
    for (const char* w : caption_words) {
      if (seen.insert(w).second) words.emplace_back(w);
    }

    std::sort(words.begin(), words.end());
    return from_vocab(std::move(words));
  }

  int vocab_size() const { return kWordBase + static_cast<int>(words_.size()); }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
      auto it = word_to_id_.find(w);
      if (it != word_to_id_.end()) {
        ids.push_back(it->second);
      } else {
        for (unsigned char c : w) ids.push_back(kByteBase + c);
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    bool word_open = false;  // inside a byte-fallback word
    for (int id : ids) {
      if (id == kBos || id == kEos || id == kSep) continue;
      if (id >= kByteBase && id < kWordBase) {
        if (!word_open && !out.empty()) out += ' ';
        out += static_cast<char>(id - kByteBase);
        word_open = true;
      } else {
        require(id >= kWordBase && id < vocab_size(),
                "token id out of range: " + std::to_string(id));
        if (!out.empty()) out += ' ';
        out += words_[static_cast<size_t>(id - kWordBase)];
        word_open = false;
      }
    }
    return out;
  }

  std::string token_name(int id) const {
    switch (id) {
      case kBos: return "<bos>";
      case kEos: return "<eos>";
      case kSep: return "<sep>";
      default: break;
    }
    if (id >= kByteBase && id < kWordBase) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "<0x%02X>", id - kByteBase);
      return buf;
    }
    require(id >= kWordBase && id < vocab_size(), "token id out of range");
    return words_[static_cast<size_t>(id - kWordBase)];
  }

  // Vocabulary file: one token per line, line number = id, specials first.
  void save(const std::filesystem::path& path) const {
    std::string out;
    for (int id = 0; id < vocab_size(); ++id) {
      out += token_name(id);
      out += '\n';
    }
    write_file(path, out);
  }

  static Tokenizer load(const std::filesystem::path& path) {
    std::string content = read_file(path);
    std::vector<std::string> lines;
    size_t pos = 0;
    while (pos < content.size()) {
      size_t end = content.find('\n', pos);
      if (end == std::string::npos) end = content.size();
      lines.push_back(content.substr(pos, end - pos));
      pos = end + 1;
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    require(lines.size() >= kWordBase, "vocabulary file too short");
    require(lines[0] == "<bos>" && lines[1] == "<eos>" && lines[2] == "<sep>",
            "vocabulary file must start with <bos>, <eos>, <sep>");
    std::vector<std::string> words(lines.begin() + kWordBase, lines.end());
    return from_vocab(std::move(words));
  }

  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos < text.size()) {
      size_t end = text.find(' ', pos);
      if (end == std::string::npos) end = text.size();
      if (end > pos) out.push_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace mpoxvlm
