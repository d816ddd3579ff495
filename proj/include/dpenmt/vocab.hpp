#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpenmt/error.hpp"

namespace dpenmt {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kNumReservedIds = 4;

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(std::move(tok));
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw input_error("cannot write " + path);
  for (const auto& line : lines) out << line << '\n';
}

// Token <-> id map with the four reserved ids in front.
class Vocab {
 public:
  Vocab() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
  }

  // Tokens ordered by descending frequency, ties by token text.
  static Vocab build(const std::vector<std::string>& lines) {
    std::map<std::string, std::size_t> freq;
    for (const auto& line : lines)
      for (auto& tok : split_tokens(line)) ++freq[tok];
    std::vector<std::pair<std::string, std::size_t>> order(freq.begin(), freq.end());
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, n] : order) v.add(tok);
    return v;
  }

  int add(const std::string& tok) {
    auto [it, inserted] = index_.emplace(tok, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(tok);
    return it->second;
  }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw contract_error("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    toks.reserve(ids.size());
    for (int i : ids) toks.push_back(token(i));
    return toks;
  }

  std::string decode_line(const std::vector<int>& ids) const {
    std::ostringstream os;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) os << ' ';
      os << token(ids[i]);
    }
    return os.str();
  }

  void save(const std::string& path) const { write_lines(path, tokens_); }

  static Vocab load(const std::string& path) {
    auto lines = read_lines(path);
    if (lines.size() < kNumReservedIds || lines[0] != "<pad>" || lines[1] != "<bos>" ||
        lines[2] != "<eos>" || lines[3] != "<unk>")
      throw input_error("vocab file " + path + " does not start with the reserved tokens");
    Vocab v;
    for (std::size_t i = kNumReservedIds; i < lines.size(); ++i) {
      if (lines[i].empty()) throw input_error("vocab file " + path + ": empty token at line " +
                                              std::to_string(i + 1));
      v.add(lines[i]);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Parallel corpus of token-id sequences.
struct Bitext {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;

  std::size_t size() const { return src.size(); }

  static Bitext encode(const std::vector<std::string>& src_lines,
                       const std::vector<std::string>& tgt_lines, const Vocab& src_vocab,
                       const Vocab& tgt_vocab) {
    if (src_lines.size() != tgt_lines.size())
      throw input_error("bitext: " + std::to_string(src_lines.size()) + " source lines vs " +
                        std::to_string(tgt_lines.size()) + " target lines");
    Bitext b;
    b.src.reserve(src_lines.size());
    b.tgt.reserve(tgt_lines.size());
    for (std::size_t i = 0; i < src_lines.size(); ++i) {
      b.src.push_back(src_vocab.encode(split_tokens(src_lines[i])));
      b.tgt.push_back(tgt_vocab.encode(split_tokens(tgt_lines[i])));
      if (b.src.back().empty() || b.tgt.back().empty())
        throw input_error("bitext: empty sentence at line " + std::to_string(i + 1));
    }
    return b;
  }
};

inline std::string ids_to_line(const std::vector<int>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
  return os.str();
}

}  // namespace dpenmt
