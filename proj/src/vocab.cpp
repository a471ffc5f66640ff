#include "steermoe/vocab.hpp"

#include <fstream>

#include "steermoe/errors.hpp"

namespace steermoe {

Vocabulary::Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  for (size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) throw FormatError("vocabulary: empty symbol at id " + std::to_string(i));
    if (!ids_.emplace(symbols_[i], static_cast<int>(i)).second) {
      throw FormatError("vocabulary: duplicate symbol '" + symbols_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::with_symbols(const std::vector<std::string>& symbols) {
  std::vector<std::string> all{"<pad>", "<bos>", "<eos>", "<instr>"};
  all.insert(all.end(), symbols.begin(), symbols.end());
  return Vocabulary(std::move(all));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file " + path.string());
  std::vector<std::string> symbols;
  for (std::string line; std::getline(in, line);) symbols.push_back(line);
  if (symbols.size() < num_special + 1 || symbols[pad] != "<pad>" || symbols[bos] != "<bos>" ||
      symbols[eos] != "<eos>" || symbols[instr] != "<instr>") {
    throw FormatError("vocabulary file " + path.string() + " lacks the reserved symbols");
  }
  return Vocabulary(std::move(symbols));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary file " + path.string());
  for (const auto& s : symbols_) out << s << '\n';
}

int Vocabulary::id(std::string_view symbol) const {
  auto it = ids_.find(std::string(symbol));
  if (it == ids_.end()) throw IndexError("symbol '" + std::string(symbol) + "' not in vocabulary");
  return it->second;
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return symbols_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> symbols) const {
  std::vector<int> out;
  out.reserve(symbols.size());
  for (const auto& s : symbols) out.push_back(id(s));
  return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(symbol(i));
  return out;
}

}  // namespace steermoe
