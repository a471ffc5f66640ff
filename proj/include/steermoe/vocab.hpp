#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace steermoe {

// Symbol <-> id mapping. Ids 0..3 are reserved for the special symbols.
class Vocabulary {
 public:
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int instr = 3;
  static constexpr int num_special = 4;

  Vocabulary() = default;
  // Special symbols followed by `symbols` in order.
  static Vocabulary with_symbols(const std::vector<std::string>& symbols);

  // One symbol per line; the line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(symbols_.size()); }
  int id(std::string_view symbol) const;
  const std::string& symbol(int id) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

  std::vector<int> encode(std::span<const std::string> symbols) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.symbols_ == b.symbols_; }

 private:
  explicit Vocabulary(std::vector<std::string> symbols);

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace steermoe
