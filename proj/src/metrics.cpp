#include "steermoe/metrics.hpp"

#include "steermoe/errors.hpp"

namespace steermoe {

double word_error_rate(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) throw EmptyInputError("word_error_rate: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

std::string join_symbols(std::span<const std::string> symbols) {
  std::string out;
  for (const auto& s : symbols) out += s;
  return out;
}

double char_error_rate(std::span<const std::string> ref, std::span<const std::string> hyp) {
  const std::string r = join_symbols(ref), h = join_symbols(hyp);
  if (r.empty()) throw EmptyInputError("char_error_rate: empty reference");
  return static_cast<double>(edit_distance(std::span<const char>(r), std::span<const char>(h))) /
         static_cast<double>(r.size());
}

}  // namespace steermoe
