#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steermoe/kernels.hpp"

namespace steermoe {

struct EditCounts {
  Index substitutions = 0;
  Index insertions = 0;
  Index deletions = 0;
  Index total() const { return substitutions + insertions + deletions; }
};

// Unit-cost Levenshtein alignment of hyp against ref. Among minimal
// alignments, prefers substitutions, then deletions, then insertions.
template <typename T>
EditCounts edit_counts(std::span<const T> ref, std::span<const T> hyp) {
  const size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<Index>> d(n + 1, std::vector<Index>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) d[i][0] = static_cast<Index>(i);
  for (size_t j = 0; j <= m; ++j) d[0][j] = static_cast<Index>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      const Index sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  }
  EditCounts c;
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      c.substitutions += ref[i - 1] == hyp[j - 1] ? 0 : 1;
      --i, --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

template <typename T>
Index edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  return edit_counts(ref, hyp).total();
}

// Edits / |ref| over symbol tokens. Throws EmptyInputError on an empty ref.
double word_error_rate(std::span<const std::string> ref, std::span<const std::string> hyp);

// Same over the characters of the concatenated symbols.
double char_error_rate(std::span<const std::string> ref, std::span<const std::string> hyp);

std::string join_symbols(std::span<const std::string> symbols);

// Micro-averaged error rate: sum of edits / sum of reference lengths.
template <typename T>
double corpus_error_rate(std::span<const std::vector<T>> refs, std::span<const std::vector<T>> hyps) {
  Index edits = 0, length = 0;
  for (size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(std::span<const T>(refs[i]), std::span<const T>(hyps[i]));
    length += static_cast<Index>(refs[i].size());
  }
  return length ? static_cast<double>(edits) / static_cast<double>(length) : 0.0;
}

}  // namespace steermoe
