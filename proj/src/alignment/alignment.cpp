#include "coplms/alignment.hpp"

#include <algorithm>
#include <stdexcept>

namespace coplms {

std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double substitution_cost(std::string_view a, std::string_view b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 0.0;
  return static_cast<double>(levenshtein(a, b)) / static_cast<double>(longest);
}

TokenAlignmentMap align_tokens(const std::vector<std::string>& source, const std::vector<std::string>& target) {
  if (source.empty() || target.empty()) throw std::invalid_argument("align_tokens: empty token list");
  const std::size_t n = source.size(), m = target.size();

  enum Move : unsigned char { kSub, kIns, kDel };
  std::vector<double> cost((n + 1) * (m + 1));
  std::vector<Move> move((n + 1) * (m + 1), kSub);
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };

  for (std::size_t i = 0; i <= n; ++i) {
    cost[at(i, 0)] = static_cast<double>(i);
    move[at(i, 0)] = kDel;
  }
  for (std::size_t j = 0; j <= m; ++j) {
    cost[at(0, j)] = static_cast<double>(j);
    move[at(0, j)] = kIns;
  }
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const double sub = cost[at(i - 1, j - 1)] + substitution_cost(source[i - 1], target[j - 1]);
      const double ins = cost[at(i, j - 1)] + 1.0;
      const double del = cost[at(i - 1, j)] + 1.0;
      double best = sub;
      Move mv = kSub;
      if (ins < best) best = ins, mv = kIns;
      if (del < best) best = del, mv = kDel;
      cost[at(i, j)] = best;
      move[at(i, j)] = mv;
    }
  }

  // Backtrace, then replay forwards.
  std::vector<Move> path;
  for (std::size_t i = n, j = m; i > 0 || j > 0;) {
    const Move mv = move[at(i, j)];
    path.push_back(mv);
    if (mv == kSub) --i, --j;
    else if (mv == kIns) --j;
    else --i;
  }
  std::reverse(path.begin(), path.end());

  TokenAlignmentMap out;
  out.source = source;
  out.target = target;
  out.cost = cost[at(n, m)];
  out.mapping.assign(m, 0);
  std::size_t consumed = 0;  // source tokens consumed so far
  std::size_t next_target = 0;
  auto last_source = [&] { return consumed == 0 ? std::size_t{0} : consumed - 1; };
  for (Move mv : path) {
    if (mv == kSub || mv == kIns) {
      // Target next_target starts here: settle the previous one first.
      if (next_target > 0) out.mapping[next_target - 1] = last_source();
      if (mv == kSub) ++consumed;
      ++next_target;
    } else {
      ++consumed;
    }
  }
  if (next_target > 0) out.mapping[next_target - 1] = last_source();
  return out;
}

Tensor project_logits(const Tensor& source_logits, const TokenAlignmentMap& map) {
  if (source_logits.rows() != map.source.size()) {
    throw std::invalid_argument("project_logits: " + std::to_string(source_logits.rows()) +
                                " logit rows for " + std::to_string(map.source.size()) + " source tokens");
  }
  const std::size_t V = source_logits.cols();
  Tensor out({map.mapping.size(), V});
  for (std::size_t j = 0; j < map.mapping.size(); ++j) {
    const std::size_t src = map.mapping[j];
    std::copy_n(source_logits.data() + src * V, V, out.data() + j * V);
  }
  return out;
}

}  // namespace coplms
