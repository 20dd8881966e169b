#include "fedchat/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

namespace fedchat::evalmetrics {

namespace {

using NgramCounts = std::map<std::vector<std::string_view>, std::size_t>;

NgramCounts ngram_counts(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (n == 0 || tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<std::string_view> key(tokens.begin() + i, tokens.begin() + i + n);
    ++counts[key];
  }
  return counts;
}

std::size_t clipped_overlap(const NgramCounts& candidate, const NgramCounts& reference) {
  std::size_t overlap = 0;
  for (const auto& [gram, count] : candidate) {
    auto it = reference.find(gram);
    if (it != reference.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

RougeScore make_score(double overlap, double cand_total, double ref_total) {
  RougeScore s;
  if (cand_total > 0) s.precision = overlap / cand_total;
  if (ref_total > 0) s.recall = overlap / ref_total;
  if (s.precision + s.recall > 0) s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

}  // namespace

Tokens metric_tokens(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

RougeScore rouge_n(const Tokens& candidate, const Tokens& reference, int n) {
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "rouge_n needs n >= 1");
  const auto un = static_cast<std::size_t>(n);
  const NgramCounts c = ngram_counts(candidate, un);
  const NgramCounts r = ngram_counts(reference, un);
  const double cand_total = candidate.size() >= un ? static_cast<double>(candidate.size() - un + 1) : 0.0;
  const double ref_total = reference.size() >= un ? static_cast<double>(reference.size() - un + 1) : 0.0;
  return make_score(static_cast<double>(clipped_overlap(c, r)), cand_total, ref_total);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const Tokens& candidate, const Tokens& reference) {
  return make_score(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                    static_cast<double>(reference.size()));
}

BleuScore bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n) {
  if (max_n < 1) throw Error(ErrorCode::kInvalidArgument, "bleu needs max_n >= 1");
  BleuScore out;
  out.precisions.assign(static_cast<std::size_t>(max_n), 0.0);
  out.matches.assign(static_cast<std::size_t>(max_n), 0);
  out.totals.assign(static_cast<std::size_t>(max_n), 0);
  if (candidate.empty() || references.empty()) return out;

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    const NgramCounts c = ngram_counts(candidate, un);
    // Clip each candidate n-gram by its maximum count in any single reference.
    NgramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, count] : ngram_counts(ref, un)) {
        auto& slot = max_ref[gram];
        slot = std::max(slot, count);
      }
    }
    out.matches[un - 1] = clipped_overlap(c, max_ref);
    out.totals[un - 1] = candidate.size() >= un ? candidate.size() - un + 1 : 0;
    double matches = static_cast<double>(out.matches[un - 1]);
    double total = static_cast<double>(out.totals[un - 1]);
    if (matches == 0) {
      matches += 1;
      total += 1;
    }
    const double p = matches / total;
    out.precisions[un - 1] = p;
    log_sum += std::log(p);
  }

  const double c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    const double d = std::abs(len - c);
    const double best = std::abs(r - c);
    if (d < best || (d == best && len < r)) r = len;
  }
  out.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - r / c);
  out.score = out.brevity_penalty * std::exp(log_sum / max_n);
  return out;
}

PairScores score_pair(std::string_view candidate, std::string_view reference) {
  const Tokens c = metric_tokens(candidate);
  const Tokens r = metric_tokens(reference);
  PairScores s;
  s.candidate = std::string(candidate);
  s.rouge1 = rouge_n(c, r, 1).f1;
  s.rouge2 = rouge_n(c, r, 2).f1;
  s.rougeL = rouge_l(c, r).f1;
  s.bleu4 = bleu(c, {r}, 4).score;
  return s;
}

MetricsReport evaluate_predictions(const std::vector<std::string>& candidates, const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kEmptyDataset, "no evaluation pairs");
  if (candidates.size() != pairs.size()) throw Error(ErrorCode::kInvalidArgument, "one candidate per pair expected");
  MetricsReport report;
  report.pairs = pairs.size();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairScores s = score_pair(candidates[i], pairs[i].reference);
    report.rouge1 += s.rouge1;
    report.rouge2 += s.rouge2;
    report.rougeL += s.rougeL;
    report.bleu4 += s.bleu4;
    report.per_pair.push_back(std::move(s));
  }
  const auto n = static_cast<double>(pairs.size());
  report.rouge1 /= n;
  report.rouge2 /= n;
  report.rougeL /= n;
  report.bleu4 /= n;
  return report;
}

MetricsReport evaluate_model(const ParamSet& params, const tinylm::ModelConfig& config,
                             const std::vector<EvalPair>& pairs, const EvalOptions& options) {
  if (pairs.empty()) throw Error(ErrorCode::kEmptyDataset, "no evaluation pairs");
  tinylm::GenerateOptions g;
  g.stop_at_newline = options.stop_at_newline;
  std::vector<std::string> candidates;
  candidates.reserve(pairs.size());
  for (const auto& p : pairs) candidates.push_back(tinylm::generate(params, config, p.prompt, options.max_new, g));
  return evaluate_predictions(candidates, pairs);
}

void print_metrics_table(std::ostream& out, const std::vector<std::pair<std::string, MetricsReport>>& columns) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-10s", "Metric");
  out << buf;
  for (const auto& [name, _] : columns) {
    std::snprintf(buf, sizeof buf, " | %-18s", name.c_str());
    out << buf;
  }
  out << '\n';
  const std::pair<const char*, double MetricsReport::*> rows[] = {{"Rouge-1", &MetricsReport::rouge1},
                                                                   {"Rouge-2", &MetricsReport::rouge2},
                                                                   {"Rouge-L", &MetricsReport::rougeL},
                                                                   {"BLEU-4", &MetricsReport::bleu4}};
  for (const auto& [label, field] : rows) {
    std::snprintf(buf, sizeof buf, "%-10s", label);
    out << buf;
    for (const auto& [_, report] : columns) {
      const double v = report.*field;
      std::snprintf(buf, sizeof buf, " | %7.3f (%.4f)   ", 100.0 * v, v);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace fedchat::evalmetrics
