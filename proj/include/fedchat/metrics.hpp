#pragma once

#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fedchat/model.hpp"

namespace fedchat::evalmetrics {

using Tokens = std::vector<std::string>;

// Lowercases ASCII letters and splits on whitespace.
Tokens metric_tokens(std::string_view text);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct BleuScore {
  double score = 0.0;
  std::vector<double> precisions;  // smoothed, n = 1..max_n
  std::vector<std::size_t> matches;  // raw clipped counts before smoothing
  std::vector<std::size_t> totals;
  double brevity_penalty = 0.0;
};

RougeScore rouge_n(const Tokens& candidate, const Tokens& reference, int n);
RougeScore rouge_l(const Tokens& candidate, const Tokens& reference);
std::size_t lcs_length(const Tokens& a, const Tokens& b);
BleuScore bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n = 4);

struct EvalPair {
  std::string prompt;
  std::string reference;
};

struct PairScores {
  std::string candidate;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double bleu4 = 0.0;
};

struct MetricsReport {
  std::size_t pairs = 0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double bleu4 = 0.0;
  std::vector<PairScores> per_pair;
};

PairScores score_pair(std::string_view candidate, std::string_view reference);

// Means over already-produced candidates; candidates[i] answers pairs[i].
MetricsReport evaluate_predictions(const std::vector<std::string>& candidates, const std::vector<EvalPair>& pairs);

struct EvalOptions {
  int max_new = 48;
  bool stop_at_newline = true;
};

// Greedy-decodes every prompt and scores it against its reference.
MetricsReport evaluate_model(const ParamSet& params, const tinylm::ModelConfig& config,
                             const std::vector<EvalPair>& pairs, const EvalOptions& options = {});

// Rows are metrics, columns are the named reports. Cells show score*100 with
// the raw score alongside.
void print_metrics_table(std::ostream& out, const std::vector<std::pair<std::string, MetricsReport>>& columns);

}  // namespace fedchat::evalmetrics
