#include "gae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace gae {

void LogitHead::validate() const {
  require(d >= 1 && vocab >= 1, ErrorKind::bad_input, "head dims must be positive");
  require(weight.rows() == vocab && weight.cols() == d && bias.size() == vocab,
          ErrorKind::dim_mismatch, "head tensor shapes inconsistent");
  require(weight.allFinite() && bias.allFinite(), ErrorKind::bad_input,
          "head has non-finite entries");
}

Vec LogitHead::logits(const Vec& h) const {
  require(h.size() == d, ErrorKind::dim_mismatch, "head input width mismatch");
  return weight * h + bias;
}

namespace {

void check_compatible(const Dictionary& dict, const LogitHead& head, int target) {
  dict.validate();
  head.validate();
  require(head.d == dict.d_dec, ErrorKind::dim_mismatch,
          "head reads the decoder output; widths differ");
  require(target >= 0 && target < head.vocab, ErrorKind::bad_input, "target logit out of range");
}

}  // namespace

std::vector<int> rank_features(const Dictionary& dict, const LogitHead& head, const Vec& input,
                               int target) {
  check_compatible(dict, head, target);
  Vec z = encode(dict, input);
  // per-feature direct effect on the target logit
  Vec score = z.cwiseProduct(dict.w_dec.transpose() * head.weight.row(target).transpose());
  std::vector<int> order(dict.k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return score(a) > score(b); });
  return order;
}

AblationOutcome ablate_and_score(const Dictionary& dict, const LogitHead& head, const Vec& input,
                                 int target, const std::vector<int>& budgets) {
  check_compatible(dict, head, target);
  require(!budgets.empty(), ErrorKind::bad_input, "need at least one budget");
  for (size_t i = 0; i < budgets.size(); ++i) {
    require(budgets[i] >= 1, ErrorKind::bad_input, "budgets must be positive");
    require(i == 0 || budgets[i] > budgets[i - 1], ErrorKind::bad_input, "budgets must ascend");
  }
  Vec z = encode(dict, input);
  Vec head_row = head.weight.row(target).transpose();
  double bias_part = head_row.dot(dict.b_dec) + head.bias(target);
  std::vector<int> order = rank_features(dict, head, input, target);

  AblationOutcome out;
  out.l_full = head_row.dot(dict.w_dec * z) + bias_part;
  out.l_empty = bias_part;
  Vec masked = z;
  int zeroed = 0;
  for (int m : budgets) {
    if (m > dict.k) {
      std::cerr << "warning: ablation budget " << m << " exceeds dictionary size " << dict.k
                << "; skipped\n";
      continue;
    }
    while (zeroed < m) masked(order[zeroed++]) = 0.0;
    out.l_at_budget[m] = head_row.dot(dict.w_dec * masked) + bias_part;
  }
  out.excluded = std::abs(out.l_full - out.l_empty) < kAblationExclusionThreshold;
  return out;
}

std::optional<double> ncomp(const AblationOutcome& outcome, int m_star) {
  auto it = outcome.l_at_budget.find(m_star);
  require(it != outcome.l_at_budget.end(), ErrorKind::bad_input,
          "outcome holds no logit at the requested budget");
  if (outcome.excluded) return std::nullopt;
  return (outcome.l_full - it->second) / std::abs(outcome.l_full - outcome.l_empty);
}

std::optional<double> naopc(const AblationOutcome& outcome, const std::vector<int>& budgets) {
  if (outcome.excluded) return std::nullopt;
  double sum = 0.0;
  int count = 0;
  for (int m : budgets) {
    auto it = outcome.l_at_budget.find(m);
    if (it == outcome.l_at_budget.end()) continue;
    sum += (outcome.l_full - it->second) / std::abs(outcome.l_full - outcome.l_empty);
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

namespace {

double cross_entropy(const Vec& logits, int target) {
  double top = logits.maxCoeff();
  double lse = top + std::log((logits.array() - top).exp().sum());
  return lse - logits(target);
}

}  // namespace

double delta_ce(const Dictionary& dict, const LogitHead& head, const ActivationBatch& batch,
                const std::vector<int>& targets) {
  dict.validate();
  head.validate();
  batch.validate();
  require(batch.n() >= 1, ErrorKind::bad_input, "empty batch");
  require(int(targets.size()) == batch.n(), ErrorKind::dim_mismatch,
          "one target per batch row required");
  const Mat& truth = batch.reconstruction_target();
  require(head.d == dict.d_dec && head.d == int(truth.cols()), ErrorKind::dim_mismatch,
          "head reads the decoder output; widths differ");
  Mat recon = encode_batch(dict, batch.data) * dict.w_dec.transpose();
  recon.rowwise() += dict.b_dec.transpose();
  double total = 0.0;
  for (int i = 0; i < batch.n(); ++i) {
    int t = targets[i];
    require(t >= 0 && t < head.vocab, ErrorKind::bad_input, "target logit out of range");
    total += cross_entropy(head.logits(recon.row(i).transpose()), t) -
             cross_entropy(head.logits(truth.row(i).transpose()), t);
  }
  return total / batch.n();
}

double dla(const Dictionary& dict, const LogitHead& head, const Vec& input, int target,
           int feature) {
  check_compatible(dict, head, target);
  require(feature >= 0 && feature < dict.k, ErrorKind::bad_input, "feature index out of range");
  Vec z = encode(dict, input);
  return z(feature) * head.weight.row(target).dot(dict.w_dec.col(feature));
}

}  // namespace gae
