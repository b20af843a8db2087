#pragma once

// Causal-faithfulness metrics under zero-residual feature ablation against a
// linear logit head, plus per-feature direct logit attribution.

#include <map>
#include <optional>
#include <vector>

#include "gae/explainer.hpp"

namespace gae {

struct LogitHead {
  int d = 0;      // input width (must match the dictionary's decoder output)
  int vocab = 0;  // number of logits
  Mat weight;     // vocab x d
  Vec bias;       // vocab
  void validate() const;
  Vec logits(const Vec& h) const;
};

// Items whose full-vs-empty logit swing is below this never enter aggregates.
inline constexpr double kAblationExclusionThreshold = 0.1;

struct AblationOutcome {
  double l_full = 0.0;               // target logit under full reconstruction
  double l_empty = 0.0;              // all features zeroed, decoder bias kept
  std::map<int, double> l_at_budget;  // budget m -> logit with top-m zeroed
  bool excluded = false;             // |l_full - l_empty| below threshold
};

// Feature indices sorted by direct effect on the target logit, descending;
// ties break toward the lower index.
std::vector<int> rank_features(const Dictionary& dict, const LogitHead& head, const Vec& input,
                               int target);

// Zero-residual ablation curve: reconstruct with the top-m ranked features
// zeroed for each budget. Budgets must ascend; budgets above the dictionary
// size are skipped with a warning on stderr.
AblationOutcome ablate_and_score(const Dictionary& dict, const LogitHead& head, const Vec& input,
                                 int target, const std::vector<int>& budgets);

// (l_full - l_at[m_star]) / |l_full - l_empty|; empty for excluded outcomes.
std::optional<double> ncomp(const AblationOutcome& outcome, int m_star = 32);

// Mean of the per-budget normalized drops over the requested budgets that the
// outcome actually holds; empty when excluded or when none are present.
std::optional<double> naopc(const AblationOutcome& outcome,
                            const std::vector<int>& budgets = {1, 2, 4, 8, 16, 32, 64, 128});

// Mean cross-entropy through the head with reconstructed activations minus
// with the true ones; targets are row-aligned with the batch.
double delta_ce(const Dictionary& dict, const LogitHead& head, const ActivationBatch& batch,
                const std::vector<int>& targets);

// z_j * <decoder column j, head row of the target logit>.
double dla(const Dictionary& dict, const LogitHead& head, const Vec& input, int target,
           int feature);

}  // namespace gae
