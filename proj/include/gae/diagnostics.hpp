#pragma once

// Faithfulness-loss surrogate on a second moment, its irreducible /
// explainer-dependent split, and numerical checkers for the spectral bounds
// the adaptation guarantees rest on.

#include <map>
#include <string>
#include <utility>

#include "gae/spectral.hpp"

namespace gae {

struct LossDecomposition {
  double total = 0.0;                // tr[(I - Pi) M]
  double irreducible = 0.0;          // tr[(I - Pi_ood) M] = sum of trailing eigenvalues
  double explainer_dependent = 0.0;  // tr[(Pi_ood - Pi) M]
  double eta = 0.0;                  // explainer_dependent / total, 0 when total == 0
};

// One inequality check: satisfied iff lhs <= rhs up to floating-point slack.
struct BoundReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs
  bool satisfied = false;
  bool applicable = true;  // false when an eigengap hypothesis fails
  std::string context;
  std::map<std::string, double> details;
};

inline constexpr double kBoundSlackTol = 1e-8;
inline constexpr double kEigengapFloor = 1e-12;

// tr[(I - Pi) M]: expected squared residual of projecting activations with
// second moment m onto s.
double projection_loss(const SecondMoment& m, const Subspace& s);

// Split of projection_loss(m, s) against the rank-r top eigenspace of m.
LossDecomposition decompose_loss(const SecondMoment& m, const Subspace& s, int r);

// Gap-vs-shift bound: ||Pi_ood - Pi_id||_F <= sqrt(2)/gamma_id * ||M_ood - M_id||_F.
BoundReport check_gap_bound(const SecondMoment& m_id, const SecondMoment& m_ood, int r);

// Excess-loss sandwich for an arbitrary rank-r subspace s against m_ood:
// gamma_ood/2 * delta^2 <= excess <= (lambda_1 - lambda_d)/2 * delta^2.
// first = lower bound report, second = upper bound report.
std::pair<BoundReport, BoundReport> check_excess_bounds(const SecondMoment& m_ood,
                                                        const Subspace& s, int r);

// Shift-degradation bound: loss increase of the stale ID-active subspace is
// controlled by the second-moment shift through the two bounds above.
BoundReport check_degradation_bound(const SecondMoment& m_id, const SecondMoment& m_ood, int r);

// Adaptation-improvement bound: L(pi_gae) <= L(pi_id) - gamma_ood/2 * delta(pi_id)^2,
// valid when pi_gae spans the top-r eigenspace of the same empirical m_ood.
BoundReport check_improvement_bound(const SecondMoment& m_ood, const Subspace& pi_id,
                                      const Subspace& pi_gae, int r);

}  // namespace gae
