#include "gae/diagnostics.hpp"

#include <cmath>

namespace gae {

namespace {

bool within_slack(double lhs, double rhs) {
  return rhs - lhs >= -kBoundSlackTol * std::max({std::abs(lhs), std::abs(rhs), 1.0});
}

BoundReport make_report(std::string context, double lhs, double rhs, bool applicable) {
  BoundReport rep;
  rep.context = std::move(context);
  rep.lhs = lhs;
  rep.rhs = rhs;
  rep.slack = rhs - lhs;
  rep.applicable = applicable;
  rep.satisfied = !applicable || within_slack(lhs, rhs);
  return rep;
}

double eigenvalue_spread(const SecondMoment& m) {
  return m.eigenvalues(0) - m.eigenvalues(m.dim - 1);
}

}  // namespace

double projection_loss(const SecondMoment& m, const Subspace& s) {
  require(m.dim == s.ambient_dim, ErrorKind::dim_mismatch,
          "projection loss: moment and subspace dims differ");
  // tr[(I - BB^T) M] = tr(M) - tr(B^T M B); never negative beyond roundoff
  double captured = (s.basis.transpose() * m.matrix * s.basis).trace();
  return std::max(m.matrix.trace() - captured, 0.0);
}

LossDecomposition decompose_loss(const SecondMoment& m, const Subspace& s, int r) {
  require(s.rank == r, ErrorKind::dim_mismatch, "loss decomposition: subspace rank != r");
  LossDecomposition out;
  out.total = projection_loss(m, s);
  out.irreducible = m.eigenvalues.tail(m.dim - r).sum();  // Ky Fan optimum at rank r
  out.explainer_dependent = out.total - out.irreducible;
  out.eta = out.total > 0.0 ? out.explainer_dependent / out.total : 0.0;
  return out;
}

BoundReport check_gap_bound(const SecondMoment& m_id, const SecondMoment& m_ood, int r) {
  require(m_id.dim == m_ood.dim, ErrorKind::dim_mismatch, "gap bound: moment dims differ");
  double gamma_id = eigengap(m_id, r);
  bool applicable = gamma_id >= kEigengapFloor;
  double shift = second_moment_shift(m_id, m_ood);
  double lhs = 0.0, rhs = 0.0;
  if (applicable) {
    lhs = projector_distance(top_r_eigenbasis(m_ood, r), top_r_eigenbasis(m_id, r));
    rhs = std::sqrt(2.0) / gamma_id * shift;
  }
  BoundReport rep = make_report("gap-vs-shift bound", lhs, rhs, applicable);
  rep.details["gamma_id"] = gamma_id;
  rep.details["shift_norm"] = shift;
  rep.details["rank"] = double(r);
  return rep;
}

std::pair<BoundReport, BoundReport> check_excess_bounds(const SecondMoment& m_ood,
                                                        const Subspace& s, int r) {
  LossDecomposition dec = decompose_loss(m_ood, s, r);
  double gamma_ood = eigengap(m_ood, r);
  double delta = projector_distance(s, top_r_eigenbasis(m_ood, r));
  double excess = dec.explainer_dependent;
  double spread = eigenvalue_spread(m_ood);

  bool lower_applicable = gamma_ood >= kEigengapFloor;
  BoundReport lower =
      make_report("excess lower bound", gamma_ood / 2.0 * delta * delta, excess, lower_applicable);
  BoundReport upper = make_report("excess upper bound", excess, spread / 2.0 * delta * delta, true);
  for (BoundReport* rep : {&lower, &upper}) {
    rep->details["gamma_ood"] = gamma_ood;
    rep->details["delta"] = delta;
    rep->details["excess"] = excess;
    rep->details["eigenvalue_spread"] = spread;
    rep->details["rank"] = double(r);
  }
  return {lower, upper};
}

BoundReport check_degradation_bound(const SecondMoment& m_id, const SecondMoment& m_ood, int r) {
  require(m_id.dim == m_ood.dim, ErrorKind::dim_mismatch, "degradation bound: moment dims differ");
  double gamma_id = eigengap(m_id, r);
  bool applicable = gamma_id >= kEigengapFloor;
  double shift = second_moment_shift(m_id, m_ood);
  double spread = eigenvalue_spread(m_ood);
  double lhs = 0.0, rhs = 0.0;
  if (applicable) {
    Subspace pi_id = top_r_eigenbasis(m_id, r);
    Subspace pi_ood = top_r_eigenbasis(m_ood, r);
    lhs = projection_loss(m_ood, pi_id) - projection_loss(m_ood, pi_ood);
    double delta_bound = std::sqrt(2.0) / gamma_id * shift;
    rhs = spread / 2.0 * delta_bound * delta_bound;
  }
  BoundReport rep = make_report("shift-degradation bound", lhs, rhs, applicable);
  rep.details["gamma_id"] = gamma_id;
  rep.details["shift_norm"] = shift;
  rep.details["eigenvalue_spread"] = spread;
  rep.details["rank"] = double(r);
  return rep;
}

BoundReport check_improvement_bound(const SecondMoment& m_ood, const Subspace& pi_id,
                                      const Subspace& pi_gae, int r) {
  require(pi_id.rank == r && pi_gae.rank == r, ErrorKind::dim_mismatch,
          "improvement bound: subspace rank != r");
  double gamma_ood = eigengap(m_ood, r);
  bool applicable = gamma_ood >= kEigengapFloor;
  double delta_id = projector_distance(pi_id, top_r_eigenbasis(m_ood, r));
  double lhs = projection_loss(m_ood, pi_gae);
  double rhs = projection_loss(m_ood, pi_id) - gamma_ood / 2.0 * delta_id * delta_id;
  BoundReport rep = make_report("adaptation-improvement bound", lhs, rhs, applicable);
  rep.details["gamma_ood"] = gamma_ood;
  rep.details["delta_id"] = delta_id;
  rep.details["loss_id"] = projection_loss(m_ood, pi_id);
  rep.details["rank"] = double(r);
  return rep;
}

}  // namespace gae
