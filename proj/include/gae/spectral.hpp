// Symmetric eigendecomposition, subspaces, projector arithmetic.
#pragma once

#include "gae/common.hpp"

namespace gae {

struct ActivationBatch;  // explainer.hpp

// d x d symmetric PSD matrix with its cached, descending eigendecomposition.
struct SecondMoment {
  int dim = 0;
  Mat matrix;        // symmetrized
  Vec eigenvalues;   // descending
  Mat eigenvectors;  // columns paired with eigenvalues

  double trace() const { return matrix.trace(); }
};

// rank-r orthonormal basis; projector() is basis * basis^T.
struct Subspace {
  int ambient_dim = 0;
  int rank = 0;
  Mat basis;                       // d x r, orthonormal columns
  bool degenerate_eigengap = false;  // warning metadata, not an error

  Mat projector() const { return basis * basis.transpose(); }
};

// Builds a SecondMoment directly from a symmetric matrix (symmetrizes, decomposes).
SecondMoment make_second_moment(const Mat& m);

SecondMoment estimate_second_moment(const ActivationBatch& batch);

// same estimator on a bare row matrix
SecondMoment estimate_second_moment(const Mat& rows);

Subspace top_r_eigenbasis(const SecondMoment& m, int r);

Subspace explainer_subspace(const Mat& w_dec, int r);

double projector_distance(const Subspace& a, const Subspace& b);

// ascending, radians; cosines clamped to [0,1] before arccos
std::vector<double> principal_angles(const Subspace& a, const Subspace& b);

double subspace_overlap(const Subspace& a, const Subspace& b);

double eigengap(const SecondMoment& m, int r);

double second_moment_shift(const SecondMoment& m_id, const SecondMoment& m_ood);

}  // namespace gae
