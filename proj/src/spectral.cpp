#include "gae/spectral.hpp"
#include "gae/explainer.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

namespace gae {

namespace {

// largest-magnitude entry positive, lowest index breaking magnitude ties
void fix_column_signs(Mat& basis) {
  for (int j = 0; j < basis.cols(); ++j) {
    int arg = 0;
    double best = std::abs(basis(0, j));
    for (int i = 1; i < basis.rows(); ++i) {
      double a = std::abs(basis(i, j));
      if (a > best) { best = a; arg = i; }
    }
    if (basis(arg, j) < 0) basis.col(j) = -basis.col(j);
  }
}

}  // namespace

SecondMoment make_second_moment(const Mat& m) {
  require(m.rows() == m.cols() && m.rows() >= 1, ErrorKind::dim_mismatch,
          "second moment must be square and nonempty");
  require(m.allFinite(), ErrorKind::bad_input, "second moment has non-finite entries");
  SecondMoment out;
  out.dim = int(m.rows());
  out.matrix = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(out.matrix);
  require(es.info() == Eigen::Success, ErrorKind::bad_input, "eigendecomposition failed");
  // Eigen returns ascending order
  out.eigenvalues = es.eigenvalues().reverse();
  out.eigenvectors = es.eigenvectors().rowwise().reverse();
  double lam1 = std::max(out.eigenvalues[0], 0.0);
  require(out.eigenvalues[out.dim - 1] >= -1e-8 * std::max(lam1, 1.0),
          ErrorKind::bad_input, "matrix is not numerically PSD");
  return out;
}

SecondMoment estimate_second_moment(const ActivationBatch& batch) {
  batch.validate();
  return estimate_second_moment(batch.data);
}

SecondMoment estimate_second_moment(const Mat& rows) {
  require(rows.rows() >= 1, ErrorKind::bad_input, "empty batch");
  require(rows.allFinite(), ErrorKind::bad_input, "batch has non-finite entries");
  Mat m = (rows.transpose() * rows) / double(rows.rows());
  return make_second_moment(m);
}

Subspace top_r_eigenbasis(const SecondMoment& m, int r) {
  require(r >= 1 && r <= m.dim, ErrorKind::bad_input, "rank out of range");
  Subspace s;
  s.ambient_dim = m.dim;
  s.rank = r;
  s.basis = m.eigenvectors.leftCols(r);
  fix_column_signs(s.basis);
  if (r < m.dim && m.eigenvalues[r - 1] - m.eigenvalues[r] < 1e-12)
    s.degenerate_eigengap = true;
  return s;
}

Subspace explainer_subspace(const Mat& w_dec, int r) {
  require(r >= 1 && r <= std::min(w_dec.rows(), w_dec.cols()), ErrorKind::bad_input,
          "rank exceeds decoder dimensions");
  require(w_dec.allFinite(), ErrorKind::bad_input, "decoder has non-finite entries");
  require(w_dec.norm() > 0, ErrorKind::bad_input, "decoder is zero");
  Eigen::BDCSVD<Mat> svd(w_dec, Eigen::ComputeThinU);
  Subspace s;
  s.ambient_dim = int(w_dec.rows());
  s.rank = r;
  s.basis = svd.matrixU().leftCols(r);
  fix_column_signs(s.basis);
  const auto& sv = svd.singularValues();
  if (sv[r - 1] <= sv[0] * 1e-12) s.degenerate_eigengap = true;
  return s;
}

double projector_distance(const Subspace& a, const Subspace& b) {
  require(a.ambient_dim == b.ambient_dim, ErrorKind::dim_mismatch,
          "subspaces live in different ambient dimensions");
  // |Pa - Pb|_F^2 = ra + rb - 2 |A^T B|_F^2
  double cross = (a.basis.transpose() * b.basis).squaredNorm();
  double sq = double(a.rank) + double(b.rank) - 2.0 * cross;
  return std::sqrt(std::max(sq, 0.0));
}

std::vector<double> principal_angles(const Subspace& a, const Subspace& b) {
  require(a.ambient_dim == b.ambient_dim, ErrorKind::dim_mismatch, "ambient mismatch");
  require(a.rank == b.rank, ErrorKind::dim_mismatch, "rank mismatch");
  Eigen::BDCSVD<Mat> svd(a.basis.transpose() * b.basis);
  std::vector<double> angles(a.rank);
  for (int i = 0; i < a.rank; ++i) {
    double c = std::clamp(svd.singularValues()[i], 0.0, 1.0);
    angles[i] = std::acos(c);  // descending cosines -> ascending angles
  }
  return angles;
}

double subspace_overlap(const Subspace& a, const Subspace& b) {
  require(a.ambient_dim == b.ambient_dim, ErrorKind::dim_mismatch, "ambient mismatch");
  require(a.rank == b.rank, ErrorKind::dim_mismatch, "rank mismatch");
  double ov = (a.basis.transpose() * b.basis).squaredNorm() / double(a.rank);
  return std::clamp(ov, 0.0, 1.0);
}

double eigengap(const SecondMoment& m, int r) {
  require(r >= 1 && r < m.dim, ErrorKind::bad_input,
          "eigengap needs 1 <= r < d");
  return m.eigenvalues[r - 1] - m.eigenvalues[r];
}

double second_moment_shift(const SecondMoment& m_id, const SecondMoment& m_ood) {
  require(m_id.dim == m_ood.dim, ErrorKind::dim_mismatch, "moment dims differ");
  return (m_ood.matrix - m_id.matrix).norm();
}

}  // namespace gae
