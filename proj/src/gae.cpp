#include "gae/gae.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace gae {

void GaeConfig::validate() const {
  require(r >= 1, ErrorKind::config, "rank must be >= 1");
  require(lambda_geom >= 0.0 && lambda_pres >= 0.0, ErrorKind::config,
          "ridge weights must be nonnegative");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::config, "alpha must lie in [0,1]");
  require(n_fit >= 1, ErrorKind::config, "n_fit must be >= 1");
}

ProcrustesResult procrustes_rotation(const Mat& w_dec_id, const Subspace& u_dec,
                                     const Subspace& u_ood) {
  require(u_dec.rank == u_ood.rank, ErrorKind::dim_mismatch, "subspace ranks differ");
  require(u_dec.ambient_dim == u_ood.ambient_dim && u_dec.ambient_dim == w_dec_id.rows(),
          ErrorKind::dim_mismatch, "ambient dims differ");
  // G = U_dec^T W W^T U_ood; T* = V U^T from its SVD maximizes tr(G T)
  Mat wt_uood = w_dec_id.transpose() * u_ood.basis;                 // k x r
  Mat g = u_dec.basis.transpose() * (w_dec_id * wt_uood);           // r x r
  Eigen::JacobiSVD<Mat> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesResult out;
  out.t_star = svd.matrixV() * svd.matrixU().transpose();
  double smax = svd.singularValues()(0);
  out.rank_deficient = smax <= 0.0 || svd.singularValues().minCoeff() <= smax * 1e-12;
  out.w_rotated = u_ood.basis * (out.t_star * (u_dec.basis.transpose() * w_dec_id));
  return out;
}

namespace {

struct CenteredStats {
  Mat code_gram;    // Z^T Z / n
  Mat cross_gram;   // H^T Z / n
  Vec code_mean;    // mean code
  Vec target_mean;  // mean target
};

// Accumulates grams exploiting code sparsity (top-k codes have few nonzeros
// per row); falls back to dense products when codes are mostly dense.
CenteredStats accumulate_stats(const Mat& targets, const Mat& codes) {
  const Eigen::Index n = codes.rows(), k = codes.cols(), d = targets.cols();
  CenteredStats st;
  st.code_mean = codes.colwise().mean();
  st.target_mean = targets.colwise().mean();

  Eigen::Index nnz = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) nnz += codes(i, j) != 0.0;
  if (nnz * 4 > n * k) {
    st.code_gram = codes.transpose() * codes / double(n);
    st.cross_gram = targets.transpose() * codes / double(n);
    return st;
  }

  st.code_gram = Mat::Zero(k, k);
  st.cross_gram = Mat::Zero(d, k);
  std::vector<Eigen::Index> active;
  std::vector<double> vals;
  for (Eigen::Index i = 0; i < n; ++i) {
    active.clear();
    vals.clear();
    for (Eigen::Index j = 0; j < k; ++j)
      if (codes(i, j) != 0.0) {
        active.push_back(j);
        vals.push_back(codes(i, j));
      }
    for (size_t a = 0; a < active.size(); ++a) {
      for (size_t b = 0; b <= a; ++b)
        st.code_gram(active[b], active[a]) += vals[a] * vals[b];
      st.cross_gram.col(active[a]) += vals[a] * targets.row(i).transpose();
    }
  }
  st.code_gram = st.code_gram.selfadjointView<Eigen::Upper>();
  st.code_gram /= double(n);
  st.cross_gram /= double(n);
  return st;
}

Mat solve_spd(const Mat& lhs, const Mat& rhs_t) {
  Eigen::LLT<Mat> llt(lhs);
  require(llt.info() == Eigen::Success, ErrorKind::singular,
          "code Gram matrix is singular; raise lambda_pres");
  return llt.solve(rhs_t).transpose();
}

}  // namespace

std::pair<Mat, Vec> decoder_refit(const Mat& w_rotated, const Subspace& pi_ood,
                                  const ActivationBatch& batch, const Mat& codes,
                                  double lambda_geom, double lambda_pres) {
  batch.validate();
  const Mat& targets = batch.reconstruction_target();
  const Eigen::Index n = codes.rows(), k = codes.cols(), d = targets.cols();
  require(n == batch.n() && n >= 1, ErrorKind::dim_mismatch, "codes not row-aligned with batch");
  require(w_rotated.rows() == d && w_rotated.cols() == k, ErrorKind::dim_mismatch,
          "rotated decoder shape mismatch");
  require(pi_ood.ambient_dim == d, ErrorKind::dim_mismatch, "subspace ambient dim mismatch");
  require(lambda_geom >= 0.0 && lambda_pres >= 0.0, ErrorKind::bad_input,
          "ridge weights must be nonnegative");

  CenteredStats st = accumulate_stats(targets, codes);
  Mat b = st.code_gram - st.code_mean * st.code_mean.transpose();
  b.diagonal().array() += lambda_pres;
  Mat c = st.cross_gram - st.target_mean * st.code_mean.transpose() + lambda_pres * w_rotated;

  // ridge level lambda_pres inside the OOD subspace, + lambda_geom outside
  Mat inside = solve_spd(b, c.transpose());
  b.diagonal().array() += lambda_geom;
  Mat outside = solve_spd(b, c.transpose());
  Mat w_gae = outside + pi_ood.basis * (pi_ood.basis.transpose() * (inside - outside));
  Vec b_gae = st.target_mean - w_gae * st.code_mean;
  return {std::move(w_gae), std::move(b_gae)};
}

Mat interpolate_decoder(const Mat& w_gae, const Mat& w_rotated, double alpha) {
  require(w_gae.rows() == w_rotated.rows() && w_gae.cols() == w_rotated.cols(),
          ErrorKind::dim_mismatch, "decoder shapes differ");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::bad_input, "alpha must lie in [0,1]");
  return (1.0 - alpha) * w_gae + alpha * w_rotated;
}

AdaptationResult adapt(const Dictionary& dict, const ActivationBatch& ood,
                       const GaeConfig& config) {
  using clock = std::chrono::steady_clock;
  config.validate();
  dict.validate();
  ood.validate();
  require(ood.n() >= 1, ErrorKind::bad_input, "empty adaptation batch");
  require(ood.data.cols() == dict.d_enc, ErrorKind::dim_mismatch,
          "batch width does not match encoder input dim");
  if (dict.kind_tag == DictionaryKind::transcoder)
    require(ood.target.has_value(), ErrorKind::bad_input,
            "transcoder adaptation needs the paired target stream");
  require(ood.reconstruction_target().cols() == dict.d_dec, ErrorKind::dim_mismatch,
          "reconstruction target width does not match decoder output dim");

  AdaptationResult res;
  // seeded uniform subsample without replacement; small batches are used whole
  ActivationBatch fit;
  if (ood.n() > config.n_fit) {
    std::vector<int64_t> idx(ood.n());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(streams::subsample(config.seed));
    rng.shuffle(idx);
    idx.resize(config.n_fit);
    std::sort(idx.begin(), idx.end());
    fit.data.resize(config.n_fit, ood.data.cols());
    for (int i = 0; i < config.n_fit; ++i) fit.data.row(i) = ood.data.row(idx[i]);
    if (ood.target) {
      Mat t(config.n_fit, ood.target->cols());
      for (int i = 0; i < config.n_fit; ++i) t.row(i) = ood.target->row(idx[i]);
      fit.target = std::move(t);
    }
  } else {
    fit = ood;
    res.used_all_rows = true;
  }
  res.n_fit_used = int(fit.n());

  const Mat& targets = fit.reconstruction_target();
  SecondMoment m_ood = estimate_second_moment(targets);
  Subspace pi_ood = top_r_eigenbasis(m_ood, config.r);
  Subspace u_dec = explainer_subspace(dict.w_dec, config.r);
  res.gap_before = projector_distance(u_dec, pi_ood);
  res.recon_before = batch_reconstruction_error(dict, fit);

  auto t0 = clock::now();
  ProcrustesResult step1 = procrustes_rotation(dict.w_dec, u_dec, pi_ood);
  res.step1_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  res.t_star = step1.t_star;
  res.rotated_w = step1.w_rotated;
  res.rank_deficient = step1.rank_deficient;
  res.gap_after = projector_distance(explainer_subspace(step1.w_rotated, config.r), pi_ood);

  res.adapted = dict;  // encoder tensors stay bit-identical
  if (config.alpha < 1.0) {
    Mat codes = encode_batch(dict, fit.data);
    auto t1 = clock::now();
    auto [w_gae, b_gae] = decoder_refit(step1.w_rotated, pi_ood, fit, codes, config.lambda_geom,
                                        config.lambda_pres);
    res.step2_seconds = std::chrono::duration<double>(clock::now() - t1).count();
    res.adapted.w_dec = interpolate_decoder(w_gae, step1.w_rotated, config.alpha);
    // bias recentered for the interpolated decoder; equals b_gae at alpha = 0
    res.adapted.b_dec = targets.colwise().mean().transpose() -
                        res.adapted.w_dec * codes.colwise().mean().transpose();
  } else {
    res.adapted.w_dec = step1.w_rotated;  // rotation-only mode keeps b_dec
  }
  res.gap_after_refit =
      projector_distance(explainer_subspace(res.adapted.w_dec, config.r), pi_ood);
  res.recon_after = batch_reconstruction_error(res.adapted, fit);
  return res;
}

}  // namespace gae
