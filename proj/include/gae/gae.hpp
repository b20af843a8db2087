#pragma once

// Closed-form decoder adaptation: rotate the dictionary's active subspace onto
// the OOD-active subspace (orthogonal Procrustes), then refit the decoder by
// constrained ridge with extra shrinkage outside that subspace.

#include "gae/explainer.hpp"

namespace gae {

struct GaeConfig {
  int r = 32;
  double lambda_geom = 0.1;
  double lambda_pres = 0.2;
  double alpha = 0.0;  // 0 = full refit, 1 = rotation only
  int n_fit = 2048;
  uint64_t seed = 2026;

  void validate() const;
};

struct ProcrustesResult {
  Mat t_star;      // r x r orthogonal
  Mat w_rotated;   // d x k, every column in span(u_ood)
  bool rank_deficient = false;  // cross-Gram had numerically zero singular values
};

struct AdaptationResult {
  Dictionary adapted;
  Mat t_star;
  Mat rotated_w;
  bool rank_deficient = false;
  bool used_all_rows = false;  // batch smaller than n_fit; fit on everything
  int n_fit_used = 0;
  double gap_before = 0.0;       // dictionary subspace vs empirical OOD-active subspace
  double gap_after = 0.0;        // rotated (Step-1) subspace vs the same
  double gap_after_refit = 0.0;  // final decoder subspace vs the same
  double recon_before = 0.0;
  double recon_after = 0.0;
  double step1_seconds = 0.0;
  double step2_seconds = 0.0;
};

ProcrustesResult procrustes_rotation(const Mat& w_dec_id, const Subspace& u_dec,
                                     const Subspace& u_ood);

// Centered ridge refit of the decoder onto the batch's reconstruction targets,
// pulled toward w_rotated, with ridge level lambda_pres inside pi_ood and
// lambda_pres + lambda_geom outside. Returns (w_gae, b_gae).
std::pair<Mat, Vec> decoder_refit(const Mat& w_rotated, const Subspace& pi_ood,
                                  const ActivationBatch& batch, const Mat& codes,
                                  double lambda_geom, double lambda_pres);

Mat interpolate_decoder(const Mat& w_gae, const Mat& w_rotated, double alpha);

AdaptationResult adapt(const Dictionary& dict, const ActivationBatch& ood,
                       const GaeConfig& config);

}  // namespace gae
