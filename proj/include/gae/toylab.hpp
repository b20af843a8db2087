#pragma once

// Controlled experiment: a small ReLU MLP as activation generator, a
// severity-parameterized input-covariance family interpolating from isotropic
// to a rotated/rescaled regime, explainer training on the in-distribution
// stream, and the severity sweep that exercises diagnosis and adaptation.

#include "gae/gae.hpp"

namespace gae {

struct ToyModel {
  int d_in = 128;
  int d = 256;
  int p = 8;
  Mat w1;  // d x d_in
  Vec b1;  // d
  Mat w2;  // p x d
  Vec b2;  // p
  uint64_t seed = 0;

  void validate() const;
  Mat hidden(const Mat& x) const;  // n x d, relu(x w1^T + b1)
  Mat logits(const Mat& h) const;  // n x p
};

struct PretrainConfig {
  int n_train = 16384;
  int epochs = 100;
  double lr = 0.02;
  int batch_size = 256;
  double teacher_scale = 2.0;
};

struct SeverityFamily {
  int d_in = 0;
  double slope_range = 6.0;  // exponent slopes span [-range, range]
  double rho = 10.0;         // low-rank bump weight at s = 1
  int r_v = 32;              // bump rank
  Mat q;                     // d_in x d_in orthogonal
  Vec slopes;                // linspace over [-range, range], endpoints included
  Mat v;                     // d_in x r_v orthonormal
  Subspace output_relevant;  // span((w2 w1)^T): task-relevant input directions
  uint64_t seed = 0;
};

struct ToySample {
  ActivationBatch inputs;
  ActivationBatch hidden;
};

struct SweepRow {
  double s = 0.0;
  double fixed_gap = 0.0;
  double gae_gap = 0.0;
  double fixed_recon = 0.0;  // unadapted dictionary, mean squared residual
  double gae_recon = 0.0;    // adapted dictionary, same batch
  double overlap_id = 0.0;
  double overlap_ood = 0.0;
  double eta = 0.0;
  double shift_norm = 0.0;    // ||M - M_id||_F / ||M_id||_F
  double delta_id = 0.0;      // ||Pi_ood - Pi_id||_F (active subspaces)
  double improvement = 0.0;   // projection-loss gain of the rotated subspace
  double fixed_excess = 0.0;  // tr[(Pi_ood - Pi_dec) M]
  double gae_excess = 0.0;    // tr[(Pi_ood - Pi_rot) M]
  double gamma_ood = 0.0;
  double trace_m = 0.0;
  double bound_rhs = 0.0;  // improvement lower bound gamma_ood/2 * fixed_gap^2
  bool bound_ok = true;
  bool bound_applicable = true;
};

struct FitStats {
  double gap_pearson = 0.0;  // shift_norm vs delta_id
  double gap_spearman = 0.0;
  double improvement_r2 = 0.0;  // improvement vs fixed_gap^2
  double improvement_pearson = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  int bound_violations = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  FitStats fit;
  double overlap_id_explainer = 0.0;  // dictionary vs ID-active subspace
  double gamma_id = 0.0;
  double trace_m_id = 0.0;
};

ToyModel build_toy_model(int d_in, int d, int p, uint64_t seed);

// Fits the random-init model to a random linear teacher by minibatch SGD;
// returns per-epoch mean losses. Biases stay at zero.
std::vector<double> pretrain_toy_model(ToyModel& model, const PretrainConfig& cfg = {});

SeverityFamily build_severity_family(const ToyModel& model, uint64_t seed,
                                     double slope_range = 6.0, double rho = 10.0, int r_v = 32);

// Severity covariance and its symmetric PSD square root; trace pinned to d_in.
std::pair<Mat, Mat> build_severity_covariance(const SeverityFamily& fam, const ToyModel& model,
                                              double s);

ToySample sample_inputs(const SeverityFamily& fam, const ToyModel& model, double s, int n,
                        uint64_t seed);

// Minibatch SGD on reconstruction + l1 sparsity (l1 ignored for topk), decoder
// columns renormalized each step. A paired target in the batch trains a
// transcoder; otherwise a plain autoencoder on the batch itself.
Dictionary train_explainer(const ActivationBatch& batch, int k, SparsifierSpec sparsifier,
                           int epochs, double lr, double l1_weight, uint64_t seed);

SweepReport run_severity_sweep(const SeverityFamily& fam, const ToyModel& model,
                               const Dictionary& dict_id, const std::vector<double>& severities,
                               int n, int r, const GaeConfig& gae_cfg, uint64_t seed);

// correlation / least-squares helpers shared by the sweep and its tests
double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y);
double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y);
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace gae
