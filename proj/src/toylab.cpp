#include "gae/toylab.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "gae/diagnostics.hpp"

namespace gae {

void ToyModel::validate() const {
  require(d_in >= 1 && d >= 1 && p >= 1, ErrorKind::bad_input, "toy model dims must be positive");
  require(w1.rows() == d && w1.cols() == d_in && b1.size() == d && w2.rows() == p &&
              w2.cols() == d && b2.size() == p,
          ErrorKind::dim_mismatch, "toy model tensor shapes inconsistent");
  require(w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite(),
          ErrorKind::bad_input, "toy model has non-finite entries");
}

Mat ToyModel::hidden(const Mat& x) const {
  require(x.cols() == d_in, ErrorKind::dim_mismatch, "input width mismatch");
  Mat h = x * w1.transpose();
  h.rowwise() += b1.transpose();
  return h.cwiseMax(0.0);
}

Mat ToyModel::logits(const Mat& h) const {
  require(h.cols() == d, ErrorKind::dim_mismatch, "hidden width mismatch");
  Mat y = h * w2.transpose();
  y.rowwise() += b2.transpose();
  return y;
}

ToyModel build_toy_model(int d_in, int d, int p, uint64_t seed) {
  require(d_in >= 1 && d >= 1 && p >= 1, ErrorKind::bad_input, "dims must be positive");
  ToyModel m;
  m.d_in = d_in;
  m.d = d;
  m.p = p;
  m.seed = seed;
  Rng rng(streams::pretrain(seed));
  m.w1 = rng.normal_mat(d, d_in) / std::sqrt(double(d_in));
  m.b1 = Vec::Zero(d);
  m.w2 = rng.normal_mat(p, d) / std::sqrt(double(d));
  m.b2 = Vec::Zero(p);
  return m;
}

std::vector<double> pretrain_toy_model(ToyModel& model, const PretrainConfig& cfg) {
  model.validate();
  require(cfg.n_train >= 1 && cfg.epochs >= 0 && cfg.batch_size >= 1 && cfg.lr > 0,
          ErrorKind::bad_input, "bad pretraining config");
  Rng rng(streams::pretrain_data(model.seed));
  // random linear teacher; the activation geometry it induces is all we need
  Mat w_t = rng.normal_mat(model.p, model.d_in) * (cfg.teacher_scale / std::sqrt(model.d_in));
  Mat x = rng.normal_mat(cfg.n_train, model.d_in);
  Mat y = x * w_t.transpose();

  std::vector<int> idx(cfg.n_train);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> losses;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    rng.shuffle(idx);
    double ep_loss = 0.0;
    for (int start = 0; start < cfg.n_train; start += cfg.batch_size) {
      int m = std::min(cfg.batch_size, cfg.n_train - start);
      Mat xb(m, model.d_in), yb(m, model.p);
      for (int i = 0; i < m; ++i) {
        xb.row(i) = x.row(idx[start + i]);
        yb.row(i) = y.row(idx[start + i]);
      }
      Mat pre = xb * model.w1.transpose();  // biases stay zero throughout
      Mat h = pre.cwiseMax(0.0);
      Mat e = h * model.w2.transpose() - yb;
      ep_loss += e.squaredNorm();
      Mat gh = (e * model.w2).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
      double c = cfg.lr * 2.0 / m;
      model.w2.noalias() -= c * e.transpose() * h;
      model.w1.noalias() -= c * gh.transpose() * xb;
    }
    ep_loss /= cfg.n_train;
    require(std::isfinite(ep_loss), ErrorKind::divergence,
            "pretraining loss became non-finite at epoch " + std::to_string(ep));
    losses.push_back(ep_loss);
  }
  return losses;
}

namespace {

// QR orthonormalization with the R-diagonal made positive so the basis is a
// deterministic function of the input
Mat orthonormal_columns(const Mat& a) {
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ() * Mat::Identity(a.rows(), a.cols());
  for (int j = 0; j < a.cols(); ++j)
    if (qr.matrixQR()(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace

SeverityFamily build_severity_family(const ToyModel& model, uint64_t seed, double slope_range,
                                     double rho, int r_v) {
  model.validate();
  require(r_v >= 1 && r_v <= model.d_in, ErrorKind::bad_input, "bump rank out of range");
  require(slope_range >= 0.0 && rho >= 0.0, ErrorKind::bad_input,
          "family scales must be nonnegative");
  SeverityFamily fam;
  fam.d_in = model.d_in;
  fam.slope_range = slope_range;
  fam.rho = rho;
  fam.r_v = r_v;
  fam.seed = seed;
  Rng rng(seed);
  fam.q = orthonormal_columns(rng.normal_mat(model.d_in, model.d_in));
  fam.slopes = Vec::LinSpaced(model.d_in, -slope_range, slope_range);
  fam.v = orthonormal_columns(rng.normal_mat(model.d_in, r_v));
  Subspace rel;
  rel.ambient_dim = model.d_in;
  rel.rank = model.p;
  rel.basis = orthonormal_columns((model.w2 * model.w1).transpose());
  fam.output_relevant = rel;
  return fam;
}

std::pair<Mat, Mat> build_severity_covariance(const SeverityFamily& fam, const ToyModel& model,
                                              double s) {
  require(s >= 0.0 && s <= 1.0, ErrorKind::bad_input, "severity must lie in [0,1]");
  require(fam.d_in == model.d_in, ErrorKind::dim_mismatch, "family built for another input dim");
  const int d = fam.d_in;
  double c = s * fam.rho * (1.0 + s / 2.0);
  Mat spectral = fam.q * (s * fam.slopes.array()).exp().matrix().asDiagonal() * fam.q.transpose();
  Mat base = spectral + c * (fam.v * fam.v.transpose());
  // damp task-relevant directions, inflate the complement
  double f = std::sqrt(1.0 - 0.6 * s), g = std::sqrt(1.0 + 2.0 * s * s);
  Mat p_rel = fam.output_relevant.projector();
  Mat smat = f * p_rel + g * (Mat::Identity(d, d) - p_rel);
  Mat resc = smat * base * smat;
  resc = 0.5 * (resc + resc.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Mat> es(resc);
  require(es.info() == Eigen::Success, ErrorKind::bad_input, "covariance eigendecomposition failed");
  Vec w = es.eigenvalues().cwiseMax(0.0);
  Mat sigma = es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
  sigma *= double(d) / sigma.trace();
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Mat> es2(sigma);
  require(es2.info() == Eigen::Success, ErrorKind::bad_input, "sqrt eigendecomposition failed");
  Mat a_s = es2.eigenvectors() * es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
            es2.eigenvectors().transpose();
  return {std::move(sigma), std::move(a_s)};
}

ToySample sample_inputs(const SeverityFamily& fam, const ToyModel& model, double s, int n,
                        uint64_t seed) {
  require(n >= 1, ErrorKind::bad_input, "need at least one sample");
  auto [sigma, a_s] = build_severity_covariance(fam, model, s);
  Rng rng(seed);
  ToySample out;
  out.inputs.data = rng.normal_mat(n, model.d_in) * a_s;  // a_s symmetric
  out.hidden.data = model.hidden(out.inputs.data);
  return out;
}

// ---------------------------------------------------------------------------
// explainer training

namespace {

struct ActiveEntry {
  int row;
  int col;
  double code;
};

// weighted draw without replacement; weights are consumed in place
int weighted_pick(std::vector<double>& weights, double& total, Rng& rng) {
  int n = int(weights.size());
  if (total <= 0.0) {  // all mass consumed: fall back to uniform over leftovers
    for (int i = 0; i < n; ++i)
      if (weights[i] >= 0.0) return i;
    return 0;
  }
  double u = rng.uniform() * total;
  double acc = 0.0;
  int pick = n - 1;
  for (int i = 0; i < n; ++i) {
    if (weights[i] < 0.0) continue;
    acc += weights[i];
    if (u < acc) {
      pick = i;
      break;
    }
  }
  total -= std::max(weights[pick], 0.0);
  weights[pick] = -1.0;
  return pick;
}

void renormalize_decoder_columns(Mat& w_dec) {
  for (int j = 0; j < w_dec.cols(); ++j)
    w_dec.col(j) /= std::max(w_dec.col(j).norm(), 1e-12);
}

}  // namespace

Dictionary train_explainer(const ActivationBatch& batch, int k, SparsifierSpec sparsifier,
                           int epochs, double lr, double l1_weight, uint64_t seed) {
  batch.validate();
  const Mat& x = batch.data;
  const Mat& h = batch.reconstruction_target();
  const int n = int(x.rows()), d_enc = int(x.cols()), d_dec = int(h.cols());
  require(n >= 1, ErrorKind::bad_input, "empty training batch");
  require(k >= 1 && epochs >= 0 && lr > 0.0 && l1_weight >= 0.0, ErrorKind::bad_input,
          "bad training hyperparameters");
  if (sparsifier.kind == SparsifierKind::topk)
    require(sparsifier.k_active >= 1 && sparsifier.k_active <= k, ErrorKind::bad_input,
            "k_active must lie in [1, k]");
  const bool relu = sparsifier.kind == SparsifierKind::relu;
  const double enc_scale = relu ? 5e-4 : 1.0;
  const int batch_size = 256, resample_every = 5;

  Dictionary dict;
  dict.d_enc = d_enc;
  dict.d_dec = d_dec;
  dict.k = k;
  dict.sparsifier = sparsifier;
  dict.kind_tag = batch.target ? DictionaryKind::transcoder : DictionaryKind::sae;
  dict.seed_lineage = seed;

  // data-paired init: feature j points at one sample's target direction and
  // listens along the same sample's input direction
  Rng rng(seed);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  Mat noise = rng.normal_mat(d_dec, k);
  dict.w_dec.resize(d_dec, k);
  dict.w_enc.resize(k, d_enc);
  for (int j = 0; j < k; ++j) {
    int t = order[j % n];
    dict.w_dec.col(j) = h.row(t).transpose() + 1e-3 * noise.col(j);
    dict.w_enc.row(j) = enc_scale / std::max(x.row(t).norm(), 1e-12) * x.row(t);
  }
  renormalize_decoder_columns(dict.w_dec);
  dict.b_enc = Vec::Zero(k);
  dict.b_dec = Vec::Zero(d_dec);

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<char> fired(k, 0);
  std::vector<ActiveEntry> active;
  for (int ep = 0; ep < epochs; ++ep) {
    rng.shuffle(idx);
    std::fill(fired.begin(), fired.end(), 0);
    for (int start = 0; start < n; start += batch_size) {
      int m = std::min(batch_size, n - start);
      Mat xb(m, d_enc), hb(m, d_dec);
      for (int i = 0; i < m; ++i) {
        xb.row(i) = x.row(idx[start + i]);
        hb.row(i) = h.row(idx[start + i]);
      }
      Mat z = encode_batch(dict, xb);
      active.clear();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
          if (z(i, j) > 0.0) {
            active.push_back({i, j, z(i, j)});
            fired[j] = 1;
          }
      const bool sparse = active.size() * 4 < size_t(m) * size_t(k);

      Mat e;
      if (sparse) {
        e = (-hb).rowwise() + dict.b_dec.transpose();
        for (const auto& a : active) e.row(a.row) += a.code * dict.w_dec.col(a.col).transpose();
      } else {
        e = z * dict.w_dec.transpose() - hb;
        e.rowwise() += dict.b_dec.transpose();
      }
      double batch_loss = e.squaredNorm() / m;
      require(std::isfinite(batch_loss), ErrorKind::divergence,
              "training diverged at epoch " + std::to_string(ep) + ", batch " +
                  std::to_string(start / batch_size) + "; lower the learning rate");

      double c = lr * 2.0 / m;
      if (sparse) {
        // code gradient uses pre-update decoder weights
        std::vector<double> gz(active.size());
        for (size_t a = 0; a < active.size(); ++a) {
          const auto& en = active[a];
          gz[a] = e.row(en.row).dot(dict.w_dec.col(en.col)) + (relu ? l1_weight : 0.0);
        }
        dict.b_dec -= c * e.colwise().sum().transpose();
        for (const auto& en : active)
          dict.w_dec.col(en.col) -= (c * en.code) * e.row(en.row).transpose();
        for (size_t a = 0; a < active.size(); ++a) {
          const auto& en = active[a];
          dict.w_enc.row(en.col) -= (c * gz[a]) * xb.row(en.row);
          dict.b_enc(en.col) -= c * gz[a];
        }
      } else {
        Mat mask = (z.array() > 0.0).cast<double>();
        Mat gz = (e * dict.w_dec).cwiseProduct(mask);
        if (relu && l1_weight > 0.0) gz += l1_weight * mask;
        dict.b_dec -= c * e.colwise().sum().transpose();
        dict.w_dec.noalias() -= c * e.transpose() * z;
        dict.w_enc.noalias() -= c * gz.transpose() * xb;
        dict.b_enc -= c * gz.colwise().sum().transpose();
      }
      renormalize_decoder_columns(dict.w_dec);
    }

    // revive features that never fired, aimed at the worst-reconstructed samples
    if (relu && (ep + 1) % resample_every == 0 && ep + 1 < epochs) {
      std::vector<int> dead;
      for (int j = 0; j < k; ++j)
        if (!fired[j]) dead.push_back(j);
      if (!dead.empty()) {
        Mat z_all = encode_batch(dict, x);
        Mat resid = z_all * dict.w_dec.transpose();
        resid.rowwise() += dict.b_dec.transpose();
        resid -= h;
        std::vector<double> weights(n);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
          weights[i] = resid.row(i).squaredNorm();
          total += weights[i];
        }
        for (int j : dead) {
          int t = weighted_pick(weights, total, rng);
          dict.w_dec.col(j) = h.row(t).transpose() + 1e-3 * rng.normal_vec(d_dec);
          dict.w_dec.col(j) /= std::max(dict.w_dec.col(j).norm(), 1e-12);
          dict.w_enc.row(j) = enc_scale / std::max(x.row(t).norm(), 1e-12) * x.row(t);
          dict.b_enc(j) = 0.0;
        }
      }
    }
  }
  dict.validate();
  return dict;
}

// ---------------------------------------------------------------------------
// statistics helpers

double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::bad_input,
          "correlation needs two same-length series");
  const double n = double(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::bad_input, "correlation undefined for constant series");
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<int> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = 0.5 * (double(i) + double(j)) + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson_correlation(average_ranks(x), average_ranks(y));
}

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::bad_input,
          "fit needs two same-length series");
  const double n = double(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, ErrorKind::bad_input, "fit undefined for constant regressor");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (syy > 0.0) {
    double ss_res = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      double r = y[i] - (fit.slope * x[i] + fit.intercept);
      ss_res += r * r;
    }
    fit.r2 = 1.0 - ss_res / syy;
  } else {
    fit.r2 = 1.0;  // constant target fit exactly by the intercept
  }
  return fit;
}

// ---------------------------------------------------------------------------
// severity sweep

SweepReport run_severity_sweep(const SeverityFamily& fam, const ToyModel& model,
                               const Dictionary& dict_id, const std::vector<double>& severities,
                               int n, int r, const GaeConfig& gae_cfg, uint64_t seed) {
  model.validate();
  dict_id.validate();
  require(!severities.empty(), ErrorKind::bad_input, "empty severity grid");
  for (size_t i = 0; i < severities.size(); ++i) {
    require(severities[i] >= 0.0 && severities[i] <= 1.0, ErrorKind::bad_input,
            "severities must lie in [0,1]");
    require(i == 0 || severities[i] >= severities[i - 1], ErrorKind::bad_input,
            "severities must ascend");
  }
  require(n >= 1 && r >= 1, ErrorKind::bad_input, "bad sweep shape");

  SweepReport report;
  ToySample id_sample = sample_inputs(fam, model, 0.0, n, streams::id_batch(seed));
  SecondMoment m_id = estimate_second_moment(id_sample.hidden.data);
  Subspace pi_id = top_r_eigenbasis(m_id, r);
  Subspace u_dec = explainer_subspace(dict_id.w_dec, r);
  report.gamma_id = r < m_id.dim ? eigengap(m_id, r) : 0.0;
  report.trace_m_id = m_id.trace();
  report.overlap_id_explainer = subspace_overlap(u_dec, pi_id);
  const double m_id_norm = m_id.matrix.norm();

  GaeConfig cfg = gae_cfg;
  cfg.r = r;

  for (size_t i = 0; i < severities.size(); ++i) {
    double s = severities[i];
    ToySample smp = sample_inputs(fam, model, s, n, streams::severity(seed, int(i)));
    ActivationBatch eval;
    if (dict_id.kind_tag == DictionaryKind::transcoder) {
      eval.data = smp.inputs.data;
      eval.target = smp.hidden.data;
    } else {
      eval.data = smp.hidden.data;
    }
    SecondMoment m = estimate_second_moment(smp.hidden.data);
    Subspace pi_ood = top_r_eigenbasis(m, r);
    AdaptationResult ad = adapt(dict_id, eval, cfg);

    SweepRow row;
    row.s = s;
    row.fixed_gap = ad.gap_before;
    row.gae_gap = ad.gap_after;
    if (ad.n_fit_used == eval.n()) {
      row.fixed_recon = ad.recon_before;
      row.gae_recon = ad.recon_after;
    } else {  // adaptation fitted a subsample; report errors on the full batch
      row.fixed_recon = batch_reconstruction_error(dict_id, eval);
      row.gae_recon = batch_reconstruction_error(ad.adapted, eval);
    }
    row.overlap_id = report.overlap_id_explainer;
    row.overlap_ood = subspace_overlap(u_dec, pi_ood);
    LossDecomposition dec = decompose_loss(m, u_dec, r);
    row.eta = dec.eta;
    row.fixed_excess = dec.explainer_dependent;
    Subspace pi_rot = explainer_subspace(ad.rotated_w, r);
    double loss_rot = projection_loss(m, pi_rot);
    row.gae_excess = loss_rot - dec.irreducible;
    row.improvement = dec.total - loss_rot;
    row.shift_norm = second_moment_shift(m_id, m) / m_id_norm;
    row.delta_id = projector_distance(pi_ood, pi_id);
    row.gamma_ood = r < m.dim ? eigengap(m, r) : 0.0;
    row.trace_m = m.trace();
    row.bound_rhs = row.gamma_ood / 2.0 * row.fixed_gap * row.fixed_gap;
    BoundReport imp = check_improvement_bound(m, u_dec, pi_rot, r);
    row.bound_applicable = imp.applicable;
    row.bound_ok = imp.satisfied;
    report.rows.push_back(row);
  }

  if (report.rows.size() >= 2) {
    std::vector<double> shift, delta, gap2, imp;
    for (const auto& row : report.rows) {
      shift.push_back(row.shift_norm);
      delta.push_back(row.delta_id);
      gap2.push_back(row.fixed_gap * row.fixed_gap);
      imp.push_back(row.improvement);
    }
    report.fit.gap_pearson = pearson_correlation(shift, delta);
    report.fit.gap_spearman = spearman_correlation(shift, delta);
    LinearFit lf = linear_fit(gap2, imp);
    report.fit.improvement_r2 = lf.r2;
    report.fit.improvement_pearson = pearson_correlation(gap2, imp);
    report.fit.slope = lf.slope;
    report.fit.intercept = lf.intercept;
  }
  for (const auto& row : report.rows)
    if (row.bound_applicable && !row.bound_ok) ++report.fit.bound_violations;
  return report;
}

}  // namespace gae
