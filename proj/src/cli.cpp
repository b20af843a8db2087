#include "gae/cli.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gae/diagnostics.hpp"
#include "gae/gae.hpp"
#include "gae/toylab.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gae {

// ---------------------------------------------------------------------------
// configuration

void RunConfig::validate() const {
  require(rank >= 1, ErrorKind::config, "rank must be >= 1");
  require(lambda_geom >= 0.0 && lambda_pres >= 0.0, ErrorKind::config,
          "regularization weights must be nonnegative");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::config, "alpha must lie in [0,1]");
  require(n_fit >= 0, ErrorKind::config, "n_fit must be nonnegative (0 = command default)");
  for (size_t i = 0; i < severities.size(); ++i) {
    require(severities[i] >= 0.0 && severities[i] <= 1.0, ErrorKind::config,
            "severities must lie in [0,1]");
    require(i == 0 || severities[i] >= severities[i - 1], ErrorKind::config,
            "severities must ascend");
  }
  require(n_samples >= 1 && d_in >= 1 && d_hidden >= 1 && p_out >= 1, ErrorKind::config,
          "sample count and dims must be positive");
  require(dict_size >= 1 && k_active >= 1, ErrorKind::config,
          "dictionary sizes must be positive");
  require(sparsifier == "topk" || sparsifier == "relu", ErrorKind::config,
          "sparsifier must be 'topk' or 'relu'");
  require(train_epochs >= 0 && train_lr > 0.0 && l1_weight >= 0.0, ErrorKind::config,
          "bad explainer training parameters");
  require(pretrain_n >= 1 && pretrain_epochs >= 0 && pretrain_batch >= 1 && pretrain_lr > 0.0,
          ErrorKind::config, "bad pretraining parameters");
  require(teacher_scale > 0.0, ErrorKind::config, "teacher_scale must be positive");
  require(slope_range >= 0.0 && rho >= 0.0 && bump_rank >= 1, ErrorKind::config,
          "bad severity-family parameters");
  require(!budgets.empty(), ErrorKind::config, "budgets must be nonempty");
  for (size_t i = 0; i < budgets.size(); ++i) {
    require(budgets[i] >= 1, ErrorKind::config, "budgets must be positive");
    require(i == 0 || budgets[i] > budgets[i - 1], ErrorKind::config, "budgets must ascend");
  }
  require(m_star >= 1, ErrorKind::config, "m_star must be >= 1");
  require(exclusion_threshold >= 0.0, ErrorKind::config,
          "exclusion_threshold must be nonnegative");
  require(shift_threshold >= 0.0, ErrorKind::config, "shift_threshold must be nonnegative");
  require(trials >= 1, ErrorKind::config, "trials must be >= 1");
}

namespace {

double get_num(const json& v, const std::string& key) {
  require(v.is_number(), ErrorKind::config, "config key '" + key + "' must be a number");
  return v.get<double>();
}

int get_int(const json& v, const std::string& key) {
  require(v.is_number_integer(), ErrorKind::config, "config key '" + key + "' must be an integer");
  return v.get<int>();
}

uint64_t get_u64(const json& v, const std::string& key) {
  require(v.is_number_integer() && (v.is_number_unsigned() || v.get<int64_t>() >= 0),
          ErrorKind::config, "config key '" + key + "' must be a nonnegative integer");
  return v.get<uint64_t>();
}

bool get_bool(const json& v, const std::string& key) {
  require(v.is_boolean(), ErrorKind::config, "config key '" + key + "' must be a boolean");
  return v.get<bool>();
}

std::string get_str(const json& v, const std::string& key) {
  require(v.is_string(), ErrorKind::config, "config key '" + key + "' must be a string");
  return v.get<std::string>();
}

std::vector<double> get_num_list(const json& v, const std::string& key) {
  require(v.is_array(), ErrorKind::config, "config key '" + key + "' must be an array");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(get_num(e, key));
  return out;
}

std::vector<int> get_int_list(const json& v, const std::string& key) {
  require(v.is_array(), ErrorKind::config, "config key '" + key + "' must be an array");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(get_int(e, key));
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::format, "config root must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = get_u64(v, key);
    else if (key == "out") c.out = get_str(v, key);
    else if (key == "rank") c.rank = get_int(v, key);
    else if (key == "lambda_geom") c.lambda_geom = get_num(v, key);
    else if (key == "lambda_pres") c.lambda_pres = get_num(v, key);
    else if (key == "alpha") c.alpha = get_num(v, key);
    else if (key == "n_fit") c.n_fit = get_int(v, key);
    else if (key == "severities") c.severities = get_num_list(v, key);
    else if (key == "n_samples") c.n_samples = get_int(v, key);
    else if (key == "d_in") c.d_in = get_int(v, key);
    else if (key == "d_hidden") c.d_hidden = get_int(v, key);
    else if (key == "p_out") c.p_out = get_int(v, key);
    else if (key == "dict_size") c.dict_size = get_int(v, key);
    else if (key == "k_active") c.k_active = get_int(v, key);
    else if (key == "sparsifier") c.sparsifier = get_str(v, key);
    else if (key == "train_epochs") c.train_epochs = get_int(v, key);
    else if (key == "train_lr") c.train_lr = get_num(v, key);
    else if (key == "l1_weight") c.l1_weight = get_num(v, key);
    else if (key == "pretrain_n") c.pretrain_n = get_int(v, key);
    else if (key == "pretrain_epochs") c.pretrain_epochs = get_int(v, key);
    else if (key == "pretrain_batch") c.pretrain_batch = get_int(v, key);
    else if (key == "pretrain_lr") c.pretrain_lr = get_num(v, key);
    else if (key == "teacher_scale") c.teacher_scale = get_num(v, key);
    else if (key == "slope_range") c.slope_range = get_num(v, key);
    else if (key == "rho") c.rho = get_num(v, key);
    else if (key == "bump_rank") c.bump_rank = get_int(v, key);
    else if (key == "save_artifacts") c.save_artifacts = get_bool(v, key);
    else if (key == "budgets") c.budgets = get_int_list(v, key);
    else if (key == "m_star") c.m_star = get_int(v, key);
    else if (key == "exclusion_threshold") c.exclusion_threshold = get_num(v, key);
    else if (key == "dictionary") c.dictionary = get_str(v, key);
    else if (key == "activations") c.activations = get_str(v, key);
    else if (key == "activations_id") c.activations_id = get_str(v, key);
    else if (key == "activations_ood") c.activations_ood = get_str(v, key);
    else if (key == "head") c.head = get_str(v, key);
    else if (key == "shift_threshold") c.shift_threshold = get_num(v, key);
    else if (key == "trials") c.trials = get_int(v, key);
    else if (key == "inject_bug") c.inject_bug = get_bool(v, key);
    else throw Error(ErrorKind::config, "unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::format, "cannot open config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["rank"] = c.rank;
  j["lambda_geom"] = c.lambda_geom;
  j["lambda_pres"] = c.lambda_pres;
  j["alpha"] = c.alpha;
  j["n_fit"] = c.n_fit;
  j["severities"] = c.severities;
  j["n_samples"] = c.n_samples;
  j["d_in"] = c.d_in;
  j["d_hidden"] = c.d_hidden;
  j["p_out"] = c.p_out;
  j["dict_size"] = c.dict_size;
  j["k_active"] = c.k_active;
  j["sparsifier"] = c.sparsifier;
  j["train_epochs"] = c.train_epochs;
  j["train_lr"] = c.train_lr;
  j["l1_weight"] = c.l1_weight;
  j["pretrain_n"] = c.pretrain_n;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_batch"] = c.pretrain_batch;
  j["pretrain_lr"] = c.pretrain_lr;
  j["teacher_scale"] = c.teacher_scale;
  j["slope_range"] = c.slope_range;
  j["rho"] = c.rho;
  j["bump_rank"] = c.bump_rank;
  j["save_artifacts"] = c.save_artifacts;
  j["budgets"] = c.budgets;
  j["m_star"] = c.m_star;
  j["exclusion_threshold"] = c.exclusion_threshold;
  j["dictionary"] = c.dictionary;
  j["activations"] = c.activations;
  j["activations_id"] = c.activations_id;
  j["activations_ood"] = c.activations_ood;
  j["head"] = c.head;
  j["shift_threshold"] = c.shift_threshold;
  j["trials"] = c.trials;
  j["inject_bug"] = c.inject_bug;
  return j.dump();
}

std::string run_config_hash(const RunConfig& c) {
  std::string s = run_config_json(c);
  uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// emission helpers

namespace {

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::format, "cannot open " + tmp.string() + " for writing");
    f << text;
    f.flush();
    require(f.good(), ErrorKind::format, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_provenance(const RunConfig& cfg, const std::string& command) {
  return "# gae_version=" + std::string(GAE_VERSION) + " config_hash=" + run_config_hash(cfg) +
         " command=" + command + "\n";
}

json provenance(const RunConfig& cfg, const std::string& command) {
  return {{"schema", "gae-report/v1"},
          {"gae_version", GAE_VERSION},
          {"config_hash", run_config_hash(cfg)},
          {"command", command}};
}

void write_report(const RunConfig& cfg, const std::string& name, const json& body) {
  write_text_atomic(fs::path(cfg.out) / name, body.dump(2) + "\n");
}

void write_config_used(const RunConfig& cfg) {
  write_text_atomic(fs::path(cfg.out) / "config_used.json",
                    json::parse(run_config_json(cfg)).dump(2) + "\n");
}

json bound_json(const BoundReport& b) {
  return {{"context", b.context}, {"lhs", b.lhs},           {"rhs", b.rhs},
          {"slack", b.slack},     {"satisfied", b.satisfied}, {"applicable", b.applicable},
          {"details", b.details}};
}

std::vector<double> effective_severities(const RunConfig& cfg) {
  if (!cfg.severities.empty()) return cfg.severities;
  std::vector<double> s(11);
  for (int i = 0; i < 11; ++i) s[i] = i / 10.0;
  return s;
}

SecondMoment load_moment_or_batch(const std::string& path) {
  if (file_holds_second_moment(path)) return load_second_moment(path);
  ActivationBatch b = load_activations(path);
  return estimate_second_moment(b.reconstruction_target());
}

GaeConfig gae_config_from(const RunConfig& cfg, int default_n_fit) {
  GaeConfig g;
  g.r = cfg.rank;
  g.lambda_geom = cfg.lambda_geom;
  g.lambda_pres = cfg.lambda_pres;
  g.alpha = cfg.alpha;
  g.n_fit = cfg.n_fit > 0 ? cfg.n_fit : default_n_fit;
  g.seed = cfg.seed;
  return g;
}

void save_dictionary_atomic(const fs::path& path, const Dictionary& dict) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_dictionary(tmp.string(), dict);
  fs::rename(tmp, path);
}

void save_activations_atomic(const fs::path& path, const ActivationBatch& batch) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_activations(tmp.string(), batch);
  fs::rename(tmp, path);
}

}  // namespace

void save_logit_head(const LogitHead& head, const std::string& path) {
  head.validate();
  json j;
  j["schema"] = "gae-head/v1";
  j["d"] = head.d;
  j["vocab"] = head.vocab;
  std::vector<std::vector<double>> w(head.vocab, std::vector<double>(head.d));
  for (int i = 0; i < head.vocab; ++i)
    for (int c = 0; c < head.d; ++c) w[i][c] = head.weight(i, c);
  j["weight"] = w;
  j["bias"] = std::vector<double>(head.bias.data(), head.bias.data() + head.vocab);
  write_text_atomic(path, j.dump(2) + "\n");
}

LogitHead load_logit_head(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::format, "cannot open head file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("head file is not valid JSON: ") + e.what());
  }
  require(j.is_object() && j.value("schema", "") == "gae-head/v1", ErrorKind::format,
          "head file missing schema gae-head/v1");
  LogitHead head;
  head.d = get_int(j.at("d"), "d");
  head.vocab = get_int(j.at("vocab"), "vocab");
  require(head.d >= 1 && head.vocab >= 1, ErrorKind::format, "head dims must be positive");
  const json& w = j.at("weight");
  require(w.is_array() && int(w.size()) == head.vocab, ErrorKind::format,
          "head weight must have one row per logit");
  head.weight.resize(head.vocab, head.d);
  for (int i = 0; i < head.vocab; ++i) {
    require(w[i].is_array() && int(w[i].size()) == head.d, ErrorKind::format,
            "head weight row width mismatch");
    for (int c = 0; c < head.d; ++c) head.weight(i, c) = get_num(w[i][c], "weight");
  }
  const json& b = j.at("bias");
  require(b.is_array() && int(b.size()) == head.vocab, ErrorKind::format,
          "head bias length mismatch");
  head.bias.resize(head.vocab);
  for (int i = 0; i < head.vocab; ++i) head.bias(i) = get_num(b[i], "bias");
  head.validate();
  return head;
}

// ---------------------------------------------------------------------------
// verification suite

namespace {

struct SuiteState {
  VerifyReport report;
  std::string section;
  int trials = 0;
  int failures = 0;

  void begin(const std::string& name, int n) {
    section = name;
    trials = n;
    failures = 0;
  }
  void check(bool ok, int trial, uint64_t tseed, double lhs, double rhs) {
    if (ok) return;
    ++failures;
    report.violations.push_back({section, trial, tseed, lhs, rhs});
  }
  void end() { report.sections.push_back({section, trials, failures}); }
};

Subspace random_subspace(Rng& rng, int d, int r) { return explainer_subspace(rng.normal_mat(d, r), r); }

SecondMoment gapped_moment(Rng& rng, int d, int r, double top_boost) {
  Mat q = explainer_subspace(rng.normal_mat(d, d), d).basis;
  Vec evals(d);
  for (int i = 0; i < d; ++i) evals(i) = 1.0 + rng.uniform();
  std::sort(evals.data(), evals.data() + d, std::greater<double>());
  evals.head(r).array() += top_boost;
  return make_second_moment(q * evals.asDiagonal() * q.transpose());
}

}  // namespace

VerifyReport run_verification_suite(int trials, uint64_t seed, bool inject_bug) {
  require(trials >= 1, ErrorKind::bad_input, "trials must be >= 1");
  SuiteState st;
  auto trial_seed = [seed](int section, int trial) {
    uint64_t state = seed + uint64_t(section) * 1000003ull + uint64_t(trial);
    return splitmix64(state);
  };

  // total loss = irreducible + explainer-dependent, and the Ky Fan excess is
  // nonnegative for every projector
  st.begin("loss-decomposition-identity", trials);
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(1, t);
    Rng rng(ts);
    int d = 6 + t % 9, r = 1 + t % (d - 1);
    Mat a = rng.normal_mat(d, d);
    SecondMoment m = make_second_moment(a * a.transpose() / d);
    Subspace s = random_subspace(rng, d, r);
    LossDecomposition dec = decompose_loss(m, s, r);
    double tol = 1e-10 * std::max(1.0, m.trace());
    st.check(std::abs(dec.total - dec.irreducible - dec.explainer_dependent) <= tol &&
                 dec.explainer_dependent >= -tol,
             t, ts, dec.total, dec.irreducible + dec.explainer_dependent);
  }
  st.end();

  // gamma/2 * delta^2 <= excess <= spread/2 * delta^2
  st.begin("excess-bound-sandwich", trials);
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(2, t);
    Rng rng(ts);
    int d = 6 + t % 9, r = 1 + t % (d - 1);
    Mat a = rng.normal_mat(d, d);
    SecondMoment m = make_second_moment(a * a.transpose() / d);
    Subspace s = random_subspace(rng, d, r);
    auto [lower, upper] = check_excess_bounds(m, s, r);
    bool ok = (!lower.applicable || lower.satisfied) && upper.satisfied;
    st.check(ok, t, ts, lower.lhs, lower.rhs);
  }
  st.end();

  // projector drift vs moment shift, in the bound's small-shift regime
  st.begin("gap-vs-shift-bound", trials);
  std::vector<std::pair<SecondMoment, SecondMoment>> shift_pairs;
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(3, t);
    Rng rng(ts);
    int d = 8 + t % 5, r = 1 + t % 4;
    SecondMoment m_id = gapped_moment(rng, d, r, 0.5);
    double gamma = eigengap(m_id, r);
    Mat e = rng.normal_mat(d, d);
    e = 0.5 * (e + e.transpose()).eval();
    e *= 0.1 * gamma / e.norm();
    SecondMoment m_ood = make_second_moment(m_id.matrix + e);
    BoundReport b = check_gap_bound(m_id, m_ood, r);
    st.check(!b.applicable || b.satisfied, t, ts, b.lhs, b.rhs);
    shift_pairs.emplace_back(std::move(m_id), std::move(m_ood));
  }
  st.end();

  // stale-subspace loss degradation controlled by the same shift
  st.begin("shift-degradation-bound", trials);
  for (int t = 0; t < trials; ++t) {
    const auto& [m_id, m_ood] = shift_pairs[t];
    BoundReport b = check_degradation_bound(m_id, m_ood, 1 + t % 4);
    st.check(!b.applicable || b.satisfied, t, trial_seed(3, t), b.lhs, b.rhs);
  }
  st.end();

  // closed-form rotation beats sampled orthogonal alternatives and attains
  // the singular-value sum
  st.begin("procrustes-optimality", trials);
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(4, t);
    Rng rng(ts);
    int d = 8, r = 2 + t % 3, k = 12;
    Mat w = rng.normal_mat(d, k);
    Subspace u_dec = explainer_subspace(w, r);
    Subspace u_ood = random_subspace(rng, d, r);
    ProcrustesResult pr = procrustes_rotation(w, u_dec, u_ood);
    Mat g = u_dec.basis.transpose() * (w * (w.transpose() * u_ood.basis));
    Mat t_star = pr.t_star;
    if (inject_bug) t_star.col(r - 1) = -t_star.col(r - 1);  // negative control
    double sigma_sum = Eigen::JacobiSVD<Mat>(g).singularValues().sum();
    double attained = (g * t_star).trace();
    bool ok = std::abs(attained - sigma_sum) <= 1e-8 * std::max(1.0, sigma_sum) &&
              (pr.t_star.transpose() * pr.t_star - Mat::Identity(r, r)).norm() <= 1e-10;
    auto objective = [&](const Mat& rot) {
      return (u_ood.basis * (rot * (u_dec.basis.transpose() * w)) - w).squaredNorm();
    };
    double obj_star = objective(pr.t_star);
    for (int i = 0; i < 50 && ok; ++i) {
      Mat cand = explainer_subspace(rng.normal_mat(r, r), r).basis;
      ok = obj_star <= objective(cand) + 1e-8;
    }
    st.check(ok, t, ts, attained, sigma_sum);
  }
  st.end();

  // the refit solution is a stationary point of the penalized objective
  st.begin("refit-stationarity", trials);
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(5, t);
    Rng rng(ts);
    int n = 120, k = 10, d = 6;
    ActivationBatch batch;
    batch.data = rng.normal_mat(n, d);
    Mat codes = rng.normal_mat(n, k);
    Mat w_rot = rng.normal_mat(d, k);
    Subspace pi = random_subspace(rng, d, 2);
    double lg = 0.3, lp = 0.25;
    auto [w_gae, b_gae] = decoder_refit(w_rot, pi, batch, codes, lg, lp);
    Mat complement = Mat::Identity(d, d) - pi.projector();
    auto objective = [&](const Mat& w, const Vec& b) {
      Mat resid = batch.data - codes * w.transpose();
      resid.rowwise() -= b.transpose();
      return resid.squaredNorm() / n + lp * (w - w_rot).squaredNorm() +
             (complement * w).squaredNorm() * lg;
    };
    double base = objective(w_gae, b_gae);
    double scale = std::max(1.0, std::abs(base));
    double worst = 0.0;
    for (int probe = 0; probe < 50; ++probe) {
      int i = int(rng.uniform() * d), j = int(rng.uniform() * k);
      double h = 1e-5 * (1.0 + std::abs(w_gae(i, j)));
      Mat wp = w_gae, wm = w_gae;
      wp(i, j) += h;
      wm(i, j) -= h;
      worst = std::max(worst, std::abs(objective(wp, b_gae) - objective(wm, b_gae)) / (2 * h));
    }
    for (int probe = 0; probe < 10; ++probe) {
      int i = int(rng.uniform() * d);
      double h = 1e-5 * (1.0 + std::abs(b_gae(i)));
      Vec bp = b_gae, bm = b_gae;
      bp(i) += h;
      bm(i) -= h;
      worst = std::max(worst, std::abs(objective(w_gae, bp) - objective(w_gae, bm)) / (2 * h));
    }
    st.check(worst <= 1e-6 * scale, t, ts, worst, 1e-6 * scale);
  }
  st.end();

  // vanishing regularization recovers ordinary least squares
  st.begin("refit-ols-limit", trials);
  for (int t = 0; t < trials; ++t) {
    uint64_t ts = trial_seed(6, t);
    Rng rng(ts);
    int n = 300, k = 8, d = 5;
    ActivationBatch batch;
    batch.data = rng.normal_mat(n, d);
    Mat codes = rng.normal_mat(n, k);
    Mat w_rot = rng.normal_mat(d, k);
    Subspace pi = random_subspace(rng, d, 2);
    auto [w_gae, b_gae] = decoder_refit(w_rot, pi, batch, codes, 1e-8, 1e-8);
    Mat zc = codes.rowwise() - codes.colwise().mean();
    Mat hc = batch.data.rowwise() - batch.data.colwise().mean();
    Mat w_ols = (zc.transpose() * zc).ldlt().solve(zc.transpose() * hc).transpose();
    double diff = (w_gae - w_ols).norm();
    st.check(diff <= 1e-5 * std::max(1.0, w_ols.norm()), t, ts, diff, 1e-5);
  }
  st.end();

  // trace-form projection loss agrees with a Monte-Carlo estimate
  int mc_trials = std::max(1, trials / 10);
  st.begin("projection-loss-monte-carlo", mc_trials);
  for (int t = 0; t < mc_trials; ++t) {
    uint64_t ts = trial_seed(7, t);
    Rng rng(ts);
    int d = 16, r = 4, n = 100000;
    Mat q = explainer_subspace(rng.normal_mat(d, d), d).basis;
    Vec evals(d);
    for (int i = 0; i < d; ++i) evals(i) = 0.5 + 2.5 * rng.uniform();
    std::sort(evals.data(), evals.data() + d, std::greater<double>());
    SecondMoment m = make_second_moment(q * evals.asDiagonal() * q.transpose());
    Subspace s = random_subspace(rng, d, r);
    double exact = projection_loss(m, s);
    Mat x = rng.normal_mat(n, d) * (q * evals.cwiseSqrt().asDiagonal() * q.transpose());
    Mat resid = x - (x * s.basis) * s.basis.transpose();
    double mc = resid.squaredNorm() / n;
    st.check(std::abs(mc - exact) <= 0.02 * exact, t, ts, mc, exact);
  }
  st.end();

  return st.report;
}

// ---------------------------------------------------------------------------
// commands

int cmd_toy_sweep(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out);
  std::vector<double> severities = effective_severities(cfg);

  ToyModel model = build_toy_model(cfg.d_in, cfg.d_hidden, cfg.p_out, cfg.seed);
  PretrainConfig pt;
  pt.n_train = cfg.pretrain_n;
  pt.epochs = cfg.pretrain_epochs;
  pt.lr = cfg.pretrain_lr;
  pt.batch_size = cfg.pretrain_batch;
  pt.teacher_scale = cfg.teacher_scale;
  std::vector<double> losses = pretrain_toy_model(model, pt);
  if (!losses.empty())
    std::cout << "pretrained toy model: loss " << losses.front() << " -> " << losses.back()
              << " over " << losses.size() << " epochs\n";

  SeverityFamily fam = build_severity_family(model, streams::family(cfg.seed), cfg.slope_range,
                                             cfg.rho, cfg.bump_rank);
  ToySample id_sample = sample_inputs(fam, model, 0.0, cfg.n_samples, streams::id_batch(cfg.seed));
  ActivationBatch train_batch;
  train_batch.data = id_sample.inputs.data;
  train_batch.target = id_sample.hidden.data;
  SparsifierSpec sp;
  sp.kind = cfg.sparsifier == "relu" ? SparsifierKind::relu : SparsifierKind::topk;
  sp.k_active = cfg.k_active;
  Dictionary dict = train_explainer(train_batch, cfg.dict_size, sp, cfg.train_epochs,
                                    cfg.train_lr, cfg.l1_weight, streams::explainer(cfg.seed));
  std::cout << "trained ID dictionary (k=" << dict.k
            << "): batch error " << batch_reconstruction_error(dict, train_batch) << "\n";

  GaeConfig gc = gae_config_from(cfg, cfg.n_samples);
  SweepReport rep = run_severity_sweep(fam, model, dict, severities, cfg.n_samples, cfg.rank, gc,
                                       cfg.seed);

  std::string prov = csv_provenance(cfg, "toy-sweep");
  std::string gap = prov + "s,fixed_gap,gae_gap\n";
  std::string recon = prov + "s,fixed_excess,gae_excess,fixed_mse,gae_mse\n";
  std::string overlap = prov + "s,overlap_id,overlap_ood\n";
  std::string eta = prov + "s,eta\n";
  std::string scatter = prov + "s,shift_norm,delta_id\n";
  std::string impfit = prov + "s,gap_squared,improvement,bound_rhs,bound_ok\n";
  for (const SweepRow& row : rep.rows) {
    std::string s = fmt(row.s);
    gap += s + "," + fmt(row.fixed_gap) + "," + fmt(row.gae_gap) + "\n";
    recon += s + "," + fmt(row.fixed_excess) + "," + fmt(row.gae_excess) + "," +
             fmt(row.fixed_recon) + "," + fmt(row.gae_recon) + "\n";
    overlap += s + "," + fmt(row.overlap_id) + "," + fmt(row.overlap_ood) + "\n";
    eta += s + "," + fmt(row.eta) + "\n";
    scatter += s + "," + fmt(row.shift_norm) + "," + fmt(row.delta_id) + "\n";
    impfit += s + "," + fmt(row.fixed_gap * row.fixed_gap) + "," + fmt(row.improvement) + "," +
           fmt(row.bound_rhs) + "," + (row.bound_ok ? "1" : "0") + "\n";
  }
  write_text_atomic(fs::path(cfg.out) / "gap_curve.csv", gap);
  write_text_atomic(fs::path(cfg.out) / "recon_curve.csv", recon);
  write_text_atomic(fs::path(cfg.out) / "overlap.csv", overlap);
  write_text_atomic(fs::path(cfg.out) / "eta.csv", eta);
  write_text_atomic(fs::path(cfg.out) / "shift_vs_delta.csv", scatter);
  write_text_atomic(fs::path(cfg.out) / "improvement_fit.csv", impfit);

  json rows = json::array();
  for (const SweepRow& row : rep.rows)
    rows.push_back({{"s", row.s},
                    {"fixed_gap", row.fixed_gap},
                    {"gae_gap", row.gae_gap},
                    {"fixed_recon", row.fixed_recon},
                    {"gae_recon", row.gae_recon},
                    {"fixed_excess", row.fixed_excess},
                    {"gae_excess", row.gae_excess},
                    {"overlap_id", row.overlap_id},
                    {"overlap_ood", row.overlap_ood},
                    {"eta", row.eta},
                    {"shift_norm", row.shift_norm},
                    {"delta_id", row.delta_id},
                    {"improvement", row.improvement},
                    {"gamma_ood", row.gamma_ood},
                    {"trace_m", row.trace_m},
                    {"bound_rhs", row.bound_rhs},
                    {"bound_ok", row.bound_ok},
                    {"bound_applicable", row.bound_applicable}});
  json report;
  report["provenance"] = provenance(cfg, "toy-sweep");
  report["gamma_id"] = rep.gamma_id;
  report["trace_m_id"] = rep.trace_m_id;
  report["overlap_id_explainer"] = rep.overlap_id_explainer;
  report["rows"] = rows;
  if (rep.rows.size() >= 2)
    report["fit"] = {{"gap_pearson", rep.fit.gap_pearson},
                     {"gap_spearman", rep.fit.gap_spearman},
                     {"improvement_r2", rep.fit.improvement_r2},
                     {"improvement_pearson", rep.fit.improvement_pearson},
                     {"slope", rep.fit.slope},
                     {"intercept", rep.fit.intercept},
                     {"bound_violations", rep.fit.bound_violations}};
  write_report(cfg, "sweep_report.json", report);
  write_config_used(cfg);

  if (cfg.save_artifacts) {
    save_dictionary_atomic(fs::path(cfg.out) / "dictionary_id.gaedict", dict);
    save_activations_atomic(fs::path(cfg.out) / "activations_id.gaebatch", train_batch);
    ToySample last = sample_inputs(fam, model, severities.back(), cfg.n_samples,
                                   streams::severity(cfg.seed, int(severities.size()) - 1));
    ActivationBatch ood_batch;
    ood_batch.data = last.inputs.data;
    ood_batch.target = last.hidden.data;
    save_activations_atomic(fs::path(cfg.out) / "activations_ood.gaebatch", ood_batch);
    LogitHead head;
    head.d = model.d;
    head.vocab = model.p;
    head.weight = model.w2;
    head.bias = model.b2;
    save_logit_head(head, (fs::path(cfg.out) / "head.json").string());
  }

  for (const SweepRow& row : rep.rows)
    std::cout << "s=" << row.s << "  fixed_gap=" << row.fixed_gap << "  gae_gap=" << row.gae_gap
              << "  eta=" << row.eta << "  overlap_ood=" << row.overlap_ood << "\n";
  if (rep.rows.size() >= 2)
    std::cout << "fit: shift-vs-gap pearson=" << rep.fit.gap_pearson
              << " spearman=" << rep.fit.gap_spearman << " | improvement r2=" << rep.fit.improvement_r2
              << " pearson=" << rep.fit.improvement_pearson
              << " bound_violations=" << rep.fit.bound_violations << "\n";
  std::cout << "wrote " << cfg.out << "/sweep_report.json and 6 csv tables\n";
  return 0;
}

int cmd_adapt(const RunConfig& cfg) {
  cfg.validate();
  require(!cfg.dictionary.empty(), ErrorKind::config, "adapt needs a dictionary path");
  require(!cfg.activations.empty(), ErrorKind::config, "adapt needs an activations path");
  fs::create_directories(cfg.out);

  Dictionary dict = load_dictionary(cfg.dictionary);
  json report;
  report["provenance"] = provenance(cfg, "adapt");
  Dictionary adapted;
  SecondMoment m_ood;

  if (file_holds_second_moment(cfg.activations)) {
    // moments carry no samples, so only the rotation-only mode is possible
    require(cfg.alpha == 1.0, ErrorKind::config,
            "a second-moment file supports rotation-only adaptation; set alpha=1");
    m_ood = load_second_moment(cfg.activations);
    require(m_ood.dim == dict.d_dec, ErrorKind::dim_mismatch,
            "moment dimension does not match decoder output dim");
    Subspace u_dec = explainer_subspace(dict.w_dec, cfg.rank);
    Subspace pi_ood = top_r_eigenbasis(m_ood, cfg.rank);
    ProcrustesResult pr = procrustes_rotation(dict.w_dec, u_dec, pi_ood);
    adapted = dict;
    adapted.w_dec = pr.w_rotated;
    report["mode"] = "rotation-only-from-moment";
    report["gap_before"] = projector_distance(u_dec, pi_ood);
    report["gap_after"] =
        projector_distance(explainer_subspace(pr.w_rotated, cfg.rank), pi_ood);
    report["rank_deficient"] = pr.rank_deficient;
  } else {
    ActivationBatch batch = load_activations(cfg.activations);
    GaeConfig gc = gae_config_from(cfg, 2048);
    AdaptationResult res = adapt(dict, batch, gc);
    if (gc.n_fit > res.n_fit_used)
      std::cerr << "warning: requested n_fit " << gc.n_fit << " exceeds the " << res.n_fit_used
                << " available rows; used them all\n";
    adapted = res.adapted;
    m_ood = estimate_second_moment(batch.reconstruction_target());
    report["mode"] = cfg.alpha == 1.0 ? "rotation-only" : "full";
    report["gap_before"] = res.gap_before;
    report["gap_after"] = res.gap_after;
    report["gap_after_refit"] = res.gap_after_refit;
    report["recon_before"] = res.recon_before;
    report["recon_after"] = res.recon_after;
    report["n_fit_used"] = res.n_fit_used;
    report["used_all_rows"] = res.used_all_rows;
    report["rank_deficient"] = res.rank_deficient;
    report["step1_seconds"] = res.step1_seconds;
    report["step2_seconds"] = res.step2_seconds;
    std::cout << "adapt: gap " << res.gap_before << " -> " << res.gap_after
              << " (refit subspace " << res.gap_after_refit << "), recon " << res.recon_before
              << " -> " << res.recon_after << "\n";
  }

  if (!cfg.activations_id.empty()) {
    SecondMoment m_id = load_moment_or_batch(cfg.activations_id);
    require(m_id.dim == m_ood.dim, ErrorKind::dim_mismatch,
            "ID and OOD moments have different dims");
    double rel_shift = second_moment_shift(m_id, m_ood) / m_id.matrix.norm();
    bool no_shift = rel_shift < cfg.shift_threshold;
    report["shift_norm"] = rel_shift;
    report["shift_threshold"] = cfg.shift_threshold;
    report["no_significant_shift"] = no_shift;
    if (no_shift)
      std::cout << "no significant shift: normalized moment shift " << rel_shift
                << " is below the threshold " << cfg.shift_threshold << "\n";
  }

  save_dictionary_atomic(fs::path(cfg.out) / "adapted.gaedict", adapted);
  write_report(cfg, "adapt_report.json", report);
  write_config_used(cfg);
  std::cout << "wrote " << cfg.out << "/adapted.gaedict\n";
  return 0;
}

int cmd_diagnose(const RunConfig& cfg) {
  cfg.validate();
  require(!cfg.activations_id.empty() && !cfg.activations_ood.empty(), ErrorKind::config,
          "diagnose needs ID and OOD activation (or moment) paths");
  fs::create_directories(cfg.out);

  SecondMoment m_id = load_moment_or_batch(cfg.activations_id);
  SecondMoment m_ood = load_moment_or_batch(cfg.activations_ood);
  require(m_id.dim == m_ood.dim, ErrorKind::dim_mismatch,
          "ID and OOD activations have different dims");
  require(cfg.rank < m_id.dim, ErrorKind::config, "rank must be below the activation dim");
  int r = cfg.rank;

  Subspace pi_id = top_r_eigenbasis(m_id, r);
  Subspace pi_ood = top_r_eigenbasis(m_ood, r);
  double shift = second_moment_shift(m_id, m_ood);

  json report;
  report["provenance"] = provenance(cfg, "diagnose");
  report["rank"] = r;
  report["shift_frobenius"] = shift;
  report["shift_norm"] = shift / m_id.matrix.norm();
  report["delta_id"] = projector_distance(pi_ood, pi_id);
  report["gamma_id"] = eigengap(m_id, r);
  report["gamma_ood"] = eigengap(m_ood, r);
  report["trace_m_id"] = m_id.trace();
  report["trace_m_ood"] = m_ood.trace();

  std::vector<BoundReport> bounds;
  bounds.push_back(check_gap_bound(m_id, m_ood, r));
  bounds.push_back(check_degradation_bound(m_id, m_ood, r));

  if (!cfg.dictionary.empty()) {
    Dictionary dict = load_dictionary(cfg.dictionary);
    require(dict.d_dec == m_id.dim, ErrorKind::dim_mismatch,
            "decoder output dim does not match the activations");
    Subspace u_dec = explainer_subspace(dict.w_dec, r);
    LossDecomposition dec = decompose_loss(m_ood, u_dec, r);
    report["delta_dec"] = projector_distance(pi_ood, u_dec);
    report["overlap_id"] = subspace_overlap(u_dec, pi_id);
    report["overlap_ood"] = subspace_overlap(u_dec, pi_ood);
    report["eta"] = dec.eta;
    report["loss_total"] = dec.total;
    report["loss_irreducible"] = dec.irreducible;
    report["loss_excess"] = dec.explainer_dependent;
    auto [lower, upper] = check_excess_bounds(m_ood, u_dec, r);
    bounds.push_back(lower);
    bounds.push_back(upper);
    bounds.push_back(check_improvement_bound(m_ood, u_dec, pi_ood, r));
  }

  json jb = json::array();
  for (const BoundReport& b : bounds) jb.push_back(bound_json(b));
  report["bounds"] = jb;
  write_report(cfg, "diagnose_report.json", report);
  write_config_used(cfg);

  std::cout << "shift_norm=" << report["shift_norm"].get<double>()
            << "  delta_id=" << report["delta_id"].get<double>()
            << "  gamma_id=" << report["gamma_id"].get<double>() << "\n";
  for (const BoundReport& b : bounds)
    std::cout << (b.applicable ? (b.satisfied ? "ok   " : "FAIL ") : "n/a  ") << b.context
              << " (lhs=" << b.lhs << ", rhs=" << b.rhs << ")\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  require(!cfg.dictionary.empty() && !cfg.head.empty() && !cfg.activations.empty(),
          ErrorKind::config, "eval needs dictionary, head and activations paths");
  fs::create_directories(cfg.out);

  Dictionary dict = load_dictionary(cfg.dictionary);
  LogitHead head = load_logit_head(cfg.head);
  ActivationBatch batch = load_activations(cfg.activations);
  require(head.d == dict.d_dec, ErrorKind::dim_mismatch,
          "head reads the decoder output; widths differ");

  std::vector<int> budgets;
  for (int m : cfg.budgets) {
    if (m <= dict.k) budgets.push_back(m);
  }
  if (budgets.size() < cfg.budgets.size())
    std::cerr << "warning: dropped " << cfg.budgets.size() - budgets.size()
              << " budgets above the dictionary size " << dict.k << "\n";
  require(!budgets.empty(), ErrorKind::config, "all budgets exceed the dictionary size");
  bool have_m_star = std::find(budgets.begin(), budgets.end(), cfg.m_star) != budgets.end();
  if (!have_m_star)
    std::cerr << "warning: m_star=" << cfg.m_star << " is not in the budget set; nComp omitted\n";

  const Mat& truth = batch.reconstruction_target();
  std::vector<int> targets(batch.n());
  json items = json::array();
  double sum_ncomp = 0.0, sum_naopc = 0.0;
  int n_excluded = 0, n_scored = 0;
  for (int i = 0; i < batch.n(); ++i) {
    Vec logits = head.logits(truth.row(i).transpose());
    Eigen::Index target;
    logits.maxCoeff(&target);
    targets[i] = int(target);
    Vec input = batch.data.row(i).transpose();
    AblationOutcome out = ablate_and_score(dict, head, input, targets[i], budgets);
    out.excluded = std::abs(out.l_full - out.l_empty) < cfg.exclusion_threshold;
    json item = {{"index", i},
                 {"target", targets[i]},
                 {"l_full", out.l_full},
                 {"l_empty", out.l_empty},
                 {"excluded", out.excluded}};
    if (out.excluded) {
      ++n_excluded;
    } else {
      std::optional<double> na = naopc(out, budgets);
      if (na) item["naopc"] = *na;
      if (have_m_star) {
        std::optional<double> nc = ncomp(out, cfg.m_star);
        if (nc) item["ncomp"] = *nc;
        sum_ncomp += nc.value_or(0.0);
      }
      sum_naopc += na.value_or(0.0);
      ++n_scored;
    }
    items.push_back(std::move(item));
  }
  double dce = delta_ce(dict, head, batch, targets);

  json report;
  report["provenance"] = provenance(cfg, "eval");
  report["budgets"] = budgets;
  report["m_star"] = cfg.m_star;
  report["exclusion_threshold"] = cfg.exclusion_threshold;
  report["items"] = items;
  json agg;
  agg["n_items"] = batch.n();
  agg["n_excluded"] = n_excluded;
  agg["delta_ce"] = dce;
  if (n_scored > 0) {
    agg["mean_naopc"] = sum_naopc / n_scored;
    if (have_m_star) agg["mean_ncomp"] = sum_ncomp / n_scored;
  }
  report["aggregates"] = agg;
  write_report(cfg, "eval_report.json", report);
  write_config_used(cfg);

  std::cout << "eval: " << batch.n() << " items (" << n_excluded << " excluded)  delta_ce=" << dce;
  if (n_scored > 0) {
    std::cout << "  naopc=" << sum_naopc / n_scored;
    if (have_m_star) std::cout << "  ncomp=" << sum_ncomp / n_scored;
  }
  std::cout << "\n";
  return 0;
}

int cmd_verify(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out);
  VerifyReport rep = run_verification_suite(cfg.trials, cfg.seed, cfg.inject_bug);

  for (const VerifySection& sec : rep.sections) {
    if (sec.failures == 0)
      std::cout << "ok   " << sec.name << " (" << sec.trials << " trials)\n";
    else
      std::cout << "FAIL " << sec.name << " (" << sec.failures << "/" << sec.trials
                << " trials violated)\n";
  }
  size_t shown = 0;
  for (const VerifyViolation& v : rep.violations) {
    if (++shown > 10) {
      std::cout << "  ... and " << rep.violations.size() - 10 << " more\n";
      break;
    }
    std::cout << "  violation: " << v.invariant << " trial=" << v.trial
              << " seed=" << v.trial_seed << " lhs=" << v.lhs << " rhs=" << v.rhs << "\n";
  }

  json sections = json::array();
  for (const VerifySection& sec : rep.sections)
    sections.push_back({{"name", sec.name}, {"trials", sec.trials}, {"failures", sec.failures}});
  json violations = json::array();
  for (const VerifyViolation& v : rep.violations)
    violations.push_back({{"invariant", v.invariant},
                          {"trial", v.trial},
                          {"trial_seed", v.trial_seed},
                          {"lhs", v.lhs},
                          {"rhs", v.rhs}});
  json report;
  report["provenance"] = provenance(cfg, "verify");
  report["sections"] = sections;
  report["violations"] = violations;
  write_report(cfg, "verify_report.json", report);
  write_config_used(cfg);
  return rep.violations.empty() ? 0 : 1;
}

}  // namespace gae
