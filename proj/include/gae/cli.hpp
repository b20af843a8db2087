#pragma once

// Command layer: a flat validated run configuration, the five commands, and
// the randomized verification suite they share with the test harness.

#include <optional>
#include <string>
#include <vector>

#include "gae/metrics.hpp"

namespace gae {

// Flat configuration for every command. Defaults reproduce the controlled
// experiment at its published scale. A JSON config file may set any field by
// its exact name below; unknown keys are rejected.
struct RunConfig {
  uint64_t seed = 2026;
  std::string out = "out";

  // adaptation (mirrors GaeConfig; rank doubles as the sweep/diagnose rank)
  int rank = 8;
  double lambda_geom = 0.1;
  double lambda_pres = 0.2;
  double alpha = 0.0;
  int n_fit = 0;  // 0 = command default: sweep fits the full batch, adapt 2048

  // toy sweep
  std::vector<double> severities;  // default: 11 equispaced points in [0,1]
  int n_samples = 20000;
  int d_in = 128;
  int d_hidden = 256;
  int p_out = 8;
  int dict_size = 2048;
  int k_active = 8;
  std::string sparsifier = "topk";  // "topk" | "relu"
  int train_epochs = 20;
  double train_lr = 0.05;
  double l1_weight = 0.0;
  int pretrain_n = 16384;
  int pretrain_epochs = 100;
  int pretrain_batch = 256;
  double pretrain_lr = 0.02;
  double teacher_scale = 2.0;
  double slope_range = 6.0;
  double rho = 10.0;
  int bump_rank = 32;
  bool save_artifacts = false;  // also emit dictionary/batches/head for reuse

  // metrics
  std::vector<int> budgets = {1, 2, 4, 8, 16, 32, 64, 128};
  int m_star = 32;
  double exclusion_threshold = 0.1;

  // file inputs
  std::string dictionary;
  std::string activations;
  std::string activations_id;
  std::string activations_ood;
  std::string head;

  // adapt reporting / verify
  double shift_threshold = 1e-3;  // no-shift flag: shift below this * ||M_ID||_F
  int trials = 100;
  bool inject_bug = false;  // negative control: corrupt one invariant on purpose

  void validate() const;
};

// Parse a JSON object into a RunConfig (defaults overlaid by the file's
// fields). Rejects unknown keys and wrong types.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization (sorted keys) used for provenance and hashing.
std::string run_config_json(const RunConfig& config);
std::string run_config_hash(const RunConfig& config);  // 16 hex digits, FNV-1a

// Linear head serialization (small JSON document).
void save_logit_head(const LogitHead& head, const std::string& path);
LogitHead load_logit_head(const std::string& path);

// One randomized-property violation, with enough to reproduce it.
struct VerifyViolation {
  std::string invariant;
  int trial = 0;
  uint64_t trial_seed = 0;
  double lhs = 0.0;
  double rhs = 0.0;
};

struct VerifySection {
  std::string name;
  int trials = 0;
  int failures = 0;
};

struct VerifyReport {
  std::vector<VerifySection> sections;
  std::vector<VerifyViolation> violations;
};

// Randomized property suite: loss-decomposition identity, excess-bound
// sandwich, gap/degradation bounds in their small-shift regime, Procrustes
// optimality, refit stationarity and OLS limit, Monte-Carlo projection loss.
// inject_bug corrupts the Procrustes trace identity as a negative control.
VerifyReport run_verification_suite(int trials, uint64_t seed, bool inject_bug);

// Commands. Each returns a process exit status (0 = success) and writes its
// report documents under config.out atomically.
int cmd_toy_sweep(const RunConfig& config);
int cmd_adapt(const RunConfig& config);
int cmd_diagnose(const RunConfig& config);
int cmd_eval(const RunConfig& config);
int cmd_verify(const RunConfig& config);

}  // namespace gae
