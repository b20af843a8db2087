#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gae/cli.hpp"

namespace {

struct Flags {
  std::string config;
  uint64_t seed = 0;
  std::string out;
  std::string severities;
  int rank = 0;
  double lambda_geom = 0.0;
  double lambda_pres = 0.0;
  double alpha = 0.0;
  int n_fit = 0;
  std::string budgets;
  int m_star = 0;
  std::string dictionary, activations, activations_id, activations_ood, head;
  double shift_threshold = 0.0;
  double exclusion_threshold = 0.0;
  int trials = 0;
  bool inject_bug = false;
  bool save_artifacts = false;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      if constexpr (std::is_same_v<T, int>)
        out.push_back(std::stoi(item));
      else
        out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw gae::Error(gae::ErrorKind::config, "cannot parse " + what + " entry '" + item + "'");
    }
  }
  gae::require(!out.empty(), gae::ErrorKind::config, what + " list is empty");
  return out;
}

// Flags beat the config file, which beats the defaults.
void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--severities", f.severities, "comma-separated severities in [0,1]");
  cmd->add_option("--rank", f.rank, "active-subspace rank");
  cmd->add_option("--lambda-geom", f.lambda_geom, "geometry penalty weight");
  cmd->add_option("--lambda-pres", f.lambda_pres, "preservation penalty weight");
  cmd->add_option("--alpha", f.alpha, "rotation/refit interpolation (1 = rotation only)");
  cmd->add_option("--n-fit", f.n_fit, "refit subsample size (0 = command default)");
  cmd->add_option("--budgets", f.budgets, "comma-separated ablation budgets");
  cmd->add_option("--m-star", f.m_star, "completeness budget");
}

bool given(const CLI::App* cmd, const std::string& name) {
  const CLI::Option* opt = cmd->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

gae::RunConfig resolve(const CLI::App* cmd, const Flags& f) {
  gae::RunConfig cfg;
  if (!f.config.empty()) cfg = gae::load_run_config(f.config);
  if (given(cmd, "--seed")) cfg.seed = f.seed;
  if (given(cmd, "--out")) cfg.out = f.out;
  if (given(cmd, "--severities")) cfg.severities = parse_list<double>(f.severities, "severities");
  if (given(cmd, "--rank")) cfg.rank = f.rank;
  if (given(cmd, "--lambda-geom")) cfg.lambda_geom = f.lambda_geom;
  if (given(cmd, "--lambda-pres")) cfg.lambda_pres = f.lambda_pres;
  if (given(cmd, "--alpha")) cfg.alpha = f.alpha;
  if (given(cmd, "--n-fit")) cfg.n_fit = f.n_fit;
  if (given(cmd, "--budgets")) cfg.budgets = parse_list<int>(f.budgets, "budgets");
  if (given(cmd, "--m-star")) cfg.m_star = f.m_star;
  if (given(cmd, "--dictionary")) cfg.dictionary = f.dictionary;
  if (given(cmd, "--activations")) cfg.activations = f.activations;
  if (given(cmd, "--activations-id")) cfg.activations_id = f.activations_id;
  if (given(cmd, "--activations-ood")) cfg.activations_ood = f.activations_ood;
  if (given(cmd, "--head")) cfg.head = f.head;
  if (given(cmd, "--shift-threshold")) cfg.shift_threshold = f.shift_threshold;
  if (given(cmd, "--exclusion-threshold")) cfg.exclusion_threshold = f.exclusion_threshold;
  if (given(cmd, "--trials")) cfg.trials = f.trials;
  if (given(cmd, "--inject-bug")) cfg.inject_bug = f.inject_bug;
  if (given(cmd, "--save-artifacts")) cfg.save_artifacts = f.save_artifacts;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geometry-adaptive explainer toolkit"};
  app.require_subcommand(1);
  Flags f;

  CLI::App* sweep = app.add_subcommand(
      "toy-sweep", "run the controlled severity sweep end to end");
  add_common(sweep, f);
  sweep->add_flag("--save-artifacts", f.save_artifacts,
                  "also write the trained dictionary, head and activation batches");

  CLI::App* adapt = app.add_subcommand(
      "adapt", "rotate + refit a dictionary onto an OOD batch or moment");
  add_common(adapt, f);
  adapt->add_option("--dictionary", f.dictionary, "dictionary file")->required();
  adapt->add_option("--activations", f.activations, "OOD activations or second-moment file")
      ->required();
  adapt->add_option("--activations-id", f.activations_id,
                    "optional ID activations/moment for the shift check");
  adapt->add_option("--shift-threshold", f.shift_threshold,
                    "relative moment shift below which adaptation is flagged unnecessary");

  CLI::App* diagnose = app.add_subcommand(
      "diagnose", "compare ID/OOD geometry and check the bounds");
  add_common(diagnose, f);
  diagnose->add_option("--activations-id", f.activations_id, "ID activations or moment")
      ->required();
  diagnose->add_option("--activations-ood", f.activations_ood, "OOD activations or moment")
      ->required();
  diagnose->add_option("--dictionary", f.dictionary, "optional dictionary for excess losses");

  CLI::App* eval = app.add_subcommand(
      "eval", "ablation faithfulness metrics against a linear head");
  add_common(eval, f);
  eval->add_option("--dictionary", f.dictionary, "dictionary file")->required();
  eval->add_option("--head", f.head, "logit head JSON")->required();
  eval->add_option("--activations", f.activations, "activation batch")->required();
  eval->add_option("--exclusion-threshold", f.exclusion_threshold,
                   "minimum |l_full - l_empty| for an item to count");

  CLI::App* verify = app.add_subcommand(
      "verify", "randomized checks of the closed-form identities and bounds");
  add_common(verify, f);
  verify->add_option("--trials", f.trials, "trials per property");
  verify->add_flag("--inject-bug", f.inject_bug,
                   "negative control: corrupt the rotation and expect a failure");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sweep->parsed()) return gae::cmd_toy_sweep(resolve(sweep, f));
    if (adapt->parsed()) return gae::cmd_adapt(resolve(adapt, f));
    if (diagnose->parsed()) return gae::cmd_diagnose(resolve(diagnose, f));
    if (eval->parsed()) return gae::cmd_eval(resolve(eval, f));
    if (verify->parsed()) return gae::cmd_verify(resolve(verify, f));
  } catch (const gae::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
