#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "gae/cli.hpp"
#include "gae/toylab.hpp"
#include "json.hpp"

using namespace gae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args, std::string* output = nullptr) {
  std::string cmd = std::string(GAE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  char buf[4096];
  while (fgets(buf, sizeof buf, pipe)) text += buf;
  int status = pclose(pipe);
  if (output) *output = text;
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json slurp_json(const fs::path& path) { return json::parse(slurp(path)); }

// a sweep small enough to run in well under a second
json tiny_config() {
  json cfg;
  cfg["seed"] = 7;
  cfg["d_in"] = 12;
  cfg["d_hidden"] = 24;
  cfg["p_out"] = 2;
  cfg["dict_size"] = 48;
  cfg["k_active"] = 4;
  cfg["n_samples"] = 600;
  cfg["pretrain_n"] = 512;
  cfg["pretrain_epochs"] = 4;
  cfg["pretrain_batch"] = 128;
  cfg["train_epochs"] = 3;
  cfg["rank"] = 3;
  cfg["bump_rank"] = 6;
  cfg["severities"] = {0.0, 1.0};
  cfg["save_artifacts"] = true;
  cfg["out"] = "tmp_cli/sweep";
  return cfg;
}

void ensure_artifacts() {
  if (fs::exists("tmp_cli/sweep/sweep_report.json")) return;
  fs::create_directories("tmp_cli");
  std::ofstream f("tmp_cli/cfg.json");
  f << tiny_config().dump(2) << "\n";
  f.close();
  REQUIRE(run_cli("toy-sweep --config tmp_cli/cfg.json --seed 9") == 0);
}

}  // namespace

TEST_CASE("run config: defaults, parsing, rejection") {
  RunConfig def = parse_run_config("{}");
  CHECK(def.seed == 2026);
  CHECK(def.rank == 8);
  CHECK(def.n_samples == 20000);
  CHECK(def.severities.empty());
  CHECK(def.budgets == std::vector<int>{1, 2, 4, 8, 16, 32, 64, 128});

  RunConfig cfg = parse_run_config(
      R"({"seed": 11, "severities": [0.0, 0.25, 1.0], "sparsifier": "relu",
          "budgets": [2, 6], "save_artifacts": true, "lambda_geom": 0.5})");
  CHECK(cfg.seed == 11);
  CHECK(cfg.severities == std::vector<double>{0.0, 0.25, 1.0});
  CHECK(cfg.sparsifier == "relu");
  CHECK(cfg.budgets == std::vector<int>{2, 6});
  CHECK(cfg.save_artifacts);
  CHECK(cfg.lambda_geom == 0.5);
  CHECK(cfg.rank == 8);  // untouched fields keep their defaults

  try {
    parse_run_config(R"({"sedd": 1})");
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind == ErrorKind::config);
    CHECK(std::string(e.what()).find("unknown config key 'sedd'") != std::string::npos);
  }
  try {
    parse_run_config(R"({"rank": "high"})");
    CHECK(false);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("must be an integer") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config(R"({"severities": 3})"), Error);
  CHECK_THROWS_AS(parse_run_config("{ not json"), Error);
  CHECK_THROWS_AS(parse_run_config("[1, 2]"), Error);      // root must be an object
  CHECK_THROWS_AS(parse_run_config(R"({"rank": 0})"), Error);  // validated after overlay
  CHECK_THROWS_AS(load_run_config("tmp_cli/does_not_exist.json"), Error);
}

TEST_CASE("run config validation rules") {
  RunConfig good;
  good.validate();
  auto reject = [](void (*mutate)(RunConfig&)) {
    RunConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), Error);
  };
  reject([](RunConfig& c) { c.rank = 0; });
  reject([](RunConfig& c) { c.alpha = 1.5; });
  reject([](RunConfig& c) { c.lambda_pres = -0.1; });
  reject([](RunConfig& c) { c.n_fit = -1; });
  reject([](RunConfig& c) { c.severities = {0.5, 0.1}; });
  reject([](RunConfig& c) { c.severities = {2.0}; });
  reject([](RunConfig& c) { c.sparsifier = "gelu"; });
  reject([](RunConfig& c) { c.budgets = {}; });
  reject([](RunConfig& c) { c.budgets = {4, 4}; });
  reject([](RunConfig& c) { c.budgets = {0, 2}; });
  reject([](RunConfig& c) { c.m_star = 0; });
  reject([](RunConfig& c) { c.trials = 0; });
  reject([](RunConfig& c) { c.train_lr = 0.0; });
  reject([](RunConfig& c) { c.exclusion_threshold = -1.0; });
}

TEST_CASE("canonical config serialization and hash") {
  RunConfig cfg;
  cfg.seed = 10000000000000000003ull;  // uint64 range survives the round trip
  cfg.severities = {0.0, 0.5};
  cfg.sparsifier = "relu";
  cfg.budgets = {2, 3};
  cfg.save_artifacts = true;
  std::string text = run_config_json(cfg);
  RunConfig back = parse_run_config(text);
  CHECK(run_config_json(back) == text);
  CHECK(back.seed == cfg.seed);

  // sorted keys make the serialization canonical
  CHECK(text.find("\"alpha\"") < text.find("\"budgets\""));
  CHECK(text.find("\"budgets\"") < text.find("\"seed\""));
  CHECK(text.find("\"seed\"") < text.find("\"trials\""));

  std::string hash = run_config_hash(cfg);
  CHECK(hash.size() == 16);
  for (char c : hash) CHECK(std::isxdigit(static_cast<unsigned char>(c)));
  CHECK(hash == run_config_hash(back));
  CHECK(run_config_hash(RunConfig{}) == run_config_hash(parse_run_config("{}")));
  RunConfig other = cfg;
  other.seed = 1;
  CHECK(run_config_hash(other) != hash);
}

TEST_CASE("logit head file round trip") {
  fs::create_directories("tmp_cli");
  LogitHead head;
  head.d = 3;
  head.vocab = 2;
  Rng rng(55);
  head.weight = rng.normal_mat(2, 3);
  head.bias = rng.normal_vec(2);
  save_logit_head(head, "tmp_cli/head_rt.json");
  LogitHead back = load_logit_head("tmp_cli/head_rt.json");
  CHECK(back.d == 3);
  CHECK(back.vocab == 2);
  CHECK(back.weight == head.weight);
  CHECK(back.bias == head.bias);

  std::ofstream bad("tmp_cli/head_bad.json");
  bad << "{\"schema\": \"something-else\"}";
  bad.close();
  CHECK_THROWS_AS(load_logit_head("tmp_cli/head_bad.json"), Error);
  std::ofstream garbage("tmp_cli/head_garbage.json");
  garbage << "not json";
  garbage.close();
  CHECK_THROWS_AS(load_logit_head("tmp_cli/head_garbage.json"), Error);
  CHECK_THROWS_AS(load_logit_head("tmp_cli/head_missing.json"), Error);
}

TEST_CASE("verification suite passes clean and catches the planted bug") {
  VerifyReport rep = run_verification_suite(10, 77, false);
  REQUIRE(rep.sections.size() == 8);
  CHECK(rep.violations.empty());
  std::vector<std::string> expected = {
      "loss-decomposition-identity", "excess-bound-sandwich",  "gap-vs-shift-bound",
      "shift-degradation-bound",     "procrustes-optimality",  "refit-stationarity",
      "refit-ols-limit",             "projection-loss-monte-carlo"};
  for (size_t i = 0; i < expected.size(); ++i) {
    CHECK(rep.sections[i].name == expected[i]);
    CHECK(rep.sections[i].failures == 0);
    // the Monte-Carlo section subsamples: a tenth of the trial budget
    CHECK(rep.sections[i].trials == (expected[i] == "projection-loss-monte-carlo" ? 1 : 10));
  }

  VerifyReport bugged = run_verification_suite(5, 77, true);
  CHECK_FALSE(bugged.violations.empty());
  for (const VerifySection& sec : bugged.sections) {
    if (sec.name == "procrustes-optimality")
      CHECK(sec.failures == 5);
    else
      CHECK(sec.failures == 0);
  }
  CHECK(bugged.violations[0].trial_seed != 0);  // reproduction handle

  CHECK_THROWS_AS(run_verification_suite(0, 1, false), Error);
}

TEST_CASE("toy-sweep command: outputs, provenance, flag precedence, determinism") {
  fs::remove_all("tmp_cli");
  ensure_artifacts();

  for (const char* name :
       {"gap_curve.csv", "recon_curve.csv", "overlap.csv", "eta.csv", "shift_vs_delta.csv",
        "improvement_fit.csv", "sweep_report.json", "config_used.json", "dictionary_id.gaedict",
        "activations_id.gaebatch", "activations_ood.gaebatch", "head.json"})
    CHECK(fs::exists(fs::path("tmp_cli/sweep") / name));

  // flag overrides file, file overrides default
  json used = slurp_json("tmp_cli/sweep/config_used.json");
  CHECK(used["seed"] == 9);
  CHECK(used["d_in"] == 12);
  CHECK(used["alpha"] == 0.0);

  RunConfig expect = parse_run_config(slurp("tmp_cli/cfg.json"));
  expect.seed = 9;
  json report = slurp_json("tmp_cli/sweep/sweep_report.json");
  CHECK(report["provenance"]["config_hash"] == run_config_hash(expect));
  CHECK(report["provenance"]["schema"] == "gae-report/v1");
  CHECK(report["provenance"]["command"] == "toy-sweep");
  REQUIRE(report["rows"].size() == 2);
  CHECK(report["rows"][0]["s"] == 0.0);
  CHECK(report["rows"][1]["s"] == 1.0);
  for (const json& row : report["rows"]) CHECK(row["gae_gap"].get<double>() <= 1e-6);
  CHECK(report.contains("fit"));

  std::string csv = slurp("tmp_cli/sweep/gap_curve.csv");
  CHECK(csv.rfind("# gae_version=1.0.0 config_hash=" + run_config_hash(expect), 0) == 0);
  CHECK(csv.find("s,fixed_gap,gae_gap") != std::string::npos);

  LogitHead head = load_logit_head("tmp_cli/sweep/head.json");
  CHECK(head.d == 24);
  CHECK(head.vocab == 2);

  // rerunning the identical command reproduces every byte
  std::string report_before = slurp("tmp_cli/sweep/sweep_report.json");
  std::string recon_before = slurp("tmp_cli/sweep/recon_curve.csv");
  REQUIRE(run_cli("toy-sweep --config tmp_cli/cfg.json --seed 9") == 0);
  CHECK(slurp("tmp_cli/sweep/sweep_report.json") == report_before);
  CHECK(slurp("tmp_cli/sweep/recon_curve.csv") == recon_before);
  CHECK(slurp("tmp_cli/sweep/gap_curve.csv") == csv);

  // a one-point grid produces a single row and no fit
  REQUIRE(run_cli("toy-sweep --config tmp_cli/cfg.json --seed 9 --severities 0 "
                  "--out tmp_cli/solo") == 0);
  json solo = slurp_json("tmp_cli/solo/sweep_report.json");
  CHECK(solo["rows"].size() == 1);
  CHECK_FALSE(solo.contains("fit"));
}

TEST_CASE("adapt command: full refit, rotation-only, moment input, shift flag") {
  ensure_artifacts();
  std::string base = "adapt --dictionary tmp_cli/sweep/dictionary_id.gaedict --rank 3 ";

  REQUIRE(run_cli(base + "--activations tmp_cli/sweep/activations_ood.gaebatch "
                         "--activations-id tmp_cli/sweep/activations_id.gaebatch "
                         "--out tmp_cli/adapt") == 0);
  json rep = slurp_json("tmp_cli/adapt/adapt_report.json");
  CHECK(rep["mode"] == "full");
  CHECK(rep["gap_after"].get<double>() <= 1e-6);
  CHECK(rep["gap_before"].get<double>() > 0.01);
  CHECK(rep["n_fit_used"] == 600);
  CHECK(rep["used_all_rows"] == true);
  CHECK(rep["no_significant_shift"] == false);
  Dictionary adapted = load_dictionary("tmp_cli/adapt/adapted.gaedict");
  Dictionary original = load_dictionary("tmp_cli/sweep/dictionary_id.gaedict");
  CHECK(adapted.w_enc == original.w_enc);  // encoder untouched
  CHECK(adapted.w_dec != original.w_dec);

  // identical batches on both sides: shift is exactly zero
  REQUIRE(run_cli(base + "--activations tmp_cli/sweep/activations_id.gaebatch "
                         "--activations-id tmp_cli/sweep/activations_id.gaebatch "
                         "--out tmp_cli/adapt_noshift") == 0);
  json quiet = slurp_json("tmp_cli/adapt_noshift/adapt_report.json");
  CHECK(quiet["no_significant_shift"] == true);
  CHECK(quiet["shift_norm"].get<double>() == 0.0);

  REQUIRE(run_cli(base + "--activations tmp_cli/sweep/activations_ood.gaebatch --alpha 1 "
                         "--out tmp_cli/adapt_rot") == 0);
  json rot = slurp_json("tmp_cli/adapt_rot/adapt_report.json");
  CHECK(rot["mode"] == "rotation-only");

  // a bare second moment supports rotation only
  ActivationBatch ood = load_activations("tmp_cli/sweep/activations_ood.gaebatch");
  save_second_moment("tmp_cli/m_ood.gaemoment",
                     estimate_second_moment(ood.reconstruction_target()));
  REQUIRE(run_cli(base + "--activations tmp_cli/m_ood.gaemoment --alpha 1 "
                         "--out tmp_cli/adapt_moment") == 0);
  json mom = slurp_json("tmp_cli/adapt_moment/adapt_report.json");
  CHECK(mom["mode"] == "rotation-only-from-moment");
  CHECK(mom["gap_after"].get<double>() <= 1e-6);

  std::string out;
  CHECK(run_cli(base + "--activations tmp_cli/m_ood.gaemoment --out tmp_cli/adapt_bad", &out)
        == 1);
  CHECK(out.find("set alpha=1") != std::string::npos);

  std::ofstream garbage("tmp_cli/garbage.gaedict");
  garbage << "not a dictionary";
  garbage.close();
  CHECK(run_cli("adapt --dictionary tmp_cli/garbage.gaedict "
                "--activations tmp_cli/sweep/activations_ood.gaebatch --out tmp_cli/adapt_bad2",
                &out) == 1);
  CHECK(out.find("error:") != std::string::npos);
}

TEST_CASE("diagnose command reports shift, bounds and dictionary geometry") {
  ensure_artifacts();
  std::string out;
  REQUIRE(run_cli("diagnose --activations-id tmp_cli/sweep/activations_id.gaebatch "
                  "--activations-ood tmp_cli/sweep/activations_ood.gaebatch "
                  "--dictionary tmp_cli/sweep/dictionary_id.gaedict --rank 3 "
                  "--out tmp_cli/diag",
                  &out) == 0);
  json rep = slurp_json("tmp_cli/diag/diagnose_report.json");
  CHECK(rep["shift_frobenius"].get<double>() > 0.0);
  CHECK(rep["delta_id"].get<double>() > 0.0);
  CHECK(rep["eta"].get<double>() >= 0.0);
  CHECK(rep["loss_total"].get<double>() ==
        doctest::Approx(rep["loss_irreducible"].get<double>() + rep["loss_excess"].get<double>()));
  REQUIRE(rep["bounds"].size() == 5);  // gap, degradation, excess pair, improvement
  for (const json& b : rep["bounds"])
    if (b["applicable"].get<bool>()) CHECK(b["satisfied"].get<bool>());
  CHECK(out.find("shift_norm=") != std::string::npos);

  // without a dictionary only the moment-level bounds appear
  REQUIRE(run_cli("diagnose --activations-id tmp_cli/sweep/activations_id.gaebatch "
                  "--activations-ood tmp_cli/sweep/activations_ood.gaebatch --rank 3 "
                  "--out tmp_cli/diag_bare") == 0);
  json bare = slurp_json("tmp_cli/diag_bare/diagnose_report.json");
  CHECK(bare["bounds"].size() == 2);
  CHECK_FALSE(bare.contains("eta"));

  CHECK(run_cli("diagnose --activations-id tmp_cli/sweep/activations_id.gaebatch "
                "--activations-ood tmp_cli/sweep/activations_ood.gaebatch --rank 24 "
                "--out tmp_cli/diag_bad",
                &out) == 1);
  CHECK(out.find("rank must be below the activation dim") != std::string::npos);
}

TEST_CASE("eval command aggregates ablation metrics") {
  ensure_artifacts();
  std::string base = "eval --dictionary tmp_cli/sweep/dictionary_id.gaedict "
                     "--head tmp_cli/sweep/head.json "
                     "--activations tmp_cli/sweep/activations_id.gaebatch ";
  REQUIRE(run_cli(base + "--budgets 1,2,4 --m-star 2 --out tmp_cli/eval") == 0);
  json rep = slurp_json("tmp_cli/eval/eval_report.json");
  CHECK(rep["aggregates"]["n_items"] == 600);
  CHECK(rep["items"].size() == 600);
  CHECK(rep["budgets"] == json({1, 2, 4}));
  int excluded = rep["aggregates"]["n_excluded"].get<int>();
  CHECK(excluded >= 0);
  if (excluded < 600) {
    CHECK(std::isfinite(rep["aggregates"]["mean_naopc"].get<double>()));
    CHECK(std::isfinite(rep["aggregates"]["mean_ncomp"].get<double>()));
  }
  CHECK(std::isfinite(rep["aggregates"]["delta_ce"].get<double>()));

  // budgets above the dictionary size are dropped with a warning
  std::string out;
  REQUIRE(run_cli(base + "--budgets 1,2,100 --m-star 2 --out tmp_cli/eval_drop", &out) == 0);
  CHECK(out.find("dropped 1 budgets") != std::string::npos);
  json dropped = slurp_json("tmp_cli/eval_drop/eval_report.json");
  CHECK(dropped["budgets"] == json({1, 2}));

  // m_star outside the surviving budgets: nComp silently omitted from aggregates
  REQUIRE(run_cli(base + "--budgets 1,2 --m-star 32 --out tmp_cli/eval_nostar", &out) == 0);
  CHECK(out.find("nComp omitted") != std::string::npos);
  json nostar = slurp_json("tmp_cli/eval_nostar/eval_report.json");
  CHECK_FALSE(nostar["aggregates"].contains("mean_ncomp"));

  CHECK(run_cli(base + "--budgets 100 --m-star 100 --out tmp_cli/eval_bad", &out) == 1);
  CHECK(out.find("all budgets exceed") != std::string::npos);
}

TEST_CASE("verify command: clean run and negative control") {
  std::string out;
  REQUIRE(run_cli("verify --trials 5 --seed 3 --out tmp_cli/verify", &out) == 0);
  CHECK(out.find("ok   procrustes-optimality") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
  json rep = slurp_json("tmp_cli/verify/verify_report.json");
  CHECK(rep["sections"].size() == 8);
  CHECK(rep["violations"].empty());

  CHECK(run_cli("verify --trials 5 --seed 3 --inject-bug --out tmp_cli/verify_bug", &out) == 1);
  CHECK(out.find("FAIL procrustes-optimality") != std::string::npos);
  json bug = slurp_json("tmp_cli/verify_bug/verify_report.json");
  CHECK_FALSE(bug["violations"].empty());
}

TEST_CASE("malformed invocations exit nonzero with a message") {
  std::string out;
  CHECK(run_cli("", &out) != 0);                  // a subcommand is required
  CHECK(run_cli("frobnicate", &out) != 0);        // unknown subcommand
  CHECK(run_cli("adapt --out tmp_cli/x", &out) != 0);  // missing required paths
  std::ofstream bad("tmp_cli/bad_cfg.json");
  bad << R"({"sedd": 1})";
  bad.close();
  CHECK(run_cli("verify --config tmp_cli/bad_cfg.json", &out) == 1);
  CHECK(out.find("unknown config key") != std::string::npos);
}
