#pragma once

#include "cpr/attacks.hpp"
#include "cpr/defenses.hpp"
#include "cpr/signals.hpp"
#include "cpr/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cpr {

struct BenchConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t data_seed = 2024;
  int n_train = 2000;
  int n_val = 500;
  int n_test = 500;
  SynthConfig synth = SynthConfig::standard();
  TrainConfig train;                   // preset and attack budget are set per method
  // Applied on top of the preset weights of dual-pathway presets (terms a preset switches off stay
  // off). The reconstruction term sums over samples and is scaled down; the latent terms act on
  // unit-norm latents and are scaled up.
  nlohmann::json dual_weights = {{"w_recon", 0.01}, {"w_orth", 1.0}, {"w_cons", 10.0}, {"w_adv", 10.0}};
  std::vector<double> epsilons{0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8};
  double erm_drop_f1 = 0.70;           // epsilon* = first grid point where ERM falls below this
  AttackConfig attack;                 // SAP used for evaluation (epsilon replaced by epsilon*)
  MedianConfig median{5};
  RsConfig rs{0.1};
  bool ablation = false;               // also train cpr_no_const
  bool diagnostics = false;            // Grad-CAM mass ratio and latent shifts
  int n_diagnostic_records = 100;

  nlohmann::json to_json() const;
  static BenchConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Per-seed numbers of one method.
struct MethodRun {
  std::string method;
  std::string type;  // "Baseline", "Preproc.", "Certified", "Oracle", "Ours", "Ablation"
  std::uint64_t seed = 0;
  double clean_f1 = 0, sap_f1 = 0, clean_auc = 0, sap_auc = 0;
  std::int64_t forwards_per_record = 0;  // encoder passes per test-time decision
};

struct MethodSummary {
  std::string method;
  std::string type;
  double clean_f1_mean = 0, clean_f1_std = 0;
  double sap_f1_mean = 0, sap_f1_std = 0;
  double gap = 0;  // percent, table convention
  double clean_auc_mean = 0, clean_auc_std = 0;
  double sap_auc_mean = 0, sap_auc_std = 0;
};

struct BenchResult {
  double epsilon_star = 0;
  std::vector<std::pair<double, double>> erm_sweep;  // (epsilon, mean SAP macro-F1)
  std::vector<MethodRun> runs;
  std::vector<MethodSummary> summary;
  nlohmann::json diagnostics;  // per seed: gradcam ratios, latent shift ratios
  nlohmann::json to_json() const;
};

using BenchLog = std::function<void(const std::string&)>;

BenchResult run_bench(const BenchConfig& cfg, const BenchLog& log = {});

/// Table-shaped CSV: method,type,clean_f1_mean,clean_f1_std,sap_f1_mean,sap_f1_std,gap,...
std::string bench_csv(const BenchResult& r);

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& v);

}  // namespace cpr
