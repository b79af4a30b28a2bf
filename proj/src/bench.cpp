#include "cpr/bench.hpp"

#include "cpr/evaluation.hpp"
#include "cpr/physiomask.hpp"
#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>

namespace cpr {

using nlohmann::json;

json BenchConfig::to_json() const {
  return {{"seeds", seeds},
          {"data_seed", data_seed},
          {"n_train", n_train},
          {"n_val", n_val},
          {"n_test", n_test},
          {"train", train.to_json()},
          {"dual_weights", dual_weights},
          {"epsilons", epsilons},
          {"erm_drop_f1", erm_drop_f1},
          {"attack", attack.to_json()},
          {"median_window", median.window},
          {"rs", rs.to_json()},
          {"ablation", ablation},
          {"diagnostics", diagnostics},
          {"n_diagnostic_records", n_diagnostic_records}};
}

BenchConfig BenchConfig::from_json(const json& j) {
  BenchConfig c;
  c.seeds = j.value("seeds", c.seeds);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.n_train = j.value("n_train", c.n_train);
  c.n_val = j.value("n_val", c.n_val);
  c.n_test = j.value("n_test", c.n_test);
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("dual_weights")) c.dual_weights = j.at("dual_weights");
  c.epsilons = j.value("epsilons", c.epsilons);
  c.erm_drop_f1 = j.value("erm_drop_f1", c.erm_drop_f1);
  if (j.contains("attack")) c.attack = AttackConfig::from_json(j.at("attack"));
  c.median.window = j.value("median_window", c.median.window);
  if (j.contains("rs")) {
    const json& r = j.at("rs");
    c.rs.sigma = r.value("sigma", c.rs.sigma);
    c.rs.n_pred = r.value("n_pred", c.rs.n_pred);
    c.rs.n_cert = r.value("n_cert", c.rs.n_cert);
    c.rs.alpha_conf = r.value("alpha_conf", c.rs.alpha_conf);
    c.rs.seed = r.value("seed", c.rs.seed);
  }
  c.ablation = j.value("ablation", c.ablation);
  c.diagnostics = j.value("diagnostics", c.diagnostics);
  c.n_diagnostic_records = j.value("n_diagnostic_records", c.n_diagnostic_records);
  return c;
}

std::string BenchConfig::hash() const { return sha256_hex(to_json().dump()); }

json BenchResult::to_json() const {
  json runs_j = json::array();
  for (const auto& r : runs)
    runs_j.push_back({{"method", r.method},     {"seed", r.seed},         {"clean_f1", r.clean_f1},
                      {"sap_f1", r.sap_f1},     {"clean_auc", r.clean_auc}, {"sap_auc", r.sap_auc},
                      {"forwards_per_record", r.forwards_per_record}});
  json sweep = json::array();
  for (const auto& [e, f] : erm_sweep) sweep.push_back({{"epsilon", e}, {"erm_sap_f1", f}});
  return {{"epsilon_star", epsilon_star}, {"erm_sweep", sweep}, {"runs", runs_j}, {"diagnostics", diagnostics}};
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  if (v.size() < 2) return {m, 0};
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / double(v.size() - 1))};
}

namespace {

struct Data {
  LabeledBatch<float> train, val, test;
};

Data make_data(const BenchConfig& cfg) {
  auto split = [&](int n, Split s) {
    auto records = generate_dataset(cfg.synth, static_cast<std::size_t>(n), cfg.data_seed, s);
    std::vector<PhysioMask> masks;
    masks.reserve(records.size());
    for (const auto& r : records) masks.push_back(mask_from_annotations(r));
    return make_batch<float>(records, &masks);
  };
  return {split(cfg.n_train, Split::train), split(cfg.n_val, Split::val), split(cfg.n_test, Split::test)};
}

// Step size follows the budget so that n_steps can reach the edge of the ball at every epsilon.
AttackConfig at_budget(AttackConfig a, double eps) {
  a.epsilon = eps;
  if (eps > 0) a.step_size = eps / 4;
  return a;
}

TrainConfig method_config(const BenchConfig& cfg, Preset p, std::uint64_t seed, double eps) {
  TrainConfig t = cfg.train;
  t.preset = p;
  t.seed = seed;
  t.loss_weights.reset();
  if (preset_model_kind(p) == ModelKind::dual) {
    // Overrides only touch terms the preset switches on, so ablations keep their zeros.
    json w = preset_weights(p).to_json();
    for (const auto& [k, v] : cfg.dual_weights.items())
      if (w.contains(k) && w.at(k).get<double>() != 0.0) w[k] = v;
    t.loss_weights = LossWeights::from_json(w);
  }
  t.attack = at_budget(cfg.attack, eps);
  t.attack.seed = seed;
  return t;
}

AttackConfig eval_attack(const BenchConfig& cfg, double eps, double fs) {
  AttackConfig a = at_budget(cfg.attack, eps);
  a.kind = AttackKind::sap;
  a.fs = fs;
  return a;
}

struct Scored {
  double f1 = 0, auc = 0;
};

Scored score(const Tensor<float>& scores, const Eigen::MatrixXd& labels) {
  const Eigen::MatrixXd s = to_matrix(scores);
  return {macro_f1(s, labels), macro_auc(s, labels)};
}

// Randomized smoothing decisions as one-hot rows (abstentions predict nothing) and vote shares.
Scored score_rs(const Predictor<float>& p, const Tensor<float>& x, const RsConfig& rs, const Eigen::MatrixXd& labels) {
  const auto preds = rs_predict(p, x, rs);
  Eigen::MatrixXd decisions = Eigen::MatrixXd::Zero(labels.rows(), labels.cols());
  Eigen::MatrixXd shares(labels.rows(), labels.cols());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!preds[i].abstained) decisions(Eigen::Index(i), preds[i].predicted_class) = 1.0;
    for (Eigen::Index k = 0; k < labels.cols(); ++k) shares(Eigen::Index(i), k) = double(preds[i].counts[k]) / rs.n_pred;
  }
  return {macro_f1_decisions(decisions, labels), macro_auc(shares, labels)};
}

Eigen::MatrixXd lead0_mask(const Tensor<float>& mask, Index n) {
  const Index C = mask.dim(1), L = mask.dim(2);
  Eigen::MatrixXd out(n, L);
  for (Index i = 0; i < n; ++i)
    for (Index t = 0; t < L; ++t) out(i, t) = mask[(i * C) * L + t];
  return out;
}

double gradcam_ratio(const ModelBundle<float>& m, const LabeledBatch<float>& d) {
  const Index N = d.size();
  const Index K = d.labels.dim(1);
  const Eigen::MatrixXd mask = lead0_mask(d.mask, N);
  Eigen::MatrixXd sal(N, d.x.dim(2));
  for (int k = 0; k < K; ++k) {
    const SaliencyMap s = gradcam_1d(m, d.x, k);
    for (Index i = 0; i < N; ++i)
      if (d.labels[i * K + k] == 1.0f) sal.row(i) = s.weights.row(i);
  }
  return in_mask_mass_ratio(sal, mask);
}

}  // namespace

BenchResult run_bench(const BenchConfig& cfg, const BenchLog& log) {
  if (cfg.seeds.empty()) throw Error("E_CONFIG", "bench needs at least one seed");
  if (cfg.epsilons.empty()) throw Error("E_CONFIG", "bench needs an epsilon grid");
  std::mutex log_mu;
  auto say = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mu);
    log(s);
  };
  const Data data = make_data(cfg);
  const Eigen::MatrixXd labels = to_matrix(data.test.labels);
  const double fs = data.test.fs;
  const std::size_t n_seeds = cfg.seeds.size();
  BenchResult res;

  // ERM first: its sweep fixes the attack budget used everywhere else.
  std::vector<TrainState> erm(n_seeds);
  std::vector<std::vector<double>> sweep(n_seeds);
  parallel_for(n_seeds, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      erm[i] = train(method_config(cfg, Preset::erm, cfg.seeds[i], 0.0), data.train, data.val);
      say("trained erm seed " + std::to_string(cfg.seeds[i]));
      const Predictor<float> p = plain(erm[i].best_model);
      sweep[i] = {};
      for (double e : cfg.epsilons) {
        const AttackConfig a = eval_attack(cfg, e, fs);
        sweep[i].push_back(attack_sweep(p, data.test, a, std::span<const double>(&e, 1)).points[0].macro_f1);
      }
    }
  });
  res.epsilon_star = cfg.epsilons.back();
  bool found = false;
  for (std::size_t k = 0; k < cfg.epsilons.size(); ++k) {
    std::vector<double> f;
    for (std::size_t i = 0; i < n_seeds; ++i) f.push_back(sweep[i][k]);
    const double mean = mean_std(f).first;
    res.erm_sweep.emplace_back(cfg.epsilons[k], mean);
    if (!found && mean < cfg.erm_drop_f1) {
      res.epsilon_star = cfg.epsilons[k];
      found = true;
    }
  }
  const double eps = res.epsilon_star;
  say("epsilon* = " + std::to_string(eps));

  std::vector<Preset> trained{Preset::sap_at, Preset::cpr_full};
  if (cfg.ablation) trained.push_back(Preset::cpr_no_const);
  struct Job {
    std::size_t seed_index;
    Preset preset;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < n_seeds; ++i)
    for (Preset p : trained) jobs.push_back({i, p});
  std::vector<TrainState> models(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) {
      models[j] = train(method_config(cfg, jobs[j].preset, cfg.seeds[jobs[j].seed_index], eps), data.train, data.val);
      say("trained " + to_string(jobs[j].preset) + " seed " + std::to_string(cfg.seeds[jobs[j].seed_index]));
    }
  });

  const AttackConfig attack = eval_attack(cfg, eps, fs);
  const Index N = data.test.size();
  std::map<std::string, std::string> types{{"erm", "Baseline"},       {"median", "Preproc."},
                                           {"rs", "Certified"},       {"sap_at", "Oracle"},
                                           {"cpr_full", "Ours"},      {"cpr_no_const", "Ablation"}};
  std::vector<std::string> order{"erm", "median", "rs", "sap_at", "cpr_full"};
  if (cfg.ablation) order.push_back("cpr_no_const");
  std::vector<MethodRun> runs;
  json diag = json::array();
  for (std::size_t i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = cfg.seeds[i];
    auto run_plain = [&](const std::string& name, const Predictor<float>& p) {
      MethodRun r{name, types[name], seed};
      p.model->reset_forward_count();
      const Scored c = score(predict_scores(p, data.test.x), labels);
      r.forwards_per_record = p.model->forward_count() / N;
      AttackConfig a = attack;
      a.seed = seed;
      const auto adv = run_attack(p, data.test.x, data.test.labels, a);
      const Scored s = score(predict_scores(p, adv.x_adv), labels);
      r.clean_f1 = c.f1;
      r.clean_auc = c.auc;
      r.sap_f1 = s.f1;
      r.sap_auc = s.auc;
      return std::make_pair(r, adv.x_adv);
    };
    const ModelBundle<float>& erm_model = erm[i].best_model;
    auto [erm_run, erm_adv] = run_plain("erm", plain(erm_model));
    runs.push_back(erm_run);

    Predictor<float> med = plain(erm_model);
    med.median = cfg.median;
    runs.push_back(run_plain("median", med).first);

    {
      MethodRun r{"rs", types["rs"], seed};
      RsConfig rs = cfg.rs;
      rs.seed = seed;
      erm_model.reset_forward_count();
      const Scored c = score_rs(plain(erm_model), data.test.x, rs, labels);
      r.forwards_per_record = erm_model.forward_count() / N;
      const Scored s = score_rs(plain(erm_model), erm_adv, rs, labels);
      r.clean_f1 = c.f1;
      r.clean_auc = c.auc;
      r.sap_f1 = s.f1;
      r.sap_auc = s.auc;
      runs.push_back(r);
    }

    json d = {{"seed", seed}};
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].seed_index != i) continue;
      const std::string name = to_string(jobs[j].preset);
      const ModelBundle<float>& m = models[j].best_model;
      auto [run, adv] = run_plain(name, plain(m));
      runs.push_back(run);
      if (cfg.diagnostics && jobs[j].preset == Preset::cpr_full) {
        const Index n = std::min<Index>(cfg.n_diagnostic_records, N);
        const LabeledBatch<float> sub = data.test.slice(0, n);
        d["gradcam_ratio_cpr"] = gradcam_ratio(m, sub);
        d["gradcam_ratio_erm"] = gradcam_ratio(erm_model, sub);
        d["latent_shift_ratio_cpr"] = median_shift_ratio(latent_shift(m, data.test.x, adv));
      }
    }
    diag.push_back(d);
    say("evaluated seed " + std::to_string(seed));
  }
  res.diagnostics = diag;
  res.runs = runs;

  for (const auto& name : order) {
    std::vector<double> cf, sf, ca, sa;
    for (const auto& r : runs)
      if (r.method == name) {
        cf.push_back(r.clean_f1);
        sf.push_back(r.sap_f1);
        ca.push_back(r.clean_auc);
        sa.push_back(r.sap_auc);
      }
    MethodSummary s{name, types[name]};
    std::tie(s.clean_f1_mean, s.clean_f1_std) = mean_std(cf);
    std::tie(s.sap_f1_mean, s.sap_f1_std) = mean_std(sf);
    std::tie(s.clean_auc_mean, s.clean_auc_std) = mean_std(ca);
    std::tie(s.sap_auc_mean, s.sap_auc_std) = mean_std(sa);
    s.gap = s.clean_f1_mean > 0 ? gap_percent(s.clean_f1_mean, s.sap_f1_mean) : 0.0;
    res.summary.push_back(s);
  }
  return res;
}

std::string bench_csv(const BenchResult& r) {
  std::string out =
      "method,type,clean_f1_mean,clean_f1_std,sap_f1_mean,sap_f1_std,gap,clean_auc_mean,clean_auc_std,"
      "sap_auc_mean,sap_auc_std\n";
  char buf[512];
  for (const auto& s : r.summary) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.4f,%.4f,%.4f,%.1f,%.4f,%.4f,%.4f,%.4f\n", s.method.c_str(),
                  s.type.c_str(), s.clean_f1_mean, s.clean_f1_std, s.sap_f1_mean, s.sap_f1_std, s.gap + 0.0,
                  s.clean_auc_mean, s.clean_auc_std, s.sap_auc_mean, s.sap_auc_std);
    out += buf;
  }
  return out;
}

}  // namespace cpr
