#include "cpr/attacks.hpp"
#include "cpr/bench.hpp"
#include "cpr/defenses.hpp"
#include "cpr/evaluation.hpp"
#include "cpr/physiomask.hpp"
#include "cpr/signals.hpp"
#include "cpr/training.hpp"
#include "cpr/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cpr;

namespace {

constexpr const char* kVersion = "cpr 0.1.0";

json read_json(const std::string& path) {
  if (path.empty()) return json::object();
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error("E_CONFIG", "config " + path + " is not valid JSON: " + e.what());
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("E_IO", "cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_json(const std::string& path, json j, const std::string& hash) {
  j["config_hash"] = hash;
  write_file_atomic(path, j.dump(2) + "\n");
}

void write_manifest(const std::string& dir, const std::string& config_path, const std::vector<std::uint64_t>& seeds,
                    const std::string& hash, const std::vector<std::string>& files) {
  json m = {{"config", config_path}, {"seeds", seeds}, {"output_dir", dir},
            {"version", kVersion},   {"config_hash", hash}, {"files", files}};
  write_file_atomic(join(dir, "manifest.json"), m.dump(2) + "\n");
}

std::vector<PhysioMask> maybe_masks(const std::string& path) {
  if (path.empty()) return {};
  return read_masks(path);
}

LabeledBatch<float> load_batch(const std::string& data, const std::string& masks) {
  const auto records = read_records(data);
  const auto m = maybe_masks(masks);
  return make_batch<float>(records, masks.empty() ? nullptr : &m);
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw Error("E_CONFIG", "not a number in list: '" + item + "'");
      }
    }
  return out;
}

Eigen::MatrixXd scores_of(const Predictor<float>& p, const LabeledBatch<float>& d) {
  return to_matrix(predict_scores(p, d.x, p.mask_input ? &d.mask : nullptr));
}

struct AttackFlags {
  std::string kind = "sap";
  double eps = 0.1;
  double step_size = -1;
  int steps = 10;
  double sigma_s = 0.02;
  bool rand_init = false;
  std::uint64_t seed = 0;

  void add(CLI::App* c) {
    c->add_option("--kind", kind, "fgsm|pgd|sap")->check(CLI::IsMember({"fgsm", "pgd", "sap"}));
    c->add_option("--eps", eps, "L-inf budget (normalised units)");
    c->add_option("--steps", steps, "iterations (pgd, sap)");
    c->add_option("--step-size", step_size, "per-step size; default eps/4");
    c->add_option("--sigma-s", sigma_s, "SAP kernel std in seconds");
    c->add_flag("--rand-init", rand_init, "uniform random start inside the ball");
    c->add_option("--seed", seed, "attack seed");
  }
  AttackConfig config(double fs) const {
    AttackConfig a;
    a.kind = attack_kind_from_string(kind);
    a.epsilon = eps;
    a.n_steps = steps;
    a.step_size = step_size > 0 ? step_size : (eps > 0 ? eps / 4 : 1.0);
    a.smooth_sigma_s = sigma_s;
    a.rand_init = rand_init;
    a.seed = seed;
    a.fs = fs;
    return a;
  }
};

Predictor<float> predictor_for(const ModelBundle<float>& m, bool mask_input, int median) {
  Predictor<float> p = plain(m);
  p.mask_input = mask_input;
  if (median > 0) p.median = MedianConfig{median};
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal physiological representation learning for ECG: data, training, attacks and defenses"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic train/val/test split as CPRSIG01 files");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  int n_train = 2000, n_val = 500, n_test = 500;
  gen->add_option("--config", gen_config, "synthesis config JSON");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "data seed");
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-val", n_val);
  gen->add_option("--n-test", n_test);

  // mask
  auto* mask = app.add_subcommand("mask", "physio-masks for a record file");
  std::string mask_data, mask_mode = "annotation", mask_out;
  mask->add_option("--data", mask_data, "CPRSIG01 records")->required();
  mask->add_option("--mode", mask_mode, "annotation|detector")->check(CLI::IsMember({"annotation", "detector"}));
  mask->add_option("--out", mask_out, "CPRMSK01 output")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_preset, tr_data, tr_val, tr_masks, tr_val_masks, tr_out, tr_resume;
  std::uint64_t tr_seed = 0;
  int tr_epochs = -1;
  double tr_eps = -1;
  tr->add_option("--config", tr_config, "TrainConfig JSON");
  tr->add_option("--preset", tr_preset, "erm|resnet_mask|naive_disent|cpr_no_const|cpr_full|sap_at");
  tr->add_option("--data", tr_data, "training records")->required();
  tr->add_option("--val", tr_val, "validation records")->required();
  tr->add_option("--masks", tr_masks, "training masks");
  tr->add_option("--val-masks", tr_val_masks, "validation masks");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--seed", tr_seed);
  tr->add_option("--epochs", tr_epochs);
  tr->add_option("--eps", tr_eps, "attack budget for sap_at and the invariance term");
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");

  // attack
  auto* at = app.add_subcommand("attack", "attack a model and report metrics");
  std::string at_ckpt, at_data, at_masks, at_out;
  AttackFlags at_flags;
  at->add_option("--ckpt", at_ckpt)->required();
  at->add_option("--data", at_data)->required();
  at->add_option("--masks", at_masks, "masks (required by resnet_mask models)");
  at->add_option("--out", at_out, "output directory")->required();
  at_flags.add(at);

  // certify
  auto* ce = app.add_subcommand("certify", "randomized-smoothing certification");
  std::string ce_ckpt, ce_data, ce_out;
  RsConfig rs;
  ce->add_option("--ckpt", ce_ckpt)->required();
  ce->add_option("--data", ce_data)->required();
  ce->add_option("--sigma", rs.sigma);
  ce->add_option("--n", rs.n_cert, "certification samples");
  ce->add_option("--n-pred", rs.n_pred, "selection samples");
  ce->add_option("--alpha", rs.alpha_conf);
  ce->add_option("--seed", rs.seed);
  ce->add_option("--out", ce_out, "JSON-lines output")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "clean metrics, optionally with an attack and the robustness gap");
  std::string ev_ckpt, ev_data, ev_masks, ev_out;
  bool ev_attack = false;
  int ev_median = 0;
  AttackFlags ev_flags;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--masks", ev_masks);
  ev->add_option("--out", ev_out, "MetricReport JSON")->required();
  ev->add_flag("--attack", ev_attack, "also evaluate under attack");
  ev->add_option("--median", ev_median, "median smoothing window (0 = off)");
  ev_flags.add(ev);

  // sweep
  auto* sw = app.add_subcommand("sweep", "metric vs epsilon for one or more checkpoints");
  std::vector<std::string> sw_ckpts, sw_names;
  std::string sw_data, sw_masks, sw_out, sw_eps = "0,0.05,0.1,0.2,0.4";
  AttackFlags sw_flags;
  sw->add_option("--ckpt", sw_ckpts)->required();
  sw->add_option("--name", sw_names, "method names (default: checkpoint file stem)");
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--masks", sw_masks);
  sw->add_option("--eps-list", sw_eps);
  sw->add_option("--out", sw_out, "CSV output")->required();
  sw_flags.add(sw);

  // gradcam
  auto* gc = app.add_subcommand("gradcam", "Grad-CAM saliency and in-mask mass ratio");
  std::string gc_ckpt, gc_data, gc_masks, gc_out;
  int gc_n = 100;
  gc->add_option("--ckpt", gc_ckpt)->required();
  gc->add_option("--data", gc_data)->required();
  gc->add_option("--masks", gc_masks)->required();
  gc->add_option("--n", gc_n, "records to explain");
  gc->add_option("--out", gc_out, "output directory")->required();

  // verify-invariance
  auto* vi = app.add_subcommand("verify-invariance", "masked linear autoencoder invariance check");
  InvarianceConfig ic;
  std::string vi_out;
  int vi_records = 512;
  bool vi_raw = false;
  vi->add_option("--lambda", ic.lambda);
  vi->add_option("--tol", ic.tol_w, "tolerance on ||W_bar|| and the relative latent shift");
  vi->add_option("--records", vi_records);
  vi->add_option("--seed", ic.seed);
  vi->add_flag("--raw", vi_raw, "train on raw inputs instead of x * M");
  vi->add_option("--out", vi_out, "report JSON (stdout when omitted)");

  // bench
  auto* be = app.add_subcommand("bench", "desk-scale benchmark over methods and seeds");
  std::string be_seeds = "1,2,3", be_config, be_out;
  bool be_ablation = false, be_diag = false, be_quiet = false;
  int be_epochs = -1, be_train = -1, be_test = -1;
  be->add_option("--seeds", be_seeds);
  be->add_option("--config", be_config, "BenchConfig JSON");
  be->add_option("--out", be_out, "output directory")->required();
  be->add_flag("--ablation", be_ablation, "also train cpr_no_const");
  be->add_flag("--diagnostics", be_diag, "Grad-CAM and latent-shift diagnostics");
  be->add_option("--epochs", be_epochs);
  be->add_option("--n-train", be_train);
  be->add_option("--n-test", be_test);
  be->add_flag("--quiet", be_quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      json cj = read_json(gen_config);
      SynthConfig sc = SynthConfig::standard();
      sc.n_leads = cj.value("n_leads", sc.n_leads);
      sc.fs = cj.value("fs", sc.fs);
      sc.duration_s = cj.value("duration_s", sc.duration_s);
      sc.heart_rate_min_bpm = cj.value("heart_rate_min_bpm", sc.heart_rate_min_bpm);
      sc.heart_rate_max_bpm = cj.value("heart_rate_max_bpm", sc.heart_rate_max_bpm);
      sc.co_occurrence = cj.value("co_occurrence", sc.co_occurrence);
      ensure_dir(gen_out);
      const json used = {{"seed", gen_seed}, {"n_train", n_train}, {"n_val", n_val}, {"n_test", n_test},
                         {"fs", sc.fs},      {"duration_s", sc.duration_s}, {"n_leads", sc.n_leads}};
      const std::string hash = sha256_hex(used.dump());
      const std::pair<const char*, std::pair<int, Split>> splits[] = {
          {"train.cprsig", {n_train, Split::train}}, {"val.cprsig", {n_val, Split::val}}, {"test.cprsig", {n_test, Split::test}}};
      std::vector<std::string> files;
      for (const auto& [name, spec] : splits) {
        write_records(join(gen_out, name), generate_dataset(sc, static_cast<std::size_t>(spec.first), gen_seed, spec.second));
        files.push_back(name);
      }
      write_manifest(gen_out, gen_config, {gen_seed}, hash, files);
    } else if (*mask) {
      const auto records = read_records(mask_data);
      std::vector<PhysioMask> out;
      const DetectorConfig dc;
      for (const auto& r : records) {
        PhysioMask m = mask_mode == "annotation" ? mask_from_annotations(r) : mask_from_detection(r, dc);
        require_trainable(m);
        out.push_back(std::move(m));
      }
      write_masks(mask_out, out);
    } else if (*tr) {
      json cj = read_json(tr_config);
      if (!tr_preset.empty()) cj["preset"] = tr_preset;
      if (tr->count("--seed")) cj["seed"] = tr_seed;
      if (tr_epochs >= 0) cj["epochs"] = tr_epochs;
      TrainConfig cfg = TrainConfig::from_json(cj);
      if (tr_eps >= 0) cfg.attack.epsilon = tr_eps;
      validate(cfg);
      const auto train_data = load_batch(tr_data, tr_masks);
      const auto val_data = load_batch(tr_val, tr_val_masks);
      ensure_dir(tr_out);
      std::optional<TrainState> resume;
      if (!tr_resume.empty()) resume = load_checkpoint(tr_resume);
      std::string log;
      TrainState st = train(cfg, train_data, val_data, std::move(resume),
                            [&](const json& j) { log += j.dump() + "\n"; });
      const std::string hash = cfg.hash();
      save_checkpoint(st, join(tr_out, "model.ckpt"));
      write_file_atomic(join(tr_out, "train_log.jsonl"), log);
      write_json(join(tr_out, "config.json"), cfg.to_json(), hash);
      write_manifest(tr_out, tr_config, {cfg.seed}, hash, {"model.ckpt", "train_log.jsonl", "config.json"});
    } else if (*at) {
      const ModelBundle<float> m = load_model(at_ckpt);
      const auto data = load_batch(at_data, at_masks);
      const Predictor<float> p = predictor_for(m, !at_masks.empty() && !data.mask.empty(), 0);
      const AttackConfig cfg = at_flags.config(data.fs);
      const Tensor<float>* mk = p.mask_input ? &data.mask : nullptr;
      const AdvBatch<float> adv = run_attack(p, data.x, data.labels, cfg, mk);
      const Eigen::MatrixXd labels = to_matrix(data.labels);
      MetricReport rep = metric_report(scores_of(p, data), labels);
      add_attacked(rep, to_matrix(predict_scores(p, adv.x_adv, mk)), labels);
      ensure_dir(at_out);
      auto records = read_records(at_data);
      const Index L = data.x.dim(2), C = data.x.dim(1);
      for (std::size_t i = 0; i < records.size(); ++i)
        for (Index c = 0; c < C; ++c)
          for (Index t = 0; t < L; ++t) records[i].signal(c, t) = adv.x_adv[(Index(i) * C + c) * L + t];
      const std::string hash = sha256_hex(cfg.to_json().dump());
      write_records(join(at_out, "adv.cprsig"), records);
      json j = rep.to_json();
      j["attack"] = cfg.to_json();
      std::size_t n_success = 0;
      for (auto s : adv.success) n_success += s;
      j["success_rate"] = double(n_success) / double(adv.success.size());
      write_json(join(at_out, "metrics.json"), j, hash);
      write_manifest(at_out, "", {cfg.seed}, hash, {"adv.cprsig", "metrics.json"});
    } else if (*ce) {
      const ModelBundle<float> m = load_model(ce_ckpt);
      const auto data = load_batch(ce_data, "");
      auto certs = rs_certify(plain(m), data.x, rs);
      for (std::size_t i = 0; i < certs.size(); ++i) certs[i].record_id = data.ids[i];
      write_file_atomic(ce_out, certifications_jsonl(certs));
    } else if (*ev) {
      const ModelBundle<float> m = load_model(ev_ckpt);
      const auto data = load_batch(ev_data, ev_masks);
      const Predictor<float> p = predictor_for(m, !ev_masks.empty(), ev_median);
      const Eigen::MatrixXd labels = to_matrix(data.labels);
      MetricReport rep = metric_report(scores_of(p, data), labels);
      json j;
      std::string hash = sha256_hex(std::string("eval"));
      if (ev_attack) {
        const AttackConfig cfg = ev_flags.config(data.fs);
        const Tensor<float>* mk = p.mask_input ? &data.mask : nullptr;
        const auto adv = run_attack(p, data.x, data.labels, cfg, mk);
        add_attacked(rep, to_matrix(predict_scores(p, adv.x_adv, mk)), labels);
        j = rep.to_json();
        j["attack"] = cfg.to_json();
        j["gap_percent"] = gap_percent(rep.macro_f1, *rep.attacked_f1);
        hash = sha256_hex(cfg.to_json().dump());
      } else {
        j = rep.to_json();
      }
      j["median_window"] = ev_median;
      write_json(ev_out, j, hash);
    } else if (*sw) {
      const auto data = load_batch(sw_data, sw_masks);
      const std::vector<double> eps = parse_list(sw_eps);
      if (eps.empty()) throw Error("E_CONFIG", "empty --eps-list");
      const AttackConfig base = sw_flags.config(data.fs);
      std::string csv = "# config_hash=" + sha256_hex(base.to_json().dump() + sw_eps) + "\nmethod,epsilon,f1,auc\n";
      for (std::size_t k = 0; k < sw_ckpts.size(); ++k) {
        const ModelBundle<float> m = load_model(sw_ckpts[k]);
        const std::string name = k < sw_names.size() ? sw_names[k] : fs::path(sw_ckpts[k]).parent_path().filename().string();
        AttackConfig b = base;
        if (b.step_size <= 0) b.step_size = 1.0;
        const Predictor<float> p = predictor_for(m, !sw_masks.empty(), 0);
        for (double e : eps) {
          AttackConfig c = b;
          c.epsilon = e;
          c.step_size = sw_flags.step_size > 0 ? sw_flags.step_size : (e > 0 ? e / 4 : 1.0);
          const auto r = attack_sweep(p, data, c, std::span<const double>(&e, 1));
          char buf[256];
          std::snprintf(buf, sizeof buf, "%s,%g,%.6f,%.6f\n", name.c_str(), e, r.points[0].macro_f1, r.points[0].macro_auc);
          csv += buf;
        }
      }
      write_file_atomic(sw_out, csv);
    } else if (*gc) {
      const ModelBundle<float> m = load_model(gc_ckpt);
      auto data = load_batch(gc_data, gc_masks);
      data = data.slice(0, std::min<Index>(gc_n, data.size()));
      const Index N = data.size(), K = data.labels.dim(1), L = data.x.dim(2), C = data.x.dim(1);
      Eigen::MatrixXd sal(N, L), mk(N, L);
      for (int k = 0; k < K; ++k) {
        const SaliencyMap s = gradcam_1d(m, data.x, k);
        for (Index i = 0; i < N; ++i)
          if (data.labels[i * K + k] == 1.0f) sal.row(i) = s.weights.row(i);
      }
      for (Index i = 0; i < N; ++i)
        for (Index t = 0; t < L; ++t) mk(i, t) = data.mask[i * C * L + t];
      const double ratio = in_mask_mass_ratio(sal, mk);
      const std::string hash = sha256_hex(gc_ckpt + gc_data);
      std::string csv = "# config_hash=" + hash + "\nrecord_id,sample,saliency,mask\n";
      char buf[128];
      for (Index i = 0; i < N; ++i)
        for (Index t = 0; t < L; ++t) {
          std::snprintf(buf, sizeof buf, ",%lld,%.6f,%d\n", static_cast<long long>(t), sal(i, t), int(mk(i, t)));
          csv += data.ids[i] + buf;
        }
      ensure_dir(gc_out);
      write_file_atomic(join(gc_out, "saliency.csv"), csv);
      write_json(join(gc_out, "summary.json"), {{"in_mask_mass_ratio", ratio}, {"records", N}}, hash);
      write_manifest(gc_out, "", {}, hash, {"saliency.csv", "summary.json"});
    } else if (*vi) {
      ic.tol_latent = ic.tol_w;
      ic.project_to_mask = !vi_raw;
      const auto records = generate_dataset(SynthConfig::standard(), static_cast<std::size_t>(vi_records), ic.seed);
      const auto norm = normalize_records(records);
      const PhysioMask pm = mask_from_annotations(records[0]);
      const Index L = records[0].signal.cols();
      Eigen::MatrixXd X(vi_records, L);
      for (int i = 0; i < vi_records; ++i) X.row(i) = norm[i].signal.row(0).cast<double>();
      const Eigen::VectorXd mvec = pm.mask.row(0).transpose().cast<double>();
      const InvarianceReport rep = verify_structural_invariance(X, mvec, ic);
      json j = rep.to_json();
      j["lambda"] = ic.lambda;
      const std::string text = j.dump(2) + "\n";
      if (vi_out.empty())
        std::cout << text;
      else
        write_json(vi_out, j, sha256_hex(text));
      return rep.passed || ic.lambda == 0 ? 0 : 3;
    } else if (*be) {
      BenchConfig cfg = BenchConfig::from_json(read_json(be_config));
      cfg.seeds.clear();
      for (double s : parse_list(be_seeds)) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
      if (be_ablation) cfg.ablation = true;
      if (be_diag) cfg.diagnostics = true;
      if (be_epochs >= 0) cfg.train.epochs = be_epochs;
      if (be_train > 0) cfg.n_train = be_train;
      if (be_test > 0) cfg.n_test = be_test;
      ensure_dir(be_out);
      const BenchResult r = run_bench(cfg, [&](const std::string& s) {
        if (!be_quiet) std::cerr << s << "\n";
      });
      const std::string hash = cfg.hash();
      write_file_atomic(join(be_out, "bench.csv"), "# config_hash=" + hash + "\n" + bench_csv(r));
      write_json(join(be_out, "bench.json"), r.to_json(), hash);
      write_manifest(be_out, be_config, cfg.seeds, hash, {"bench.csv", "bench.json"});
    }
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
