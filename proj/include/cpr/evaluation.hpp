#pragma once

#include "cpr/batch.hpp"
#include "cpr/netcore.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cpr {

// ---- metrics --------------------------------------------------------------------------------
// scores and labels are [records x classes]; labels are 0/1.

double binary_f1(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
/// Mann-Whitney statistic with tied scores sharing their average rank.
double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> truth);

std::vector<double> per_class_f1(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels,
                                 double threshold = 0.5);
/// F1 per class of hard 0/1 decisions.
std::vector<double> per_class_f1_decisions(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& labels);
/// NaN for classes lacking a positive or a negative.
std::vector<double> per_class_auc(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels);

double macro_f1(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels, double threshold = 0.5);
double macro_f1_decisions(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& labels);
/// Mean over classes with both outcomes present; skipped classes are listed when requested.
double macro_auc(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels,
                 std::vector<int>* skipped = nullptr);

/// (clean - attacked) / clean
double robustness_gap(double clean, double attacked);
/// The table convention: -100 * (clean - attacked) / clean rounded to one decimal.
double gap_percent(double clean, double attacked);

struct MetricReport {
  double macro_f1 = 0;
  double macro_auc = 0;
  std::vector<double> per_class_f1;
  std::vector<double> per_class_auc;
  std::vector<int> auc_skipped;
  std::optional<double> attacked_f1;
  std::optional<double> attacked_auc;
  std::optional<double> robustness_gap;

  nlohmann::json to_json() const;
};

MetricReport metric_report(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels,
                           double threshold = 0.5);
/// Adds the attacked columns and the relative F1 gap.
void add_attacked(MetricReport& r, const Eigen::MatrixXd& attacked_scores, const Eigen::MatrixXd& labels,
                  double threshold = 0.5);

template <typename S>
Eigen::MatrixXd to_matrix(const Tensor<S>& t);

// ---- saliency -------------------------------------------------------------------------------

struct SaliencyMap {
  int class_id = 0;
  Eigen::MatrixXd weights;  // [records x n_samples], each row in [0, 1]
};

/// Grad-CAM over the content encoder's last convolutional feature map.
template <typename S>
SaliencyMap gradcam_1d(const ModelBundle<S>& m, const Tensor<S>& x, int class_id);

/// Linear (half-sample aligned) resampling of a row to n points.
Eigen::VectorXd upsample_linear(const Eigen::VectorXd& v, Eigen::Index n);

/// Per-record sum(saliency * M) / sum(saliency), averaged over records with non-zero saliency.
/// The mask has one row per record (lead 0 support).
double in_mask_mass_ratio(const Eigen::MatrixXd& saliency, const Eigen::MatrixXd& mask);

// ---- latent diagnostics ---------------------------------------------------------------------

struct LatentShift {
  double content = 0;  // ||z_c(x_adv) - z_c(x)||
  double style = 0;    // ||z_s(x_adv) - z_s(x)||
};

/// Per-record latent shifts; rejects non-dual models.
template <typename S>
std::vector<LatentShift> latent_shift(const ModelBundle<S>& m, const Tensor<S>& x, const Tensor<S>& x_adv);

/// Median of content/style shift ratios over records with a non-zero style shift.
double median_shift_ratio(const std::vector<LatentShift>& shifts);

/// CSV rows: record_id, adversarial flag, labels, z_c, z_s. x_adv rows are appended when given.
/// The first line is a "# config_hash=<hash>" comment.
std::string embeddings_csv(const ModelBundle<float>& m, const LabeledBatch<float>& data,
                           const Tensor<float>* x_adv, const std::string& config_hash);
void export_embeddings(const ModelBundle<float>& m, const LabeledBatch<float>& data,
                       const Tensor<float>* x_adv, const std::string& path, const std::string& config_hash);

// ---- structural invariance of the masked linear autoencoder ---------------------------------

struct InvarianceConfig {
  double lambda = 1e-4;
  double tol_w = 1e-6;
  double tol_latent = 1e-6;  // relative to ||delta||
  int latent_dim = 8;
  // Train on x * M (the regime where the off-mask gradient vanishes); false uses raw inputs.
  bool project_to_mask = true;
  double grad_tol = 1e-12;
  int max_iterations = 20000;
  int n_probes = 16;  // random off-mask perturbations
  std::uint64_t seed = 0;
};

struct InvarianceReport {
  double background_weight_norm = 0;  // ||W_bar||_F after training
  double initial_background_norm = 0;
  double latent_shift = 0;           // max ||E(x + delta) - E(x)|| over probes
  double latent_shift_relative = 0;  // max of the same divided by ||delta||
  double grad_norm = 0;
  int iterations = 0;
  bool converged = false;
  std::optional<double> closed_form_max_diff;  // lambda > 0 only
  bool passed = false;

  nlohmann::json to_json() const;
};

/// Linear encoder z = W x + b with a fixed random linear decoder, trained on
/// (1/N) sum ||(x - D z) * M||^2 + lambda (||W||^2 + ||b||^2) by conjugate gradients.
/// data is [records x samples]; mask is one 0/1 value per sample.
InvarianceReport verify_structural_invariance(const Eigen::MatrixXd& data, const Eigen::VectorXd& mask,
                                              const InvarianceConfig& cfg);

/// Closed-form minimiser [W b] of the same objective via the eigenbases of the two Gram matrices.
Eigen::MatrixXd invariance_closed_form(const Eigen::MatrixXd& data, const Eigen::VectorXd& mask,
                                       const Eigen::MatrixXd& decoder, double lambda);

}  // namespace cpr
