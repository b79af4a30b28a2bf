#pragma once

#include "cpr/autodiff.hpp"
#include "cpr/util.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cpr {

enum class Variant { tiny, resnet18_1d };
enum class ModelKind { dual, baseline };
enum class Mode { eval, train };
enum class ParamGroup : std::uint8_t { content = 0, style = 1, decoder = 2, classifier = 3 };

std::string to_string(Variant v);
std::string to_string(ModelKind k);
std::string to_string(ParamGroup g);

struct ArchitectureSpec {
  Variant variant = Variant::tiny;
  int in_leads = 1;
  int n_samples = 384;
  int d_content = 32;
  int d_style = 16;
  int n_classes = 5;
  std::vector<int> widths{16, 32, 64};
  int kernel_size = 7;
  std::vector<int> n_blocks{1, 1, 1};

  static ArchitectureSpec tiny(int in_leads, int n_samples, int n_classes);
  static ArchitectureSpec resnet18_1d(int in_leads, int n_samples, int n_classes);

  int n_stages() const { return static_cast<int>(widths.size()); }
  int downsample() const { return 1 << n_stages(); }
  int latent_length() const { return n_samples / downsample(); }

  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
  std::string hash() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

void validate(const ArchitectureSpec& arch);

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<Scalar> value;
  bool trainable = true;  // false for normalisation running statistics
};

template <typename Scalar>
struct LatentPair {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z_c;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z_s;
};

/// E_c, E_s, G and the classifier head (dual), or E_c and the head alone (ERM baseline).
template <typename Scalar>
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(ArchitectureSpec arch, ModelKind kind, std::uint64_t seed);

  const ArchitectureSpec& arch() const { return arch_; }
  ModelKind kind() const { return kind_; }
  bool is_dual() const { return kind_ == ModelKind::dual; }

  std::vector<Parameter<Scalar>>& parameters() { return params_; }
  const std::vector<Parameter<Scalar>>& parameters() const { return params_; }
  int index_of(const std::string& name) const;
  bool contains(const std::string& name) const;
  const Tensor<Scalar>& value(int index) const { return params_[index].value; }
  Index parameter_count(std::optional<ParamGroup> group = std::nullopt) const;
  bool all_finite() const;

  // Exponential moving update of running statistics, keyed by running-mean index.
  void apply_batch_stats(const std::vector<std::pair<int, BatchStats>>& stats, double momentum = 0.1);

  template <typename Other>
  ModelBundle<Other> cast() const;

  // Records fed through encode_content (one per record per call).
  std::int64_t forward_count() const { return counter_.n.load(); }
  void reset_forward_count() const { counter_.n.store(0); }
  void count_forward(Index n) const { counter_.n.fetch_add(n); }

  // Used by cast() and checkpoint loading.
  static ModelBundle from_parts(ArchitectureSpec arch, ModelKind kind,
                                std::vector<Parameter<Scalar>> params);

 private:
  void add(const std::string& name, ParamGroup group, Shape shape, Scalar bound, bool trainable = true,
           Scalar fill = Scalar(0));
  void build(std::uint64_t seed);
  void reindex();

  struct Counter {
    Counter() = default;
    Counter(const Counter& o) : n(o.n.load()) {}
    Counter& operator=(const Counter& o) {
      n.store(o.n.load());
      return *this;
    }
    mutable std::atomic<std::int64_t> n{0};
  };

  ArchitectureSpec arch_;
  ModelKind kind_ = ModelKind::dual;
  std::vector<Parameter<Scalar>> params_;
  std::unordered_map<std::string, int> index_;
  Counter counter_;
};

/// Binds a model's parameters into one graph for one forward/backward pass.
template <typename Scalar>
class Session {
 public:
  Session(Graph<Scalar>& g, const ModelBundle<Scalar>& m, Mode mode, bool params_require_grad = true);

  Graph<Scalar>& graph() { return *graph_; }
  const ModelBundle<Scalar>& model() const { return *model_; }
  Mode mode() const { return mode_; }

  Var param(int index);
  Var param(const std::string& name) { return param(model_->index_of(name)); }

  // When false, train-mode batch norm does not report statistics (auxiliary passes).
  bool collect_stats = true;
  void record_stats(int running_mean_index, BatchStats stats);
  const std::vector<std::pair<int, BatchStats>>& batch_stats() const { return stats_; }

  // Aligned with model().parameters(); zeros for parameters that received no gradient.
  std::vector<Tensor<Scalar>> gradients() const;
  Var bound(int index) const { return vars_[index]; }

 private:
  Graph<Scalar>* graph_;
  const ModelBundle<Scalar>* model_;
  Mode mode_;
  bool requires_grad_;
  std::vector<Var> vars_;
  std::vector<std::pair<int, BatchStats>> stats_;
};

// Network pieces. x is [B, in_leads, n_samples]; latents are [B, d].
template <typename S> Var content_features(Session<S>& s, Var x);
template <typename S> Var content_head(Session<S>& s, Var features);
template <typename S> Var encode_content(Session<S>& s, Var x);
template <typename S> Var encode_style(Session<S>& s, Var x);
template <typename S> Var decode(Session<S>& s, Var z_c, Var z_s);
template <typename S> Var classify(Session<S>& s, Var z_c);
// Full classifier path x -> logits (the ERM baseline's forward; also valid for dual models).
template <typename S> Var forward_baseline(Session<S>& s, Var x);

// Eval-mode conveniences outside a graph.
template <typename S> Tensor<S> predict_logits(const ModelBundle<S>& m, const Tensor<S>& x);
template <typename S> std::vector<LatentPair<S>> encode(const ModelBundle<S>& m, const Tensor<S>& x);

/// Throws Error("E_SHAPE") naming the expected and actual input shapes.
template <typename S> void check_input_shape(const ModelBundle<S>& m, const Tensor<S>& x);

template <typename S>
using LossFn = std::function<Var(Session<S>&, Var x)>;

template <typename S>
struct GradientResult {
  S loss = 0;
  std::vector<Tensor<S>> params;  // aligned with model parameters
  Tensor<S> input;
};

/// Exact reverse-mode gradients of loss_fn at (model, x). Throws Error("E_NONFINITE").
template <typename S>
GradientResult<S> gradient(const ModelBundle<S>& m, const LossFn<S>& loss_fn, const Tensor<S>& x,
                           Mode mode = Mode::train);
template <typename S>
Tensor<S> input_gradient(const ModelBundle<S>& m, const LossFn<S>& loss_fn, const Tensor<S>& x,
                         Mode mode = Mode::eval);

struct GradCheckOptions {
  int n_coordinates = 200;
  double h = 1e-4;
  double tolerance = 1e-5;
  // Denominator floor of the relative error; keeps exact zeros from dividing by zero.
  double abs_floor = 1e-8;
  bool include_input = false;
  std::uint64_t seed = 0;
  Mode mode = Mode::train;
};

struct GradCheckEntry {
  std::string name;  // parameter name or "input"
  Index coordinate = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  int n_checked = 0;
  int n_skipped_kinks = 0;
  bool passed = false;
  std::vector<GradCheckEntry> entries;
};

/// Central finite differences at sampled coordinates vs the supplied analytic gradient.
/// Probes whose +-h evaluations cross a ReLU/median switch are resampled.
template <typename S>
GradCheckReport compare_gradients(const ModelBundle<S>& m, const LossFn<S>& loss_fn,
                                  const Tensor<S>& x, const GradientResult<S>& analytic,
                                  const GradCheckOptions& opts);
template <typename S>
GradCheckReport check_gradients(const ModelBundle<S>& m, const LossFn<S>& loss_fn,
                                const Tensor<S>& x, const GradCheckOptions& opts);

// Checkpoint container "CPRCKP01": magic, u64 header length, JSON header, f32 arrays.
struct CheckpointData {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor<float>>> arrays;
};
std::vector<std::uint8_t> encode_checkpoint(CheckpointData data);
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Header fields and arrays for a model (parameters then running statistics, creation order).
CheckpointData model_checkpoint(const ModelBundle<float>& m);
/// Inverse of model_checkpoint; rejects arch-hash mismatch when expected is given.
ModelBundle<float> model_from_checkpoint(const CheckpointData& data,
                                         const ArchitectureSpec* expected = nullptr);

}  // namespace cpr
