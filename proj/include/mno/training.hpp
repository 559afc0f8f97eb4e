#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mno/geometry.hpp"
#include "mno/manifest.hpp"
#include "mno/model.hpp"
#include "mno/optim.hpp"

namespace mno {

/// ||pred - truth||_2 / ||truth||_2 over every entry. Throws NumericError when
/// truth has zero norm and std::invalid_argument on a size mismatch.
double rl2(std::span<const double> pred, std::span<const double> truth);
/// Mean absolute deviation over all entries of an [N x C] field.
double mae(std::span<const double> pred, std::span<const double> truth);

/// A named group of output channels scored as one field, e.g.
/// "velocity:0-2". `steps` > 1 splits the channels into equal consecutive
/// groups reported individually (name@1, name@2, ...) alongside the total.
/// `zero_feature`, when set, restricts scoring to points whose raw feature
/// in that column is exactly 0 (surface points for sphere-flow data).
struct FieldGroup {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 1;  // exclusive
  std::size_t steps = 1;
  std::optional<std::size_t> zero_feature;

  std::size_t width() const { return end - begin; }
};

/// Parses "velocity:0-2,pressure:3@0,x:0-11/4". Ranges are inclusive;
/// "/n" declares n time steps; "@c" restricts to points with feature c == 0.
std::vector<FieldGroup> parse_grouping(const std::string& spec);
std::string grouping_str(const std::vector<FieldGroup>& groups);
/// One group "all" covering every channel.
std::vector<FieldGroup> default_grouping(std::size_t out_dim);
void validate_grouping(const std::vector<FieldGroup>& groups, std::size_t out_dim,
                       std::size_t in_features);

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 4;
  double max_lr = 1e-3;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat32;
  std::string loss = "rl2";
  std::vector<FieldGroup> grouping;  // empty: one group over all channels
  AdamWConfig adamw;
  OneCycleConfig schedule;
  double val_fraction = 0.1;  // used only when no validation set is given

  void validate() const;
  void to_manifest(Manifest& m) const;
  static TrainConfig from_manifest(const Manifest& m);
};

struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_rl2;
};

struct MetricRow {
  std::string field;
  double rl2 = 0;
  double mae = 0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::size_t samples = 0;
  double wall_seconds = 0;
  std::string fingerprint;

  const MetricRow& row(const std::string& field) const;
  /// Mean of the top-level field RL2 values (rows without '@').
  double mean_rl2() const;
  std::string to_csv() const;
};

/// A sample ready for the model: normalized inputs, its k-NN graph on the
/// normalized positions, and the raw targets that losses are measured against.
struct PreparedSample {
  PointSample normalized;
  NeighborGraph graph;
  PointSample raw;
  /// Per field group: point indices kept by the group's filter (empty = all).
  std::vector<std::vector<int>> group_points;
};

PreparedSample prepare_sample(const PointSample& raw, const NormStats& stats, std::size_t k,
                              const std::vector<FieldGroup>& groups);

/// Differentiable per-sample loss: equal-weight mean over field groups of the
/// RL2 of the denormalized prediction against raw targets.
template <typename T>
Var<T> sample_loss(const MnoModel<T>& model, ParamBinding<T>& params, const PreparedSample& s,
                   const NormStats& stats, const std::vector<FieldGroup>& groups);

/// Prediction in physical units for one prepared sample.
template <typename T>
Tensor<T> predict_physical(const MnoModel<T>& model, const PreparedSample& s,
                           const NormStats& stats);

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stateful trainer. The optimizer and schedule advance one step per
/// mini-batch; shuffling uses the config seed, so runs are reproducible.
template <typename T>
class Trainer {
 public:
  Trainer(MnoModel<T> model, std::vector<PointSample> train, std::vector<PointSample> val,
          TrainConfig cfg);

  /// Runs one mini-batch step and returns its loss.
  double step(const std::vector<std::size_t>& batch);
  /// One shuffled pass over the training set; appends to history().
  const HistoryRow& run_epoch();
  /// Mean per-sample loss over a prepared set without updating parameters.
  double mean_loss(const std::vector<PreparedSample>& set) const;

  std::size_t total_steps() const { return total_steps_; }
  std::size_t steps_done() const { return steps_done_; }
  std::size_t epochs_done() const { return history_.size(); }
  const std::vector<HistoryRow>& history() const { return history_; }
  const MnoModel<T>& model() const { return model_; }
  MnoModel<T>& model() { return model_; }
  const NormStats& stats() const { return stats_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<PreparedSample>& train_set() const { return train_; }
  const std::vector<PreparedSample>& val_set() const { return val_; }

  /// Config, precision and normalization for checkpointing.
  Checkpoint checkpoint() const;

 private:
  MnoModel<T> model_;
  TrainConfig cfg_;
  NormStats stats_;
  std::vector<PreparedSample> train_;
  std::vector<PreparedSample> val_;
  OptimizerState<T> opt_;
  Rng shuffle_rng_;
  std::size_t total_steps_ = 0;
  std::size_t steps_done_ = 0;
  double last_lr_ = 0;
  std::vector<HistoryRow> history_;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  double best_score = 0;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Splits `dataset` into train/validation (last val_fraction, at least one
/// sample when the dataset has more than one), trains for cfg.epochs and
/// tracks the best checkpoint by validation RL2 (train loss without
/// validation). When `out_dir` is given, writes history.csv,
/// final.ckpt, best.ckpt and run_manifest.txt there.
TrainResult train(const MnoConfig& model_cfg, const std::vector<PointSample>& dataset,
                  const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir = {},
                  const EpochCallback& on_epoch = {});

std::string history_csv(const std::vector<HistoryRow>& history);

/// Per-field RL2/MAE averaged over samples. Groups with steps also get one
/// row per step; the group row is the RL2 over all of its channels.
MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<PointSample>& dataset,
                       const std::vector<FieldGroup>& groups);

/// Evaluation directly from predictions in physical units, one per sample.
MetricsReport evaluate_predictions(const std::vector<std::vector<double>>& predictions,
                                   const std::vector<PointSample>& dataset,
                                   const std::vector<FieldGroup>& groups);

struct AblationRow {
  ModuleMask mask;
  std::uint64_t seed = 0;
  MetricsReport report;
};

/// Trains and evaluates one model per mask and per seed on the same split.
/// `test` is the evaluation set; when empty, the last val_fraction of
/// `train_data` is held out.
std::vector<AblationRow> ablate(const MnoConfig& base, const TrainConfig& cfg,
                                const std::vector<PointSample>& train_data,
                                const std::vector<PointSample>& test,
                                const std::vector<ModuleMask>& masks,
                                const std::vector<std::uint64_t>& seeds,
                                const std::function<void(const AblationRow&)>& on_row = {});

/// "mask,seed,field,rl2,mae" rows.
std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Median over seeds of one field's RL2 for one mask.
double ablation_median_rl2(const std::vector<AblationRow>& rows, const ModuleMask& mask,
                           const std::string& field);
/// One row per mask (in first-seen order): mask, then <field>_rl2 and
/// <field>_mae medians over seeds for every top-level field, then mean_rl2.
std::string ablation_table_csv(const std::vector<AblationRow>& rows);

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked_params = 0;
  std::size_t checked_scalars = 0;
  std::vector<std::string> params;
};

/// Central finite differences of the RL2 loss w.r.t. every trainable
/// parameter of the enabled modules (plus encoder, norms, feed-forward and
/// decoder), compared with reverse-mode gradients, all in float64.
/// Relative error per entry is |a - f| / max(|a|, |f|, floor).
GradCheckReport gradient_check(const MnoModel<double>& model, const PointSample& sample,
                               double h, const std::vector<FieldGroup>& groups = {},
                               double floor = 1e-6);

}  // namespace mno
