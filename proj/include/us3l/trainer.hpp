#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "us3l/data.hpp"
#include "us3l/nn.hpp"
#include "us3l/objectives.hpp"
#include "us3l/schedule.hpp"
#include "us3l/tensor.hpp"

// The training loop: SGD with momentum, group-regularized decay folded into
// the loss, an EMA teacher, and gradient accumulation across the sampled
// widths with a single optimizer step per iteration. Evaluation utilities:
// statistics recalibration, linear probing, width sweeps, collapse metrics.

namespace us3l {

enum class TargetMode { momentum, detached_base };

struct OptimizerConfig {
  double base_lr = 0.5;
  double momentum = 0.9;
  int64_t batch_size = 512;
};

struct DataConfig {
  std::string kind = "blobs";  // blobs | cifar10 | cifar100
  // blobs
  int64_t n = 2048;
  int64_t dim = 32;
  int64_t classes = 4;
  double spread = 0.15;
  double holdout_fraction = 0.2;  // probe test split
  // cifar
  std::string path;
  std::string test_path;
  int64_t limit = 0;  // optional cap on training records, 0 = all
};

struct ProbeConfig {
  int64_t iters = 300;
  double lr = 0.5;
  double momentum = 0.9;
  bool standardize = true;
};

struct CollapseConfig {
  double mean_abs_cos_threshold = 0.95;
  double feature_std_threshold = 1e-2;
  int64_t patience = 50;  // consecutive iterations before declaring collapse
};

struct TrainConfig {
  int version = 1;
  uint64_t seed = 42;
  std::string output_dir = "runs/default";
  EncoderSpec encoder;
  LossSpec loss;
  SamplingSchedule schedule;
  GroupRegConfig groupreg;
  OptimizerConfig optimizer;
  DataConfig data;
  AugmentationPolicy augment;
  ProbeConfig probe;
  CollapseConfig collapse;
  TargetMode target_mode = TargetMode::momentum;
  double ema_momentum = 0.99;
  // Distillation targets come from the teacher at full width; sub-width
  // teacher execution is available behind this flag.
  bool teacher_full_width = true;
  // The teacher update runs after the optimizer step; flip to update before.
  bool ema_update_after_step = true;
  // When > 0, schedule.total_iters is derived as epochs * batches_per_epoch
  // at load time and stored back into the schedule.
  int64_t epochs = 0;

  void validate() const;
};

struct MetricRow {
  int64_t iter = 0;
  double lr = 0.0;
  std::vector<double> widths;
  int64_t view_forwards = 0;  // student view executions this iteration
  double loss_base = 0.0;
  double loss_distill = 0.0;
  double loss_greg = 0.0;
  double feature_std = 0.0;
  double mean_abs_cos = 0.0;
};

enum class RunStatus { completed, aborted_nan };

struct RunArtifacts {
  RunStatus status = RunStatus::completed;
  std::string abort_reason;
  std::vector<MetricRow> metrics;
  CostLedger ledger;
  bool collapse_detected = false;
  int64_t collapse_iter = -1;
  int64_t iterations_run = 0;
  int64_t optimizer_steps = 0;
  int64_t total_view_forwards = 0;
};

struct CollapseMetrics {
  double feature_std = 0.0;
  double mean_abs_cos = 0.0;
};

// Mean per-dimension standard deviation and mean |cosine| over distinct
// pairs. Rows with near-zero norm are themselves a collapse signal: if fewer
// than two rows have usable norms the cosine statistic reports 1.
CollapseMetrics collapse_metrics(const Tensor& embeddings);

// v <- momentum*v + g; w <- w - lr*v. Decay gradients arrive through the
// loss, so the step itself is plain momentum SGD.
void sgd_step(Tensor& param, std::span<const double> grad, double lr,
              double momentum, std::vector<double>& velocity);

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double momentum);
  void zero_grad();
  void step(double lr);
  int64_t steps() const { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  int64_t steps_ = 0;
};

struct TrainResult {
  RunArtifacts artifacts;
  SlimmableEncoder encoder;
  std::optional<MomentumEncoder> teacher;
  DataSet dataset;
};

RunArtifacts train_loop(const TrainConfig& config, SlimmableEncoder& encoder,
                        std::optional<MomentumEncoder>& teacher,
                        const DataSet& dataset);

// Builds the dataset and encoder from the config and runs the full loop.
TrainResult train(const TrainConfig& config);

// Multinomial logistic regression on frozen features, full-batch gradient
// descent to convergence at desk scale. Returns top-1 accuracy on the test
// split.
double linear_probe(const Tensor& train_features,
                    const std::vector<int64_t>& train_labels,
                    const Tensor& test_features,
                    const std::vector<int64_t>& test_labels, int64_t classes,
                    const ProbeConfig& probe);

struct SweepRow {
  double width = 0.0;
  int64_t params_active = 0;
  double accuracy = 0.0;
};

// Recalibrates and probes the encoder at each requested width. With no
// separate test set, a deterministic holdout split of `dataset` is used.
std::vector<SweepRow> width_sweep(SlimmableEncoder& encoder,
                                  const std::vector<double>& widths,
                                  const DataSet& dataset,
                                  const TrainConfig& config,
                                  const DataSet* test_data = nullptr);

// Deterministic train/test split of a dataset for probing.
struct ProbeSplit {
  std::vector<int64_t> train_index;
  std::vector<int64_t> test_index;
};
ProbeSplit probe_split(const DataSet& dataset, double holdout_fraction);

// Training pool per the config's data section.
DataSet build_dataset(const TrainConfig& config);
// Separate test pool when the config names one (cifar test file).
std::optional<DataSet> build_test_dataset(const TrainConfig& config);

}  // namespace us3l
