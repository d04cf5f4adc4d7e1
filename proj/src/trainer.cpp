#include "us3l/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace us3l {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

constexpr uint64_t kStreamOrder = 0xDA7A0001;
constexpr uint64_t kStreamAugment = 0xDA7A0002;
constexpr uint64_t kStreamWidths = 0xDA7A0003;
constexpr uint64_t kStreamEncoder = 0xDA7A0004;

constexpr int64_t kCollapseMetricRows = 128;   // cap on pairwise statistic
constexpr int64_t kCalibrationBatches = 8;

}  // namespace

void TrainConfig::validate() const {
  encoder.validate();
  loss.validate();
  schedule.validate();
  groupreg.validate();
  check(optimizer.batch_size >= 1, "config: batch_size must be >= 1");
  if (loss.base_loss == BaseLoss::nce)
    check(optimizer.batch_size >= 2,
          "config: nce base loss needs batch_size >= 2 so negatives exist");
  check(optimizer.base_lr > 0.0, "config: base_lr must be positive");
  check(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0,
        "config: sgd momentum must be in [0, 1)");
  check(ema_momentum >= 0.0 && ema_momentum <= 1.0,
        "config: ema_momentum must be in [0, 1]");
  check(epochs >= 0, "config: epochs must be >= 0");
  const bool wants_momentum =
      loss.momentum_target_base || loss.momentum_target_sub;
  check((target_mode == TargetMode::momentum) == wants_momentum,
        "config: target_mode must agree with the momentum-target flags");
  check(encoder.head_mode == loss.head_mode,
        "config: encoder and loss head modes must agree");
  check(probe.iters >= 1, "config: probe iters must be >= 1");
  check(collapse.patience >= 1, "config: collapse patience must be >= 1");
  check(data.kind == "blobs" || data.kind == "cifar10" ||
            data.kind == "cifar100",
        "config: data.kind must be blobs|cifar10|cifar100");
  if (data.kind == "blobs")
    check(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0,
          "config: holdout_fraction must be in (0, 1)");
}

// ---------------------------------------------------------------------------
// Collapse metrics

CollapseMetrics collapse_metrics(const Tensor& embeddings) {
  check(embeddings.rank() == 2, "collapse_metrics: rank-2 tensor required");
  const int64_t n = embeddings.dim(0), d = embeddings.dim(1);
  check(n >= 2, "collapse_metrics: need at least 2 embeddings");

  CollapseMetrics m;
  auto data = embeddings.data();

  double std_sum = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i)
      mean += data[static_cast<std::size_t>(i * d + j)];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double c = data[static_cast<std::size_t>(i * d + j)] - mean;
      var += c * c;
    }
    std_sum += std::sqrt(var / static_cast<double>(n));
  }
  m.feature_std = std_sum / static_cast<double>(d);

  // Unit rows where possible; rows that lost their norm are themselves a
  // collapse signal, so too few usable rows reports full alignment.
  std::vector<std::vector<double>> unit;
  for (int64_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = data[static_cast<std::size_t>(i * d + j)];
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    std::vector<double> row(static_cast<std::size_t>(d));
    for (int64_t j = 0; j < d; ++j)
      row[static_cast<std::size_t>(j)] =
          data[static_cast<std::size_t>(i * d + j)] / norm;
    unit.push_back(std::move(row));
  }
  if (unit.size() < 2) {
    m.mean_abs_cos = 1.0;
    return m;
  }
  double acc = 0.0;
  int64_t pairs = 0;
  for (std::size_t i = 0; i < unit.size(); ++i)
    for (std::size_t j = i + 1; j < unit.size(); ++j) {
      double dot = 0.0;
      for (int64_t k = 0; k < d; ++k)
        dot += unit[i][static_cast<std::size_t>(k)] *
               unit[j][static_cast<std::size_t>(k)];
      acc += std::abs(dot);
      ++pairs;
    }
  m.mean_abs_cos = acc / static_cast<double>(pairs);
  return m;
}

// ---------------------------------------------------------------------------
// Optimizer

void sgd_step(Tensor& param, std::span<const double> grad, double lr,
              double momentum, std::vector<double>& velocity) {
  check(static_cast<int64_t>(grad.size()) == param.numel(),
        "sgd_step: gradient size mismatch");
  if (velocity.empty()) velocity.assign(grad.size(), 0.0);
  check(velocity.size() == grad.size(), "sgd_step: velocity size mismatch");
  auto w = param.mutable_data();
  for (std::size_t i = 0; i < grad.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    w[i] -= lr * velocity[i];
  }
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  velocity_.resize(params_.size());
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void SgdOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    sgd_step(params_[i], params_[i].grad(), lr, momentum_, velocity_[i]);
  }
  ++steps_;
}

// ---------------------------------------------------------------------------
// Dataset plumbing

namespace {

DataSet load_cifar_dataset(const std::string& path, const std::string& kind,
                           int64_t limit) {
  const CifarVariant variant =
      kind == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
  auto records = parse_cifar(path, variant);
  if (limit > 0 && static_cast<int64_t>(records.size()) > limit)
    records.resize(static_cast<std::size_t>(limit));
  return dataset_from_cifar(records, variant);
}

}  // namespace

DataSet build_dataset(const TrainConfig& config) {
  if (config.data.kind == "blobs")
    return synthetic_blobs(config.data.n, config.data.dim, config.data.classes,
                           config.data.spread, config.seed ^ 0xB10B5);
  check(!config.data.path.empty(), "config: cifar data needs data.path");
  return load_cifar_dataset(config.data.path, config.data.kind,
                            config.data.limit);
}

std::optional<DataSet> build_test_dataset(const TrainConfig& config) {
  if (config.data.kind == "blobs" || config.data.test_path.empty())
    return std::nullopt;
  return load_cifar_dataset(config.data.test_path, config.data.kind, 0);
}

// ---------------------------------------------------------------------------
// Training loop

RunArtifacts train_loop(const TrainConfig& config, SlimmableEncoder& encoder,
                        std::optional<MomentumEncoder>& teacher,
                        const DataSet& dataset) {
  config.validate();
  assert_min_samples(config.schedule);
  check(dataset.feature_dim == config.encoder.input_dim,
        "train: dataset feature dim " + std::to_string(dataset.feature_dim) +
            " does not match encoder input dim " +
            std::to_string(config.encoder.input_dim));
  const int64_t n = dataset.size();
  const int64_t batch = std::min<int64_t>(config.optimizer.batch_size, n);
  check(batch >= 2 || config.loss.base_loss == BaseLoss::mse,
        "train: dataset too small for contrastive batches");

  const bool wants_teacher =
      config.loss.momentum_target_base || config.loss.momentum_target_sub;
  check(!wants_teacher || teacher.has_value(),
        "train: momentum targets enabled but no teacher provided");

  Rng root(config.seed);
  Rng order_rng = root.split(kStreamOrder);
  Rng aug_rng = root.split(kStreamAugment);
  Rng width_rng = root.split(kStreamWidths);

  SgdOptimizer optimizer(encoder.parameters(), config.optimizer.momentum);

  // Decay coefficients per width-structured layer: grouped over the sliced
  // output channels, flat lambda elsewhere.
  auto reg_layers = encoder.regularized_layers();
  std::vector<std::vector<double>> decay_coeffs;
  for (const auto& layer : reg_layers) {
    const int64_t rows = layer.weight.dim(0);
    if (layer.sliced_output && rows >= config.groupreg.groups)
      decay_coeffs.push_back(group_coefficients(rows, config.groupreg));
    else
      decay_coeffs.push_back(std::vector<double>(
          static_cast<std::size_t>(rows), config.groupreg.lambda));
  }

  std::vector<int64_t> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  int64_t cursor = n;  // forces a shuffle on first use

  const int64_t total_iters = config.schedule.total_iters;
  RunArtifacts art;
  int64_t consecutive_collapse = 0;

  for (int64_t t = 1; t <= total_iters; ++t) {
    const double lr =
        cosine_lr(t - 1, total_iters, config.optimizer.base_lr);
    auto widths = config.schedule.mode == SamplingMode::dynamic
                      ? dynamic_sample(config.schedule, t, width_rng)
                      : sandwich_sample(config.schedule, width_rng);
    art.ledger.record(t, widths);

    // Assemble the two-view batch.
    std::vector<std::vector<double>> v1, v2;
    v1.reserve(static_cast<std::size_t>(batch));
    v2.reserve(static_cast<std::size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
      if (cursor >= n) {
        for (int64_t i = n - 1; i > 0; --i) {
          const int64_t j = static_cast<int64_t>(
              order_rng.uniform_int(static_cast<uint64_t>(i + 1)));
          std::swap(pool[static_cast<std::size_t>(i)],
                    pool[static_cast<std::size_t>(j)]);
        }
        cursor = 0;
      }
      const int64_t idx = pool[static_cast<std::size_t>(cursor++)];
      auto pair = two_view_augment(dataset, idx, config.augment, aug_rng);
      v1.push_back(std::move(pair.view1));
      v2.push_back(std::move(pair.view2));
    }
    auto x1 = stack_batch(v1);
    auto x2 = stack_batch(v2);

    optimizer.zero_grad();

    MetricRow row;
    row.iter = t;
    row.lr = lr;
    row.widths = widths;

    Tape tape;
    double total_value = 0.0;
    bool aborted = false;
    try {
      TapeScope scope(tape);
      auto out1 = encoder.forward(x1, WidthMultiplier(config.schedule.r_max));
      auto out2 = encoder.forward(x2, WidthMultiplier(config.schedule.r_max));
      row.view_forwards = 2;

      BaseOutputs base_outputs{out1.z, out2.z, out1.p, out2.p};

      TeacherOutputs teacher_outputs;
      const bool teacher_needed =
          wants_teacher && (config.loss.momentum_target_base ||
                            (config.loss.momentum_target_sub && widths.size() > 1));
      if (teacher_needed && config.teacher_full_width) {
        auto tz1 = teacher->forward(x1, WidthMultiplier(1.0));
        auto tz2 = teacher->forward(x2, WidthMultiplier(1.0));
        teacher_outputs = TeacherOutputs{tz1.z, tz2.z};
        art.ledger.teacher_forwards += 1;
      }

      std::vector<SubOutputs> subs;
      for (std::size_t wi = 1; wi < widths.size(); ++wi) {
        const WidthMultiplier w(widths[wi]);
        auto s1 = encoder.forward(x1, w);
        auto s2 = encoder.forward(x2, w);
        row.view_forwards += 2;
        SubOutputs sub;
        sub.width = widths[wi];
        sub.d1 = config.loss.head_mode == HeadMode::none ? s1.z : s1.z_distill;
        sub.d2 = config.loss.head_mode == HeadMode::none ? s2.z : s2.z_distill;
        if (teacher_needed && !config.teacher_full_width) {
          auto tz1 = teacher->forward(x1, w);
          auto tz2 = teacher->forward(x2, w);
          sub.target1 = tz1.z;
          sub.target2 = tz2.z;
          art.ledger.teacher_forwards += 1;
        }
        subs.push_back(std::move(sub));
      }
      if (teacher_needed && !config.teacher_full_width &&
          config.loss.momentum_target_base) {
        auto tz1 = teacher->forward(x1, WidthMultiplier(1.0));
        auto tz2 = teacher->forward(x2, WidthMultiplier(1.0));
        teacher_outputs = TeacherOutputs{tz1.z, tz2.z};
        art.ledger.teacher_forwards += 1;
      }

      auto parts = us3l_total_parts(base_outputs, subs, teacher_outputs,
                                    config.loss);

      Tensor greg;
      for (std::size_t li = 0; li < reg_layers.size(); ++li) {
        auto term = group_reg_penalty(reg_layers[li].weight,
                                      reg_layers[li].bias, decay_coeffs[li]);
        greg = greg.defined() ? add(greg, term) : term;
      }
      auto total = add(parts.total, greg);

      row.loss_base = parts.base.item();
      row.loss_distill = parts.distill.defined() ? parts.distill.item() : 0.0;
      row.loss_greg = greg.item();
      total_value = total.item();

      const int64_t metric_rows = std::min<int64_t>(batch, kCollapseMetricRows);
      auto zslice = slice(out1.z, 0, metric_rows, 0, out1.z.dim(1));
      auto cm = collapse_metrics(stop_gradient(zslice));
      row.feature_std = cm.feature_std;
      row.mean_abs_cos = cm.mean_abs_cos;

      if (!std::isfinite(total_value)) {
        art.status = RunStatus::aborted_nan;
        art.abort_reason =
            "non-finite loss at iteration " + std::to_string(t) +
            " (feature_std=" + std::to_string(row.feature_std) +
            ", mean_abs_cos=" + std::to_string(row.mean_abs_cos) +
            "); training collapsed";
        aborted = true;
      } else {
        backward(total);
      }
    } catch (const NumericError& e) {
      art.status = RunStatus::aborted_nan;
      art.abort_reason = "non-finite numerics at iteration " +
                         std::to_string(t) + ": " + e.what() +
                         "; training collapsed";
      aborted = true;
    }

    art.metrics.push_back(row);
    art.total_view_forwards += row.view_forwards;
    art.iterations_run = t;
    if (aborted) break;

    if (wants_teacher && !config.ema_update_after_step)
      teacher->update(encoder);
    optimizer.step(lr);
    if (wants_teacher && config.ema_update_after_step)
      teacher->update(encoder);

    const bool collapsed_now =
        row.mean_abs_cos >= config.collapse.mean_abs_cos_threshold ||
        row.feature_std <= config.collapse.feature_std_threshold;
    consecutive_collapse = collapsed_now ? consecutive_collapse + 1 : 0;
    if (consecutive_collapse >= config.collapse.patience &&
        !art.collapse_detected) {
      art.collapse_detected = true;
      art.collapse_iter = t;
    }
  }

  art.optimizer_steps = optimizer.steps();
  return art;
}

TrainResult train(const TrainConfig& config) {
  config.validate();
  DataSet dataset = build_dataset(config);

  Rng root(config.seed);
  SlimmableEncoder encoder(config.encoder,
                           root.split(kStreamEncoder).next_u64());
  std::optional<MomentumEncoder> teacher;
  if (config.loss.momentum_target_base || config.loss.momentum_target_sub)
    teacher.emplace(encoder, config.ema_momentum);

  RunArtifacts artifacts = train_loop(config, encoder, teacher, dataset);
  return TrainResult{std::move(artifacts), std::move(encoder),
                     std::move(teacher), std::move(dataset)};
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

// Standardize with train-split statistics and append an intercept column.
struct ProbePreprocessor {
  std::vector<double> mean, inv_std;
  bool standardize = true;

  void fit(const Tensor& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    mean.assign(static_cast<std::size_t>(d), 0.0);
    inv_std.assign(static_cast<std::size_t>(d), 1.0);
    if (!standardize) return;
    auto data = x.data();
    for (int64_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (int64_t i = 0; i < n; ++i)
        m += data[static_cast<std::size_t>(i * d + j)];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double c = data[static_cast<std::size_t>(i * d + j)] - m;
        var += c * c;
      }
      var /= static_cast<double>(n);
      mean[static_cast<std::size_t>(j)] = m;
      inv_std[static_cast<std::size_t>(j)] = 1.0 / std::max(std::sqrt(var), 1e-8);
    }
  }

  Tensor apply(const Tensor& x) const {
    const int64_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n * (d + 1)));
    auto data = x.data();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<std::size_t>(i * (d + 1) + j)] =
            (data[static_cast<std::size_t>(i * d + j)] -
             mean[static_cast<std::size_t>(j)]) *
            inv_std[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i * (d + 1) + d)] = 1.0;  // intercept
    }
    return Tensor::from_data({n, d + 1}, std::move(out));
  }
};

}  // namespace

double linear_probe(const Tensor& train_features,
                    const std::vector<int64_t>& train_labels,
                    const Tensor& test_features,
                    const std::vector<int64_t>& test_labels, int64_t classes,
                    const ProbeConfig& probe) {
  check(train_features.rank() == 2 && test_features.rank() == 2,
        "linear_probe: rank-2 features required");
  check(static_cast<int64_t>(train_labels.size()) == train_features.dim(0),
        "linear_probe: one label per training row required");
  check(static_cast<int64_t>(test_labels.size()) == test_features.dim(0),
        "linear_probe: one label per test row required");
  check(classes >= 2, "linear_probe: need at least 2 classes");
  std::set<int64_t> distinct(train_labels.begin(), train_labels.end());
  check(distinct.size() >= 2, "linear_probe: single-class training set");

  ProbePreprocessor prep;
  prep.standardize = probe.standardize;
  prep.fit(train_features);
  auto x_train = prep.apply(train_features);
  auto x_test = prep.apply(test_features);

  const int64_t d = x_train.dim(1);
  const double inv_n = 1.0 / static_cast<double>(x_train.dim(0));
  auto weight = Tensor::zeros({d, classes}, /*requires_grad=*/true);
  std::vector<double> velocity;

  for (int64_t it = 0; it < probe.iters; ++it) {
    Tape tape;
    TapeScope scope(tape);
    ClassifierHead head{weight};
    auto loss = scale(cross_entropy(x_train, head, train_labels), inv_n);
    weight.zero_grad();
    backward(loss);
    sgd_step(weight, weight.grad(), probe.lr, probe.momentum, velocity);
  }

  auto logits = matmul(x_test, weight);
  int64_t correct = 0;
  for (int64_t i = 0; i < logits.dim(0); ++i) {
    int64_t best = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    if (best == test_labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.dim(0));
}

ProbeSplit probe_split(const DataSet& dataset, double holdout_fraction) {
  check(holdout_fraction > 0.0 && holdout_fraction < 1.0,
        "probe_split: holdout fraction must be in (0, 1)");
  ProbeSplit split;
  const int64_t every = std::max<int64_t>(2, static_cast<int64_t>(
      std::llround(1.0 / holdout_fraction)));
  for (int64_t i = 0; i < dataset.size(); ++i) {
    if (i % every == every - 1)
      split.test_index.push_back(i);
    else
      split.train_index.push_back(i);
  }
  check(!split.test_index.empty() && !split.train_index.empty(),
        "probe_split: dataset too small to split");
  return split;
}

namespace {

Tensor batch_from_indices(const DataSet& data,
                          const std::vector<int64_t>& index, int64_t lo,
                          int64_t hi) {
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(hi - lo));
  for (int64_t i = lo; i < hi; ++i)
    rows.push_back(data.features[static_cast<std::size_t>(
        index[static_cast<std::size_t>(i)])]);
  return stack_batch(rows);
}

// Backbone features at one width over an index list, eval mode.
Tensor extract_features(SlimmableEncoder& encoder, const DataSet& data,
                        const std::vector<int64_t>& index, WidthMultiplier w,
                        int64_t batch_size) {
  std::vector<double> flat;
  int64_t dim = 0;
  const int64_t total = static_cast<int64_t>(index.size());
  for (int64_t lo = 0; lo < total; lo += batch_size) {
    const int64_t hi = std::min(total, lo + batch_size);
    auto out = encoder.forward(batch_from_indices(data, index, lo, hi), w,
                               ForwardMode::eval);
    dim = out.features.dim(1);
    flat.insert(flat.end(), out.features.data().begin(),
                out.features.data().end());
  }
  return Tensor::from_data({total, dim}, std::move(flat));
}

std::vector<int64_t> labels_for(const DataSet& data,
                                const std::vector<int64_t>& index) {
  std::vector<int64_t> out;
  out.reserve(index.size());
  for (int64_t i : index)
    out.push_back(data.labels[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

std::vector<SweepRow> width_sweep(SlimmableEncoder& encoder,
                                  const std::vector<double>& widths,
                                  const DataSet& dataset,
                                  const TrainConfig& config,
                                  const DataSet* test_data) {
  std::vector<int64_t> train_index, test_index;
  const DataSet* test_set = test_data ? test_data : &dataset;
  if (test_data) {
    train_index.resize(static_cast<std::size_t>(dataset.size()));
    std::iota(train_index.begin(), train_index.end(), 0);
    test_index.resize(static_cast<std::size_t>(test_data->size()));
    std::iota(test_index.begin(), test_index.end(), 0);
  } else {
    auto split = probe_split(dataset, config.data.holdout_fraction);
    train_index = std::move(split.train_index);
    test_index = std::move(split.test_index);
  }
  const int64_t batch_size = std::max<int64_t>(
      2, std::min<int64_t>(config.optimizer.batch_size, 256));

  std::vector<SweepRow> rows;
  for (double width : widths) {
    check(width >= config.schedule.r_min - 1e-9 &&
              width <= config.schedule.r_max + 1e-9,
          "width_sweep: width " + std::to_string(width) +
              " outside the trained range");
    const WidthMultiplier w(width);

    // Recalibration batches from the train split, unaugmented.
    std::vector<Tensor> calib;
    const int64_t train_n = static_cast<int64_t>(train_index.size());
    for (int64_t lo = 0;
         lo < train_n &&
         static_cast<int64_t>(calib.size()) < kCalibrationBatches;
         lo += batch_size)
      calib.push_back(batch_from_indices(dataset, train_index, lo,
                                         std::min(train_n, lo + batch_size)));
    encoder.recalibrate(w, calib);

    auto train_x =
        extract_features(encoder, dataset, train_index, w, batch_size);
    auto test_x =
        extract_features(encoder, *test_set, test_index, w, batch_size);
    const double acc = linear_probe(train_x, labels_for(dataset, train_index),
                                    test_x, labels_for(*test_set, test_index),
                                    dataset.classes, config.probe);
    rows.push_back(SweepRow{width, encoder.active_parameter_count(w), acc});
  }
  return rows;
}

}  // namespace us3l
