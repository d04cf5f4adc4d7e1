#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "us3l/tensor.hpp"

// Loss functions, group regularization, and the loss-design guideline check.
// Embedding conventions: losses that assume unit-norm rows say so; callers
// normalize with l2_normalize. Sums run over the batch, not means.

namespace us3l {

enum class BaseLoss { mse, nce };
enum class DistillLoss { none, mse, nce };
enum class HeadMode { none, shared, separate };

std::string to_string(BaseLoss v);
std::string to_string(DistillLoss v);
std::string to_string(HeadMode v);
BaseLoss base_loss_from_string(const std::string& s);
DistillLoss distill_loss_from_string(const std::string& s);
HeadMode head_mode_from_string(const std::string& s);

// One point in the loss-design grid: base loss for the largest network,
// distillation loss for sub-networks, auxiliary head handling, and which
// targets come from the momentum encoder.
struct LossSpec {
  BaseLoss base_loss = BaseLoss::nce;
  DistillLoss distill_loss = DistillLoss::mse;
  HeadMode head_mode = HeadMode::separate;
  bool momentum_target_base = true;
  bool momentum_target_sub = true;
  double temperature = 0.5;
  // Sub-network distillation terms enter as an unweighted sum by default;
  // this scalar is the exposed knob.
  double distill_weight = 1.0;

  void validate() const;  // throws std::invalid_argument on bad combinations
};

// Which of the three temporal-consistency guidelines a LossSpec satisfies:
// 1. the base loss is a relative-distance loss,
// 2. the distillation loss is a relative-distance loss,
// 3. a momentum teacher provides the targets.
// A configuration satisfying none of them is expected to collapse.
struct GuidelineReport {
  bool g1_base_relative = false;
  bool g2_distill_relative = false;
  bool g3_momentum_teacher = false;
  int satisfied_count = 0;
  bool stable = false;  // at least one guideline holds
};

GuidelineReport check_guidelines(const LossSpec& spec);

// Per-channel-group weight decay. Channels of a layer are divided into
// `groups` equal groups in order; group g decays with lambda * (1 - g*alpha),
// giving later channels more freedom.
struct GroupRegConfig {
  double lambda = 1e-4;
  int64_t groups = 8;
  double alpha = 0.05;

  void validate() const;
};

// Length-K vector of decay coefficients, non-increasing for alpha > 0.
// Group index is floor(k / floor(K/groups)) clamped to groups-1 so trailing
// channels when groups does not divide K stay in the last group.
std::vector<double> group_coefficients(int64_t channels,
                                       const GroupRegConfig& cfg);

// sum_k lambda_k * ||w_k||^2 over output channels (rows of weight, plus the
// matching bias entry). Gradient contribution is 2*lambda_k*w_k.
Tensor group_reg_penalty(const Tensor& weight,
                         const std::vector<double>& lambda_k);
Tensor group_reg_penalty(const Tensor& weight, const Tensor& bias,
                         const std::vector<double>& lambda_k);

// Linear classification head, bias-free: logits = z . weight, weight [d, C].
struct ClassifierHead {
  Tensor weight;

  int64_t feature_dim() const { return weight.dim(0); }
  int64_t class_count() const { return weight.dim(1); }
};

// Negative cosine similarity per row: -(p/|p|).(z/|z|), in [-1, 1].
Tensor neg_cosine(const Tensor& p, const Tensor& z);

// sum_i D(p1_i, SG(z2_i)) + D(p2_i, SG(z1_i)). The z branches are detached
// here, so gradient flows only through the predictor side.
Tensor simsiam_loss(const Tensor& p1, const Tensor& z1, const Tensor& p2,
                    const Tensor& z2);

// Contrastive loss over a batch of paired views. Anchors are z1 rows; the
// positive is the matching z2 row; negatives are every other row of both
// views. Rows must already be unit norm (checked to 1e-4). All inner products
// are divided by the temperature.
Tensor info_nce(const Tensor& z1, const Tensor& z2, double temperature);

// -sum_i z_s_i . z_t_i. Targets must be detached and rows unit norm.
Tensor mse_distill(const Tensor& z_s, const Tensor& z_t);

// sum_i ( -z_s_i . z_t_i + log sum_k exp(z_s_i . z_t_k / t) ) with the
// positive term also divided by t; t=1 gives the plain relative-distance
// distillation form.
Tensor nce_distill(const Tensor& z_s, const Tensor& z_t_all,
                   double temperature);

// -sum_i log softmax(w^T z_i)[y_i]
Tensor cross_entropy(const Tensor& z, const ClassifierHead& head,
                     const std::vector<int64_t>& labels);

// Raw (unnormalized) network outputs for the two views of one batch.
struct BaseOutputs {
  Tensor z1, z2;  // projector outputs
  Tensor p1, p2;  // predictor outputs; required only for the mse base loss
};

// Distill-head outputs of one sampled sub-network for both views. When
// target1/target2 are set (teacher executed at the matching width), they
// replace the shared targets for this sub-network's terms.
struct SubOutputs {
  double width = 0.0;
  Tensor d1, d2;
  Tensor target1, target2;
};

// Momentum-encoder projector outputs for both views (treated as constants).
struct TeacherOutputs {
  Tensor z1, z2;
  bool available() const { return z1.defined() && z2.defined(); }
};

struct LossParts {
  Tensor total;
  Tensor base;
  Tensor distill;  // undefined when no sub-networks were sampled
};

// Full training loss: base term plus the symmetric distillation terms of
// every sampled sub-network. Targets come from the momentum encoder or from
// the detached base outputs per the spec flags.
LossParts us3l_total_parts(const BaseOutputs& base,
                           const std::vector<SubOutputs>& subs,
                           const TeacherOutputs& teacher, const LossSpec& spec);
Tensor us3l_total(const BaseOutputs& base, const std::vector<SubOutputs>& subs,
                  const TeacherOutputs& teacher, const LossSpec& spec);

}  // namespace us3l
