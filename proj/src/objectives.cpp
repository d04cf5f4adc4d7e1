#include "us3l/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace us3l {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  check(a.shape() == b.shape(),
        std::string(where) + ": shape mismatch, " + shape_to_string(a.shape()) +
            " vs " + shape_to_string(b.shape()));
}

void check_unit_rows(const Tensor& z, const char* where) {
  const int64_t n = z.dim(0), d = z.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += z(i, j) * z(i, j);
    // Written so NaN norms also fail the test.
    if (!(std::abs(std::sqrt(s) - 1.0) <= 1e-4))
      throw NumericError(std::string(where) + ": row " + std::to_string(i) +
                         " is not unit norm (" + std::to_string(std::sqrt(s)) +
                         ")");
  }
}

}  // namespace

std::string to_string(BaseLoss v) { return v == BaseLoss::mse ? "mse" : "nce"; }

std::string to_string(DistillLoss v) {
  switch (v) {
    case DistillLoss::none: return "none";
    case DistillLoss::mse: return "mse";
    case DistillLoss::nce: return "nce";
  }
  return "?";
}

std::string to_string(HeadMode v) {
  switch (v) {
    case HeadMode::none: return "none";
    case HeadMode::shared: return "shared";
    case HeadMode::separate: return "new";
  }
  return "?";
}

BaseLoss base_loss_from_string(const std::string& s) {
  if (s == "mse") return BaseLoss::mse;
  if (s == "nce") return BaseLoss::nce;
  fail("unknown base loss '" + s + "' (expected mse|nce)");
}

DistillLoss distill_loss_from_string(const std::string& s) {
  if (s == "none") return DistillLoss::none;
  if (s == "mse") return DistillLoss::mse;
  if (s == "nce") return DistillLoss::nce;
  fail("unknown distill loss '" + s + "' (expected none|mse|nce)");
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "none") return HeadMode::none;
  if (s == "shared") return HeadMode::shared;
  if (s == "new") return HeadMode::separate;
  fail("unknown head mode '" + s + "' (expected none|shared|new)");
}

void LossSpec::validate() const {
  check(temperature > 0.0, "LossSpec: temperature must be positive");
  check(distill_weight >= 0.0, "LossSpec: distill_weight must be >= 0");
  if (distill_loss == DistillLoss::none)
    check(head_mode == HeadMode::none,
          "LossSpec: head_mode must be none when distill_loss is none");
}

GuidelineReport check_guidelines(const LossSpec& spec) {
  GuidelineReport r;
  r.g1_base_relative = spec.base_loss == BaseLoss::nce;
  r.g2_distill_relative = spec.distill_loss == DistillLoss::nce;
  r.g3_momentum_teacher = spec.momentum_target_base || spec.momentum_target_sub;
  r.satisfied_count = static_cast<int>(r.g1_base_relative) +
                      static_cast<int>(r.g2_distill_relative) +
                      static_cast<int>(r.g3_momentum_teacher);
  r.stable = r.satisfied_count >= 1;
  return r;
}

void GroupRegConfig::validate() const {
  check(lambda >= 0.0, "GroupRegConfig: lambda must be >= 0");
  check(groups >= 1, "GroupRegConfig: groups must be >= 1");
  if (alpha > 0.0 && alpha * static_cast<double>(groups - 1) >= 1.0)
    fail("GroupRegConfig: alpha*(groups-1) >= 1 makes a coefficient negative");
}

std::vector<double> group_coefficients(int64_t channels,
                                       const GroupRegConfig& cfg) {
  cfg.validate();
  check(channels >= cfg.groups,
        "group_coefficients: channel count " + std::to_string(channels) +
            " below group count " + std::to_string(cfg.groups));
  const int64_t per_group = channels / cfg.groups;
  std::vector<double> out(static_cast<std::size_t>(channels));
  for (int64_t k = 0; k < channels; ++k) {
    int64_t g = k / per_group;
    if (g > cfg.groups - 1) g = cfg.groups - 1;
    // Single rounding keeps 1 - g*alpha on the exact decimal for the
    // standard alpha grid.
    const double multiplier = std::fma(-static_cast<double>(g), cfg.alpha, 1.0);
    if (multiplier < 0.0)
      fail("group_coefficients: negative coefficient at channel " +
           std::to_string(k));
    out[static_cast<std::size_t>(k)] = cfg.lambda * multiplier;
  }
  return out;
}

Tensor group_reg_penalty(const Tensor& weight,
                         const std::vector<double>& lambda_k) {
  check(weight.rank() == 2, "group_reg_penalty: rank-2 weight required");
  const int64_t k = weight.dim(0);
  check(static_cast<int64_t>(lambda_k.size()) == k,
        "group_reg_penalty: coefficient count " +
            std::to_string(lambda_k.size()) + " != channel count " +
            std::to_string(k));
  auto coeff = Tensor::from_data({k}, lambda_k);
  return sum_all(mul(rowwise_dot(weight, weight), coeff));
}

Tensor group_reg_penalty(const Tensor& weight, const Tensor& bias,
                         const std::vector<double>& lambda_k) {
  check(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
        "group_reg_penalty: bias length must match weight rows");
  auto coeff = Tensor::from_data({weight.dim(0)}, lambda_k);
  return add(group_reg_penalty(weight, lambda_k),
             sum_all(mul(mul(bias, bias), coeff)));
}

Tensor neg_cosine(const Tensor& p, const Tensor& z) {
  check(p.rank() == 2 && z.rank() == 2, "neg_cosine: rank-2 tensors required");
  check_same_shape(p, z, "neg_cosine");
  return neg(rowwise_dot(l2_normalize(p), l2_normalize(z)));
}

Tensor simsiam_loss(const Tensor& p1, const Tensor& z1, const Tensor& p2,
                    const Tensor& z2) {
  check_same_shape(p1, z1, "simsiam_loss");
  check_same_shape(p1, p2, "simsiam_loss");
  check_same_shape(p1, z2, "simsiam_loss");
  auto t2 = stop_gradient(z2);
  auto t1 = stop_gradient(z1);
  return add(sum_all(neg_cosine(p1, t2)), sum_all(neg_cosine(p2, t1)));
}

Tensor info_nce(const Tensor& z1, const Tensor& z2, double temperature) {
  check(temperature > 0.0, "info_nce: temperature must be positive");
  check(z1.rank() == 2 && z2.rank() == 2, "info_nce: rank-2 tensors required");
  check_same_shape(z1, z2, "info_nce");
  const int64_t n = z1.dim(0);
  check(n >= 1, "info_nce: empty batch");
  check_unit_rows(z1, "info_nce");
  check_unit_rows(z2, "info_nce");

  // Row i of [z1.z2^T | z1.z1^T] holds the positive at column i and the
  // negatives everywhere else; the self-similarity column n+i is masked out
  // additively so its softmax weight is exactly zero.
  auto sims = concat_cols(matmul(z1, transpose(z2)), matmul(z1, transpose(z1)));
  std::vector<double> mask_values(static_cast<std::size_t>(n * 2 * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    mask_values[static_cast<std::size_t>(i * 2 * n + n + i)] = -1e30;
  auto mask = Tensor::from_data({n, 2 * n}, std::move(mask_values));

  auto denom = log_sum_exp_rows(add(scale(sims, 1.0 / temperature), mask));
  auto positive = scale(rowwise_dot(z1, z2), 1.0 / temperature);
  return sum_all(sub(denom, positive));
}

Tensor mse_distill(const Tensor& z_s, const Tensor& z_t) {
  check(z_s.rank() == 2 && z_t.rank() == 2,
        "mse_distill: rank-2 tensors required");
  check_same_shape(z_s, z_t, "mse_distill");
  return neg(sum_all(rowwise_dot(z_s, z_t)));
}

Tensor nce_distill(const Tensor& z_s, const Tensor& z_t_all,
                   double temperature) {
  check(temperature > 0.0, "nce_distill: temperature must be positive");
  check(z_s.rank() == 2 && z_t_all.rank() == 2,
        "nce_distill: rank-2 tensors required");
  check(z_t_all.dim(0) >= 1, "nce_distill: empty target set");
  check_same_shape(z_s, z_t_all, "nce_distill");
  auto sims = scale(matmul(z_s, transpose(z_t_all)), 1.0 / temperature);
  auto positive = scale(rowwise_dot(z_s, z_t_all), 1.0 / temperature);
  return sum_all(sub(log_sum_exp_rows(sims), positive));
}

Tensor cross_entropy(const Tensor& z, const ClassifierHead& head,
                     const std::vector<int64_t>& labels) {
  check(z.rank() == 2, "cross_entropy: rank-2 features required");
  check(z.dim(1) == head.feature_dim(),
        "cross_entropy: feature dim mismatch with head");
  check(static_cast<int64_t>(labels.size()) == z.dim(0),
        "cross_entropy: one label per row required");
  const int64_t classes = head.class_count();
  for (std::size_t i = 0; i < labels.size(); ++i)
    check(labels[i] >= 0 && labels[i] < classes,
          "cross_entropy: label " + std::to_string(labels[i]) +
              " out of range at row " + std::to_string(i));
  auto logits = matmul(z, head.weight);
  return sum_all(sub(log_sum_exp_rows(logits), gather_cols(logits, labels)));
}

LossParts us3l_total_parts(const BaseOutputs& base,
                           const std::vector<SubOutputs>& subs,
                           const TeacherOutputs& teacher,
                           const LossSpec& spec) {
  spec.validate();
  check(base.z1.defined() && base.z2.defined(),
        "us3l_total: base projector outputs required");
  if (!subs.empty())
    check(spec.distill_loss != DistillLoss::none,
          "us3l_total: sub-network outputs present but distill_loss is none");
  if (spec.momentum_target_base || (spec.momentum_target_sub && !subs.empty()))
    check(teacher.available(),
          "us3l_total: momentum targets requested but teacher outputs missing");

  const double tau = spec.temperature;

  LossParts parts;
  if (spec.base_loss == BaseLoss::mse) {
    check(base.p1.defined() && base.p2.defined(),
          "us3l_total: mse base loss requires predictor outputs");
    const Tensor& tgt1 = spec.momentum_target_base ? teacher.z1 : base.z1;
    const Tensor& tgt2 = spec.momentum_target_base ? teacher.z2 : base.z2;
    parts.base = simsiam_loss(base.p1, tgt1, base.p2, tgt2);
  } else {
    auto anchors = l2_normalize(base.z1);
    auto targets = spec.momentum_target_base
                       ? l2_normalize(stop_gradient(teacher.z2))
                       : l2_normalize(base.z2);
    parts.base = info_nce(anchors, targets, tau);
  }

  if (subs.empty() || spec.distill_loss == DistillLoss::none) {
    parts.total = parts.base;
    return parts;
  }

  // Targets for sub-networks: momentum outputs, or the detached base outputs.
  // Either way the target branch carries no gradient.
  auto shared1 = l2_normalize(
      stop_gradient(spec.momentum_target_sub ? teacher.z1 : base.z1));
  auto shared2 = l2_normalize(
      stop_gradient(spec.momentum_target_sub ? teacher.z2 : base.z2));

  Tensor distill_sum;
  for (const SubOutputs& sub : subs) {
    check(sub.d1.defined() && sub.d2.defined(),
          "us3l_total: sub-network outputs must cover both views");
    check(sub.target1.defined() == sub.target2.defined(),
          "us3l_total: per-sub targets must cover both views");
    auto target1 = sub.target1.defined()
                       ? l2_normalize(stop_gradient(sub.target1))
                       : shared1;
    auto target2 = sub.target2.defined()
                       ? l2_normalize(stop_gradient(sub.target2))
                       : shared2;
    auto s1 = l2_normalize(sub.d1);
    auto s2 = l2_normalize(sub.d2);
    Tensor term;
    if (spec.distill_loss == DistillLoss::mse) {
      term = add(mse_distill(s1, target2), mse_distill(s2, target1));
    } else {
      term = add(nce_distill(s1, target2, tau), nce_distill(s2, target1, tau));
    }
    distill_sum = distill_sum.defined() ? add(distill_sum, term) : term;
  }
  parts.distill = scale(distill_sum, spec.distill_weight);
  parts.total = add(parts.base, parts.distill);
  return parts;
}

Tensor us3l_total(const BaseOutputs& base, const std::vector<SubOutputs>& subs,
                  const TeacherOutputs& teacher, const LossSpec& spec) {
  return us3l_total_parts(base, subs, teacher, spec).total;
}

}  // namespace us3l
