#include "us3l/nn.hpp"

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

int64_t round_half_even(double r) {
  const double floor_part = std::floor(r);
  const double frac = r - floor_part;
  const int64_t lo = static_cast<int64_t>(floor_part);
  if (frac > 0.5) return lo + 1;
  if (frac < 0.5) return lo;
  return (lo % 2 == 0) ? lo : lo + 1;
}

}  // namespace

WidthMultiplier::WidthMultiplier(double v) : value(v) {
  check(v > 0.0 && v <= 1.0, "width multiplier " + std::to_string(v) +
                                 " outside (0, 1]");
}

int64_t active_channels(WidthMultiplier width, int64_t total) {
  check(total >= 1, "active_channels: channel count must be >= 1");
  const int64_t rounded = round_half_even(width.value * static_cast<double>(total));
  return std::max<int64_t>(1, rounded);
}

void EncoderSpec::validate() const {
  check(input_dim >= 1, "EncoderSpec: input_dim must be >= 1");
  check(!backbone.empty(), "EncoderSpec: backbone must have at least one layer");
  for (int64_t w : backbone)
    check(w >= 1, "EncoderSpec: backbone widths must be >= 1");
  for (int64_t w : projector_hidden)
    check(w >= 1, "EncoderSpec: projector widths must be >= 1");
  check(projector_dim >= 1, "EncoderSpec: projector_dim must be >= 1");
  check(predictor_hidden >= 0 && distill_hidden >= 0,
        "EncoderSpec: head widths must be >= 0");
}

void ema_update(Tensor& teacher, const Tensor& student, double momentum) {
  check(momentum >= 0.0 && momentum <= 1.0,
        "ema_update: momentum must be in [0, 1]");
  check(teacher.shape() == student.shape(),
        "ema_update: shape mismatch, " + shape_to_string(teacher.shape()) +
            " vs " + shape_to_string(student.shape()));
  auto t = teacher.mutable_data();
  auto s = student.data();
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = momentum * t[i] + (1.0 - momentum) * s[i];
}

void ema_update(std::vector<Tensor>& teacher, const std::vector<Tensor>& student,
                double momentum) {
  check(teacher.size() == student.size(),
        "ema_update: parameter list length mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    ema_update(teacher[i], student[i], momentum);
}

// ---------------------------------------------------------------------------
// SlimmableLinear

SlimmableLinear::SlimmableLinear(int64_t in_features, int64_t out_features,
                                 bool slice_in, bool slice_out, Rng& rng,
                                 std::string layer_name)
    : slice_input(slice_in), slice_output(slice_out), name(std::move(layer_name)) {
  check(in_features >= 1 && out_features >= 1,
        "SlimmableLinear: features must be >= 1");
  std::vector<double> w(static_cast<std::size_t>(in_features * out_features));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_features));
  for (double& v : w) v = rng.gauss(0.0, std_dev);
  weight = Tensor::from_data({out_features, in_features}, std::move(w), true);
  bias = Tensor::zeros({out_features}, true);
}

int64_t SlimmableLinear::active_in(WidthMultiplier width) const {
  return slice_input ? active_channels(width, in_features()) : in_features();
}

int64_t SlimmableLinear::active_out(WidthMultiplier width) const {
  return slice_output ? active_channels(width, out_features()) : out_features();
}

Tensor SlimmableLinear::forward(const Tensor& x, WidthMultiplier width) const {
  const int64_t ki = active_in(width);
  const int64_t ko = active_out(width);
  check(x.rank() == 2, "SlimmableLinear: rank-2 input required");
  check(x.dim(1) == ki, name + ": input has " + std::to_string(x.dim(1)) +
                            " features, active width expects " +
                            std::to_string(ki));
  auto w_active = slice(weight, 0, ko, 0, ki);
  auto b_active = slice_prefix(bias, ko);
  return add(matmul(x, transpose(w_active)), b_active);
}

// ---------------------------------------------------------------------------
// SlimmableNorm

std::vector<double> RunningStats::variance() const {
  std::vector<double> v(mean.size(), 0.0);
  if (count > 0)
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = m2[i] / static_cast<double>(count);
  return v;
}

SlimmableNorm::SlimmableNorm(int64_t features, Rng& rng, std::string layer_name)
    : name(std::move(layer_name)) {
  (void)rng;
  gamma = Tensor::full({features}, 1.0, true);
  beta = Tensor::zeros({features}, true);
}

void SlimmableNorm::reset_stats(int64_t active) { stats.erase(active); }

bool SlimmableNorm::has_stats(int64_t active) const {
  auto it = stats.find(active);
  return it != stats.end() && it->second.count > 0;
}

Tensor SlimmableNorm::forward(const Tensor& x, ForwardMode mode) {
  check(x.rank() == 2, "SlimmableNorm: rank-2 input required");
  const int64_t n = x.dim(0);
  const int64_t active = x.dim(1);
  check(active <= gamma.dim(0), name + ": more channels than parameters");
  auto gamma_active = slice_prefix(gamma, active);
  auto beta_active = slice_prefix(beta, active);

  if (mode == ForwardMode::eval) {
    auto it = stats.find(active);
    if (it == stats.end() || it->second.count == 0)
      throw std::runtime_error(
          name + ": no statistics recalibrated for " + std::to_string(active) +
          " active channels; run recalibration before evaluation");
    const RunningStats& rs = it->second;
    std::vector<double> inv(static_cast<std::size_t>(active));
    auto var = rs.variance();
    for (std::size_t i = 0; i < inv.size(); ++i)
      inv[i] = 1.0 / std::sqrt(var[i] + kEps);
    auto mean_c = Tensor::from_data({active}, rs.mean);
    auto inv_c = Tensor::from_data({active}, std::move(inv));
    return add(mul(mul(sub(x, mean_c), inv_c), gamma_active), beta_active);
  }

  // Batch statistics, differentiable end to end.
  const double inv_n = 1.0 / static_cast<double>(n);
  auto mu = scale(sum_axis0(x), inv_n);
  auto centered = sub(x, mu);
  auto var = scale(sum_axis0(mul(centered, centered)), inv_n);

  if (mode == ForwardMode::calibrate) {
    // Chan merge of the batch moments into the running accumulator.
    RunningStats& rs = stats[active];
    if (rs.count == 0) {
      rs.mean.assign(static_cast<std::size_t>(active), 0.0);
      rs.m2.assign(static_cast<std::size_t>(active), 0.0);
    }
    check(static_cast<int64_t>(rs.mean.size()) == active,
          name + ": stats dimensionality changed");
    const int64_t n1 = rs.count;
    for (int64_t j = 0; j < active; ++j) {
      const double m2b = var(j) * static_cast<double>(n);
      const double delta = mu(j) - rs.mean[static_cast<std::size_t>(j)];
      const double total = static_cast<double>(n1 + n);
      rs.mean[static_cast<std::size_t>(j)] +=
          delta * static_cast<double>(n) / total;
      rs.m2[static_cast<std::size_t>(j)] +=
          m2b + delta * delta * static_cast<double>(n1) *
                    static_cast<double>(n) / total;
    }
    rs.count += n;
  }

  auto inv = pow_scalar(add(var, Tensor::full({active}, kEps)), -0.5);
  return add(mul(mul(centered, inv), gamma_active), beta_active);
}

// ---------------------------------------------------------------------------
// SlimmableEncoder

SlimmableEncoder::SlimmableEncoder(EncoderSpec spec, uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  Rng master(seed);

  auto make_block = [&](int64_t in, int64_t out, bool slice_in, bool slice_out,
                        bool with_norm, bool with_relu, const std::string& name,
                        uint64_t tag) {
    Rng layer_rng = master.split(tag);
    Block b{SlimmableLinear(in, out, slice_in, slice_out, layer_rng, name),
            std::nullopt, with_relu};
    if (with_norm && spec_.norm == NormKind::batch)
      b.norm.emplace(out, layer_rng, name + ".norm");
    return b;
  };

  uint64_t tag = 1;
  int64_t prev = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.backbone.size(); ++i) {
    backbone_.push_back(make_block(prev, spec_.backbone[i], i > 0, true, true,
                                   true, "backbone." + std::to_string(i),
                                   tag++));
    prev = spec_.backbone[i];
  }

  for (std::size_t i = 0; i < spec_.projector_hidden.size(); ++i) {
    projector_.push_back(make_block(prev, spec_.projector_hidden[i], true, true,
                                    true, true,
                                    "projector." + std::to_string(i), tag++));
    prev = spec_.projector_hidden[i];
  }
  // Final projector layer: output dimension fixed so targets are comparable
  // across widths.
  projector_.push_back(make_block(prev, spec_.projector_dim, true, false, false,
                                  false, "projector.out", tag++));

  auto make_head = [&](std::vector<Block>& head, int64_t hidden,
                       const std::string& name) {
    if (hidden > 0) {
      head.push_back(make_block(spec_.projector_dim, hidden, false, false,
                                false, true, name + ".0", tag++));
      head.push_back(make_block(hidden, spec_.projector_dim, false, false,
                                false, false, name + ".1", tag++));
    } else {
      head.push_back(make_block(spec_.projector_dim, spec_.projector_dim, false,
                                false, false, false, name + ".0", tag++));
    }
  };
  make_head(predictor_, spec_.predictor_hidden, "predictor");
  if (spec_.head_mode == HeadMode::separate)
    make_head(distill_head_, spec_.distill_hidden, "distill");
}

Tensor SlimmableEncoder::run_blocks(std::vector<Block>& blocks,
                                    const Tensor& input, WidthMultiplier width,
                                    ForwardMode mode) {
  Tensor x = input;
  for (Block& b : blocks) {
    x = b.linear.forward(x, width);
    if (b.norm) x = b.norm->forward(x, mode);
    if (b.relu) x = relu(x);
  }
  return x;
}

Tensor SlimmableEncoder::run_dense(std::vector<Block>& blocks,
                                   const Tensor& input) {
  Tensor x = input;
  const WidthMultiplier full(1.0);
  for (Block& b : blocks) {
    x = b.linear.forward(x, full);
    if (b.relu) x = relu(x);
  }
  return x;
}

EncoderOutputs SlimmableEncoder::forward(const Tensor& batch,
                                         WidthMultiplier width,
                                         ForwardMode mode) {
  check(batch.rank() == 2 && batch.dim(1) == spec_.input_dim,
        "SlimmableEncoder: batch must be [n, " +
            std::to_string(spec_.input_dim) + "]");
  EncoderOutputs out;
  out.features = run_blocks(backbone_, batch, width, mode);
  out.z = run_blocks(projector_, out.features, width, mode);
  out.p = run_dense(predictor_, out.z);
  switch (spec_.head_mode) {
    case HeadMode::none: break;
    case HeadMode::shared: out.z_distill = out.p; break;
    case HeadMode::separate:
      out.z_distill = run_dense(distill_head_, out.z);
      break;
  }
  return out;
}

void SlimmableEncoder::recalibrate(WidthMultiplier width,
                                   const std::vector<Tensor>& batches) {
  check(!batches.empty(), "recalibrate: at least one calibration batch required");
  auto reset_in = [&](std::vector<Block>& blocks) {
    for (Block& b : blocks)
      if (b.norm) b.norm->reset_stats(b.linear.active_out(width));
  };
  reset_in(backbone_);
  reset_in(projector_);
  for (const Tensor& batch : batches)
    forward(batch, width, ForwardMode::calibrate);
}

bool SlimmableEncoder::has_stats(WidthMultiplier width) const {
  auto blocks_ok = [&](const std::vector<Block>& blocks) {
    for (const Block& b : blocks)
      if (b.norm && !b.norm->has_stats(b.linear.active_out(width)))
        return false;
    return true;
  };
  return blocks_ok(backbone_) && blocks_ok(projector_);
}

std::vector<Tensor> SlimmableEncoder::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> SlimmableEncoder::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  auto visit = [&](std::vector<Block>& blocks) {
    for (Block& b : blocks) {
      out.emplace_back(b.linear.name + ".weight", b.linear.weight);
      out.emplace_back(b.linear.name + ".bias", b.linear.bias);
      if (b.norm) {
        out.emplace_back(b.norm->name + ".gamma", b.norm->gamma);
        out.emplace_back(b.norm->name + ".beta", b.norm->beta);
      }
    }
  };
  visit(backbone_);
  visit(projector_);
  visit(predictor_);
  visit(distill_head_);
  return out;
}

std::vector<SlimmableNorm*> SlimmableEncoder::norm_layers() {
  std::vector<SlimmableNorm*> out;
  auto visit = [&](std::vector<Block>& blocks) {
    for (Block& b : blocks)
      if (b.norm) out.push_back(&*b.norm);
  };
  visit(backbone_);
  visit(projector_);
  return out;
}

std::vector<SlimmableEncoder::RegularizedLayer>
SlimmableEncoder::regularized_layers() {
  std::vector<RegularizedLayer> out;
  auto visit = [&](std::vector<Block>& blocks) {
    for (Block& b : blocks)
      out.push_back(RegularizedLayer{b.linear.weight, b.linear.bias,
                                     b.linear.slice_output});
  };
  visit(backbone_);
  visit(projector_);
  return out;
}

int64_t SlimmableEncoder::active_parameter_count(WidthMultiplier width) const {
  int64_t total = 0;
  auto visit = [&](const std::vector<Block>& blocks, bool slimmable) {
    for (const Block& b : blocks) {
      const int64_t ki =
          slimmable ? b.linear.active_in(width) : b.linear.in_features();
      const int64_t ko =
          slimmable ? b.linear.active_out(width) : b.linear.out_features();
      total += ki * ko + ko;
      if (b.norm) total += 2 * ko;
    }
  };
  visit(backbone_, true);
  visit(projector_, true);
  visit(predictor_, false);
  visit(distill_head_, false);
  return total;
}

SlimmableEncoder SlimmableEncoder::clone(bool requires_grad) const {
  SlimmableEncoder copy(spec_, 0);
  auto copy_blocks = [&](const std::vector<Block>& src, std::vector<Block>& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].linear.weight = Tensor::from_data(
          src[i].linear.weight.shape(),
          {src[i].linear.weight.data().begin(), src[i].linear.weight.data().end()},
          requires_grad);
      dst[i].linear.bias = Tensor::from_data(
          src[i].linear.bias.shape(),
          {src[i].linear.bias.data().begin(), src[i].linear.bias.data().end()},
          requires_grad);
      if (src[i].norm) {
        dst[i].norm->gamma = Tensor::from_data(
            src[i].norm->gamma.shape(),
            {src[i].norm->gamma.data().begin(), src[i].norm->gamma.data().end()},
            requires_grad);
        dst[i].norm->beta = Tensor::from_data(
            src[i].norm->beta.shape(),
            {src[i].norm->beta.data().begin(), src[i].norm->beta.data().end()},
            requires_grad);
        dst[i].norm->stats = src[i].norm->stats;
      }
    }
  };
  copy_blocks(backbone_, copy.backbone_);
  copy_blocks(projector_, copy.projector_);
  copy_blocks(predictor_, copy.predictor_);
  copy_blocks(distill_head_, copy.distill_head_);
  return copy;
}

// ---------------------------------------------------------------------------
// MomentumEncoder

MomentumEncoder::MomentumEncoder(const SlimmableEncoder& student,
                                 double momentum)
    : encoder_(student.clone(/*requires_grad=*/false)), momentum_(momentum) {
  check(momentum >= 0.0 && momentum <= 1.0,
        "MomentumEncoder: momentum must be in [0, 1]");
}

void MomentumEncoder::update(SlimmableEncoder& student) {
  auto teacher_params = encoder_.parameters();
  auto student_params = student.parameters();
  ema_update(teacher_params, student_params, momentum_);
}

EncoderOutputs MomentumEncoder::forward(const Tensor& batch,
                                        WidthMultiplier width,
                                        ForwardMode mode) {
  return encoder_.forward(batch, width, mode);
}

}  // namespace us3l
