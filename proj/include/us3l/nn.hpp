#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "us3l/objectives.hpp"
#include "us3l/rng.hpp"
#include "us3l/tensor.hpp"

// Slimmable layers and encoders. Width-w execution of a layer uses the prefix
// slice of its channels, so the parameters active at a smaller width nest
// inside those of any larger width. Per-width normalization statistics are
// collected by an explicit recalibration pass before evaluation.

namespace us3l {

// Width multiplier in (0, 1].
struct WidthMultiplier {
  explicit WidthMultiplier(double v);
  double value;
};

// max(1, round(width * total)) with round-half-even; monotone in width.
int64_t active_channels(WidthMultiplier width, int64_t total);

enum class NormKind { none, batch };

struct EncoderSpec {
  int64_t input_dim = 32;
  std::vector<int64_t> backbone = {64, 64, 64};  // hidden layer widths
  std::vector<int64_t> projector_hidden = {64};
  int64_t projector_dim = 2048;  // identical at every width
  int64_t predictor_hidden = 0;  // 0 keeps the predictor single-layer
  int64_t distill_hidden = 0;
  HeadMode head_mode = HeadMode::separate;
  NormKind norm = NormKind::batch;

  void validate() const;
};

enum class ForwardMode { train, eval, calibrate };

// theta_t <- m*theta_t + (1-m)*theta_s, elementwise.
void ema_update(Tensor& teacher, const Tensor& student, double momentum);
void ema_update(std::vector<Tensor>& teacher, const std::vector<Tensor>& student,
                double momentum);

class SlimmableLinear {
 public:
  SlimmableLinear(int64_t in_features, int64_t out_features, bool slice_input,
                  bool slice_output, Rng& rng, std::string name);

  Tensor forward(const Tensor& x, WidthMultiplier width) const;
  int64_t active_in(WidthMultiplier width) const;
  int64_t active_out(WidthMultiplier width) const;

  int64_t in_features() const { return weight.dim(1); }
  int64_t out_features() const { return weight.dim(0); }

  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  bool slice_input;
  bool slice_output;
  std::string name;
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> m2;  // sum of squared deviations
  int64_t count = 0;

  std::vector<double> variance() const;  // population, m2 / count
};

// Normalization over the batch dimension with affine parameters and one set
// of running statistics per evaluated channel count. Training and calibration
// use batch statistics; evaluation requires recalibrated statistics for the
// exact width and raises otherwise.
class SlimmableNorm {
 public:
  SlimmableNorm(int64_t features, Rng& rng, std::string name);

  Tensor forward(const Tensor& x, ForwardMode mode);
  void reset_stats(int64_t active);
  bool has_stats(int64_t active) const;

  Tensor gamma;  // [features]
  Tensor beta;   // [features]
  std::map<int64_t, RunningStats> stats;  // keyed by active channel count
  std::string name;
  static constexpr double kEps = 1e-5;
};

struct EncoderOutputs {
  Tensor features;   // backbone output, [n, active channels]
  Tensor z;          // projector output, [n, projector_dim] at every width
  Tensor p;          // predictor output, defined iff a predictor exists
  Tensor z_distill;  // distill-head output, defined iff head mode != none
};

class SlimmableEncoder {
 public:
  SlimmableEncoder(EncoderSpec spec, uint64_t seed);
  SlimmableEncoder(const SlimmableEncoder&) = delete;
  SlimmableEncoder& operator=(const SlimmableEncoder&) = delete;
  SlimmableEncoder(SlimmableEncoder&&) = default;
  SlimmableEncoder& operator=(SlimmableEncoder&&) = default;

  // Deep copy; the clone's parameters can be detached for teacher use.
  SlimmableEncoder clone(bool requires_grad) const;

  EncoderOutputs forward(const Tensor& batch, WidthMultiplier width,
                         ForwardMode mode = ForwardMode::train);

  // Streaming-moment recalibration of every norm layer at this width.
  void recalibrate(WidthMultiplier width, const std::vector<Tensor>& batches);
  bool has_stats(WidthMultiplier width) const;

  std::vector<Tensor> parameters();
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<SlimmableNorm*> norm_layers();  // backbone then projector order

  // Width-structured layers (backbone + projector), for group regularization.
  struct RegularizedLayer {
    Tensor weight;
    Tensor bias;
    bool sliced_output;
  };
  std::vector<RegularizedLayer> regularized_layers();

  int64_t active_parameter_count(WidthMultiplier width) const;
  const EncoderSpec& spec() const { return spec_; }

 private:
  struct Block {
    SlimmableLinear linear;
    std::optional<SlimmableNorm> norm;
    bool relu = false;
  };

  SlimmableEncoder() = default;
  Tensor run_blocks(std::vector<Block>& blocks, const Tensor& input,
                    WidthMultiplier width, ForwardMode mode);
  static Tensor run_dense(std::vector<Block>& blocks, const Tensor& input);

  EncoderSpec spec_;
  std::vector<Block> backbone_;
  std::vector<Block> projector_;
  std::vector<Block> predictor_;
  std::vector<Block> distill_head_;  // empty when head mode is none/shared
};

// Shadow copy of the student updated only through ema; its parameters carry
// no gradient and its forwards never record on a tape.
class MomentumEncoder {
 public:
  MomentumEncoder(const SlimmableEncoder& student, double momentum);

  void update(SlimmableEncoder& student);
  EncoderOutputs forward(const Tensor& batch, WidthMultiplier width,
                         ForwardMode mode = ForwardMode::train);

  double momentum() const { return momentum_; }
  SlimmableEncoder& encoder() { return encoder_; }

 private:
  SlimmableEncoder encoder_;
  double momentum_;
};

}  // namespace us3l
