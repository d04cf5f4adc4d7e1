#pragma once

#include <cstdint>
#include <vector>

#include "us3l/rng.hpp"

// Width-sampling policies, the cosine learning-rate schedule, and forward-
// cost accounting. Dynamic sampling trains only the largest network for the
// first quarter of the run, then samples the largest, the current smallest,
// and one random grid width while the smallest width steps down once per
// quarter.

namespace us3l {

enum class SamplingMode { static_sandwich, dynamic };

struct SamplingSchedule {
  SamplingMode mode = SamplingMode::dynamic;
  int64_t total_iters = 400;
  double r_min = 0.25;
  double r_max = 1.0;
  int64_t samples_per_iter = 3;  // static mode sample count s
  double grid_step = 0.05;
  // Whether the trained model claims to run at arbitrary widths in the range
  // (as opposed to only the sampled switch list).
  bool universal = true;

  int64_t warmup_iters() const { return total_iters / 4; }
  std::vector<double> width_grid() const;
  // Smallest sampled width at iteration t (1-based):
  // max(r_min, 1 - 0.25*floor(t / warmup_iters)).
  double min_width_at(int64_t t) const;

  void validate() const;
};

// Static sandwich draw: [r_max, r_min, s-2 random grid widths]. Random slots
// are uniform over the whole grid, so duplicates can occur.
std::vector<double> sandwich_sample(const SamplingSchedule& schedule, Rng& rng);

// Dynamic draw at iteration t: {1.0} during warmup, then
// [1.0, min_width_at(t), one random grid width >= min_width_at(t)].
std::vector<double> dynamic_sample(const SamplingSchedule& schedule, int64_t t,
                                   Rng& rng);

// Exact total width-executions of a full run: warmup*1 + rest*3 for dynamic,
// s*T for static. Momentum-teacher forwards are tracked separately.
int64_t expected_forward_count(const SamplingSchedule& schedule);

// base_lr * 0.5 * (1 + cos(pi * t / total)).
double cosine_lr(int64_t t, int64_t total, double base_lr);

// Universal-width coverage needs the smallest, the largest, and at least one
// random width each post-warmup iteration; rejects configurations below that
// minimum. Base-only warmup phases are exempt.
void assert_min_samples(const SamplingSchedule& schedule);

struct CostLedger {
  struct Row {
    int64_t iter;
    std::vector<double> widths;
    int64_t cumulative;
  };
  std::vector<Row> rows;
  int64_t total = 0;
  int64_t teacher_forwards = 0;  // not part of total

  void record(int64_t iter, const std::vector<double>& widths);
};

}  // namespace us3l
