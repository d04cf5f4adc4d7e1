#include "us3l/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace us3l {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace

void SamplingSchedule::validate() const {
  check(total_iters >= 1, "schedule: total_iters must be >= 1");
  check(r_min > 0.0 && r_min <= r_max && r_max <= 1.0,
        "schedule: need 0 < r_min <= r_max <= 1");
  check(grid_step > 0.0, "schedule: grid_step must be positive");
  const double span = (r_max - r_min) / grid_step;
  check(std::abs(span - std::round(span)) < 1e-9,
        "schedule: width range must be an integer number of grid steps");
  if (mode == SamplingMode::static_sandwich)
    check(samples_per_iter >= 2, "schedule: static sandwich needs s >= 2");
}

std::vector<double> SamplingSchedule::width_grid() const {
  validate();
  const int64_t steps =
      static_cast<int64_t>(std::round((r_max - r_min) / grid_step));
  std::vector<double> grid(static_cast<std::size_t>(steps + 1));
  for (int64_t i = 0; i <= steps; ++i)
    grid[static_cast<std::size_t>(i)] =
        r_min + static_cast<double>(i) * grid_step;
  grid.back() = r_max;  // snap the endpoint
  return grid;
}

double SamplingSchedule::min_width_at(int64_t t) const {
  check(t >= 1 && t <= total_iters, "schedule: iteration out of range");
  const int64_t period = warmup_iters();
  if (period == 0) return r_min;  // tiny runs skip the warmup staircase
  const double staircase =
      1.0 - 0.25 * static_cast<double>(t / period);
  return std::max(r_min, staircase);
}

std::vector<double> sandwich_sample(const SamplingSchedule& schedule, Rng& rng) {
  schedule.validate();
  check(schedule.mode == SamplingMode::static_sandwich,
        "sandwich_sample: schedule is not in static sandwich mode");
  auto grid = schedule.width_grid();
  check(schedule.samples_per_iter <= static_cast<int64_t>(grid.size()),
        "sandwich_sample: s exceeds the width grid size");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(schedule.samples_per_iter));
  out.push_back(schedule.r_max);
  out.push_back(schedule.r_min);
  for (int64_t i = 2; i < schedule.samples_per_iter; ++i)
    out.push_back(grid[static_cast<std::size_t>(
        rng.uniform_int(static_cast<uint64_t>(grid.size())))]);
  return out;
}

std::vector<double> dynamic_sample(const SamplingSchedule& schedule, int64_t t,
                                   Rng& rng) {
  schedule.validate();
  check(t >= 1 && t <= schedule.total_iters,
        "dynamic_sample: iteration " + std::to_string(t) + " outside [1, " +
            std::to_string(schedule.total_iters) + "]");
  if (t <= schedule.warmup_iters()) return {schedule.r_max};

  const double lo = schedule.min_width_at(t);
  auto grid = schedule.width_grid();
  std::vector<double> eligible;
  for (double w : grid)
    if (w >= lo - 1e-9) eligible.push_back(w);
  check(!eligible.empty(), "dynamic_sample: empty eligible width range");
  const double random_width = eligible[static_cast<std::size_t>(
      rng.uniform_int(static_cast<uint64_t>(eligible.size())))];
  return {schedule.r_max, lo, random_width};
}

int64_t expected_forward_count(const SamplingSchedule& schedule) {
  schedule.validate();
  if (schedule.mode == SamplingMode::static_sandwich)
    return schedule.samples_per_iter * schedule.total_iters;
  const int64_t warmup = schedule.warmup_iters();
  return warmup + 3 * (schedule.total_iters - warmup);
}

double cosine_lr(int64_t t, int64_t total, double base_lr) {
  check(total >= 1, "cosine_lr: total must be >= 1");
  check(t >= 0 && t <= total, "cosine_lr: t outside [0, total]");
  return base_lr * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(t) /
                         static_cast<double>(total)));
}

void assert_min_samples(const SamplingSchedule& schedule) {
  schedule.validate();
  if (!schedule.universal) return;  // no arbitrary-width claim to protect
  const int64_t post_warmup_samples =
      schedule.mode == SamplingMode::dynamic ? 3 : schedule.samples_per_iter;
  if (post_warmup_samples < 3)
    fail("schedule: universal width coverage needs at least 3 samples per "
         "iteration (the smallest, the largest, and one random width); got " +
         std::to_string(post_warmup_samples));
}

void CostLedger::record(int64_t iter, const std::vector<double>& widths) {
  total += static_cast<int64_t>(widths.size());
  rows.push_back(Row{iter, widths, total});
}

}  // namespace us3l
