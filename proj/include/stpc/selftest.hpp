#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stpc {

struct CheckResult {
  std::string name;
  double error = 0;  // max error of the check (metric depends on the check)
  double tolerance = 0;
  bool pass = false;
  std::string detail;
};

/// Relative gradient error used by the finite-difference checks:
/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).
double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                     double floor = 1e-5);

/// Central differences (h = 1e-5, float64) for every layer's backward.
std::vector<CheckResult> layer_gradient_checks(std::uint64_t seed);

/// Whole-model check on a two-event micro-batch with widths (4, 4, 4, 4).
/// Entries whose +-h perturbation flips a ReLU sign or a pooling argmax are
/// not differentiable at that scale and are skipped (at most 5% of entries).
CheckResult end_to_end_gradient_check(std::uint64_t seed);

/// Sparse convolution vs a zero-padded dense 3D convolution on random events
/// inside a 7^3 box (max abs diff).
std::vector<CheckResult> dense_oracle_checks(std::size_t n_events, std::uint64_t seed);

/// Kernel and pooling maps vs an O(N^2 * 27) scan (exact).
std::vector<CheckResult> kernel_map_checks(std::size_t n_sites, std::uint64_t seed);

std::vector<CheckResult> run_selftest(std::uint64_t seed = 2024);

}  // namespace stpc
