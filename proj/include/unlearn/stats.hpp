#pragma once

#include <span>
#include <vector>

namespace unlearn {

struct TTestResult {
  double t = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

/// Welch's t-test of H1: mean(a) > mean(b).
TTestResult welch_t_test_greater(std::span<const double> a, std::span<const double> b);

/// Pearson goodness of fit of observed counts against expected probabilities; returns the p-value.
double chi_square_p_value(std::span<const double> observed, std::span<const double> expected_probabilities);

double mean(std::span<const double> v);
double sample_variance(std::span<const double> v);

}  // namespace unlearn
