#include "unlearn/stats.hpp"

#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "unlearn/error.hpp"

namespace unlearn {

double mean(std::span<const double> v) {
  require(!v.empty(), ErrorCode::InvalidArgument, "mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_variance(std::span<const double> v) {
  require(v.size() >= 2, ErrorCode::InvalidArgument, "variance needs two observations");
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

TTestResult welch_t_test_greater(std::span<const double> a, std::span<const double> b) {
  const double va = sample_variance(a) / static_cast<double>(a.size());
  const double vb = sample_variance(b) / static_cast<double>(b.size());
  TTestResult r;
  const double se2 = va + vb;
  if (se2 <= 0) {
    r.t = mean(a) > mean(b) ? INFINITY : 0.0;
    r.p_value = mean(a) > mean(b) ? 0.0 : 1.0;
    return r;
  }
  r.t = (mean(a) - mean(b)) / std::sqrt(se2);
  r.dof = se2 * se2 /
          (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  boost::math::students_t dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

double chi_square_p_value(std::span<const double> observed, std::span<const double> expected_probabilities) {
  require(observed.size() == expected_probabilities.size() && observed.size() >= 2, ErrorCode::InvalidArgument,
          "chi-square needs matching bins");
  const double n = std::accumulate(observed.begin(), observed.end(), 0.0);
  double stat = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = n * expected_probabilities[i];
    require(e > 0, ErrorCode::InvalidArgument, "expected count must be positive");
    stat += (observed[i] - e) * (observed[i] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace unlearn
