#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kvguard {

// Result of a rank test. When the statistic is undefined (e.g. a constant
// series under Spearman), degenerate is set and statistic/p_value are NaN.
struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
    size_t n = 0;
    bool degenerate = false;
};

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
};

// Average ranks (1-based, ties averaged). Exposed for tests.
std::vector<double> average_ranks(std::span<const double> values);

// Spearman rank correlation with the two-sided t-approximation
// t = rho * sqrt((n-2) / (1-rho^2)), n-2 degrees of freedom.
// Requires equal lengths, n >= 3. Degenerate when either series is constant.
TestResult spearman(std::span<const double> x, std::span<const double> y);

// Kruskal-Wallis H with tie correction; p from the chi-square approximation
// with k-1 degrees of freedom. Requires >= 2 non-empty groups. When all
// values are identical H is defined as 0 and the result is degenerate.
TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups);

// Least squares y = slope*x + intercept. Requires n >= 2 and non-constant x.
// R^2 = 1 - SS_res/SS_tot, with R^2 = 1 when SS_tot = 0 (constant y fits
// itself perfectly).
LinearFit ols_fit(std::span<const double> x, std::span<const double> y);

// p_adj = min(1, m*p) with m = p_values.size(). NaN entries pass through.
std::vector<double> bonferroni(std::span<const double> p_values);

}  // namespace kvguard
