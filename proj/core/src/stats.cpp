#include "kvguard/stats.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace kvguard {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double clamp01(double p) { return std::min(1.0, std::max(0.0, p)); }

bool is_constant(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

double mean(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
    size_t n = values.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        // positions i..j share the average of ranks i+1..j+1
        double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

TestResult spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
    size_t n = x.size();
    if (n < 3) throw std::invalid_argument("spearman: need n >= 3");
    if (is_constant(x) || is_constant(y)) {
        return TestResult{kNan, kNan, n, true};
    }
    std::vector<double> rx = average_ranks(x);
    std::vector<double> ry = average_ranks(y);
    double mx = mean(rx), my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    double rho = sxy / std::sqrt(sxx * syy);
    rho = std::min(1.0, std::max(-1.0, rho));
    double p;
    if (1.0 - rho * rho <= 0.0) {
        p = 0.0;  // |rho| = 1: t diverges
    } else {
        double t = rho * std::sqrt((static_cast<double>(n) - 2.0) / (1.0 - rho * rho));
        boost::math::students_t dist(static_cast<double>(n) - 2.0);
        p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
    }
    return TestResult{rho, clamp01(p), n, false};
}

TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw std::invalid_argument("kruskal_wallis: need >= 2 groups");
    size_t total = 0;
    for (const auto& g : groups) {
        if (g.empty()) throw std::invalid_argument("kruskal_wallis: empty group");
        total += g.size();
    }
    std::vector<double> pooled;
    pooled.reserve(total);
    for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());

    std::vector<double> ranks = average_ranks(pooled);
    double n = static_cast<double>(total);

    double h = 0.0;
    size_t offset = 0;
    for (const auto& g : groups) {
        double rank_sum = 0.0;
        for (size_t i = 0; i < g.size(); ++i) rank_sum += ranks[offset + i];
        h += rank_sum * rank_sum / static_cast<double>(g.size());
        offset += g.size();
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);

    // tie correction: 1 - sum(t^3 - t) / (N^3 - N) over tie groups
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    double tie_sum = 0.0;
    size_t i = 0;
    while (i < sorted.size()) {
        size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        double t = static_cast<double>(j - i + 1);
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    double correction = 1.0 - tie_sum / (n * n * n - n);
    if (correction == 0.0) {
        // every value identical: H is defined as 0 and the test is moot
        return TestResult{0.0, kNan, total, true};
    }
    h /= correction;
    if (h < 0.0) h = 0.0;  // guard tiny negative from cancellation

    boost::math::chi_squared dist(static_cast<double>(groups.size()) - 1.0);
    double p = boost::math::cdf(boost::math::complement(dist, h));
    return TestResult{h, clamp01(p), total, false};
}

LinearFit ols_fit(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("ols_fit: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("ols_fit: need n >= 2");
    if (is_constant(x)) throw std::invalid_argument("ols_fit: constant x");
    double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        ss_tot += (y[i] - my) * (y[i] - my);
    }
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (ss_tot == 0.0) {
        fit.r_squared = 1.0;
        return fit;
    }
    double ss_res = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double r = y[i] - (fit.slope * x[i] + fit.intercept);
        ss_res += r * r;
    }
    fit.r_squared = clamp01(1.0 - ss_res / ss_tot);
    return fit;
}

std::vector<double> bonferroni(std::span<const double> p_values) {
    if (p_values.empty()) throw std::invalid_argument("bonferroni: empty input");
    double m = static_cast<double>(p_values.size());
    std::vector<double> out;
    out.reserve(p_values.size());
    for (double p : p_values) {
        out.push_back(std::isnan(p) ? p : std::min(1.0, m * p));
    }
    return out;
}

}  // namespace kvguard
