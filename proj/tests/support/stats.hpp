#pragma once

// Test-side statistics helpers: chi-squared survival function via the
// regularized incomplete gamma function (series + continued fraction,
// Numerical Recipes style). Test code only.

#include <cmath>
#include <stdexcept>

namespace teststats {

inline double gamma_p_series(double a, double x) {
    double sum = 1.0 / a;
    double term = sum;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (a + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// P(X > x) for X ~ chi-squared with df degrees of freedom.
inline double chi_square_sf(double x, double df) {
    if (x < 0.0 || df <= 0.0) throw std::invalid_argument("chi_square_sf: bad arguments");
    if (x == 0.0) return 1.0;
    const double a = 0.5 * df, half_x = 0.5 * x;
    if (half_x < a + 1.0) return 1.0 - gamma_p_series(a, half_x);
    return gamma_q_contfrac(a, half_x);
}

// Pearson chi-squared statistic of observed counts against expected
// probabilities; bins with expected count below min_expected are pooled.
template <typename Counts, typename Probs>
double chi_square_pvalue(const Counts& observed, const Probs& probabilities, double total,
                         double min_expected = 5.0) {
    double stat = 0.0;
    double pooled_obs = 0.0, pooled_exp = 0.0;
    int bins = 0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const double expect = probabilities[i] * total;
        if (expect < min_expected) {
            pooled_obs += observed[i];
            pooled_exp += expect;
            continue;
        }
        const double diff = observed[i] - expect;
        stat += diff * diff / expect;
        bins += 1;
    }
    if (pooled_exp >= min_expected) {
        const double diff = pooled_obs - pooled_exp;
        stat += diff * diff / pooled_exp;
        bins += 1;
    }
    if (bins < 2) throw std::invalid_argument("chi_square_pvalue: not enough populated bins");
    return chi_square_sf(stat, static_cast<double>(bins - 1));
}

}  // namespace teststats
