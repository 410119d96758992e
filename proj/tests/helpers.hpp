#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

// Shared test-side oracles. These deliberately avoid the library's own
// numeric paths so they stay independent of what they verify.

namespace testing_oracles {

// Extended-precision softmax cross-entropy reference.
inline long double ce_reference(const std::vector<double>& logits, std::size_t target) {
    long double m = logits[0];
    for (double v : logits)
        if (static_cast<long double>(v) > m) m = v;
    long double s = 0.0L;
    for (double v : logits) s += expl(static_cast<long double>(v) - m);
    return m + logl(s) - static_cast<long double>(logits[target]);
}

// Extended-precision population-deferral surrogate reference:
// -log(e^{g_y}/Z) - [m==y] log(e^{g_bot}/Z), Z = e^{g_bot} + sum_k e^{g_k}.
inline long double surrogate_reference(const std::vector<double>& g, double g_bot, std::size_t y,
                                       std::size_t m_e) {
    std::vector<double> z = g;
    z.push_back(g_bot);
    long double loss = ce_reference(z, y);
    if (m_e == y) loss += ce_reference(z, z.size() - 1);
    return loss;
}

// Regularized upper incomplete gamma Q(a, x) via series / continued fraction
// (Numerical Recipes style), good enough for chi-square p-values.
inline double gammq(double a, double x) {
    if (x < 0.0 || a <= 0.0) return 1.0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {
        // series for P(a,x)
        double ap = a, sum = 1.0 / a, del = sum;
        for (int n = 0; n < 500; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::fabs(del) < std::fabs(sum) * 1e-14) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
    }
    // continued fraction for Q(a,x)
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::fabs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-14) break;
    }
    return std::exp(-x + a * std::log(x) - gln) * h;
}

// P-value for a chi-square statistic with the given degrees of freedom.
inline double chi_square_pvalue(double stat, double dof) { return gammq(dof / 2.0, stat / 2.0); }

// Chi-square uniformity p-value over observed category counts.
inline double uniformity_pvalue(const std::vector<std::size_t>& counts) {
    double total = 0.0;
    for (std::size_t c : counts) total += static_cast<double>(c);
    const double expected = total / static_cast<double>(counts.size());
    double stat = 0.0;
    for (std::size_t c : counts) {
        const double d = static_cast<double>(c) - expected;
        stat += d * d / expected;
    }
    return chi_square_pvalue(stat, static_cast<double>(counts.size() - 1));
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace testing_oracles
