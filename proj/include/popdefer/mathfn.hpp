#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "popdefer/error.hpp"

namespace popdefer {

inline double log_sum_exp(std::span<const double> z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

// Softmax of one logit row, max-subtracted.
inline std::vector<double> softmax(std::span<const double> z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - m);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

// -log softmax(z)[target], numerically stabilized.
inline double softmax_cross_entropy(std::span<const double> logits, std::size_t target) {
    if (logits.size() < 2) throw StructuralError("softmax_cross_entropy: need at least 2 logits");
    if (target >= logits.size())
        throw StructuralError("softmax_cross_entropy: target " + std::to_string(target) +
                              " out of range for " + std::to_string(logits.size()) + " logits");
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("softmax_cross_entropy: non-finite logit");
    return log_sum_exp(logits) - logits[target];
}

inline double softmax_cross_entropy(const std::vector<double>& logits, std::size_t target) {
    return softmax_cross_entropy(std::span<const double>(logits), target);
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace popdefer
