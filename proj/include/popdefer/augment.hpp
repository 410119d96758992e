#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "popdefer/error.hpp"
#include "popdefer/rng.hpp"

namespace popdefer {

// Weak view: isotropic Gaussian noise of standard deviation sigma.
inline std::vector<double> augment_weak(const std::vector<double>& x, double sigma,
                                        std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xaa01));
    std::vector<double> out = x;
    for (double& v : out) v += sigma * rng.gauss();
    return out;
}

// Strong view: larger Gaussian noise plus zeroing of floor(mask_frac * f)
// uniformly chosen coordinates.
inline std::vector<double> augment_strong(const std::vector<double>& x, double sigma,
                                          double mask_frac, std::uint64_t seed) {
    if (mask_frac < 0.0 || mask_frac >= 1.0)
        throw ConfigError("augment_strong: mask fraction must lie in [0, 1)");
    Rng rng(derive_seed(seed, 0xaa02));
    std::vector<double> out = x;
    for (double& v : out) v += sigma * rng.gauss();
    const std::size_t masked = static_cast<std::size_t>(mask_frac * static_cast<double>(x.size()));
    if (masked > 0)
        for (std::size_t i : rng.sample_without_replacement(x.size(), masked)) out[i] = 0.0;
    return out;
}

}  // namespace popdefer
