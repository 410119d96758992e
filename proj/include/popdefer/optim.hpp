#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "popdefer/error.hpp"
#include "popdefer/params.hpp"

namespace popdefer {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

namespace detail {
inline void check_grad_against(const Parameters& params, const Gradients& grads) {
    for (const auto& [name, p] : params.values()) {
        auto it = grads.find(name);
        if (it == grads.end())
            throw StructuralError("missing gradient for parameter '" + name + "'");
        if (!it->second.same_shape(p))
            throw StructuralError("gradient shape " + it->second.shape_str() +
                                  " mismatches parameter '" + name + "' " + p.shape_str());
        it->second.require_finite("gradient of '" + name + "'");
    }
}
}  // namespace detail

inline void sgd_step(Parameters& params, const Gradients& grads, double lr) {
    detail::check_grad_against(params, grads);
    for (auto& [name, p] : params.values()) {
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] -= lr * g.data()[i];
        p.require_finite("parameter '" + name + "' after sgd step");
    }
    ++params.step_count;
}

inline void adam_step(Parameters& params, const Gradients& grads, const AdamConfig& cfg = {}) {
    detail::check_grad_against(params, grads);
    ++params.step_count;
    const double t = static_cast<double>(params.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params.values()) {
        const Tensor& g = grads.at(name);
        Tensor& m = params.moment1(name);
        Tensor& v = params.moment2(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g.data()[i];
            m.data()[i] = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            v.data()[i] = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m.data()[i] / bc1;
            const double vhat = v.data()[i] / bc2;
            p.data()[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        p.require_finite("parameter '" + name + "' after adam step");
    }
}

// Loss callback contract: return the loss at the current parameters; when
// `grads` is non-null, also fill it via autodiff. Must be deterministic.
using LossFn = std::function<double(Parameters&, Gradients*)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t scalars_checked = 0;
};

// Central-difference verification of every parameter scalar:
// |g_ad - g_fd| / max(1, |g_fd|), maximized over all entries.
inline GradCheckReport grad_check(Parameters& params, const LossFn& loss_fn, double epsilon) {
    if (epsilon < 1e-6 || epsilon > 1e-3)
        throw ConfigError("grad_check epsilon must lie in [1e-6, 1e-3]");
    Gradients autodiff;
    const double base = loss_fn(params, &autodiff);
    if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite");

    GradCheckReport report;
    for (auto& [name, p] : params.values()) {
        const auto git = autodiff.find(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.data()[i];
            p.data()[i] = saved + epsilon;
            const double up = loss_fn(params, nullptr);
            p.data()[i] = saved - epsilon;
            const double down = loss_fn(params, nullptr);
            p.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("grad_check: perturbed loss is not finite");
            const double fd = (up - down) / (2.0 * epsilon);
            const double ad = git == autodiff.end() ? 0.0 : git->second.data()[i];
            const double rel = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            ++report.scalars_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace popdefer
